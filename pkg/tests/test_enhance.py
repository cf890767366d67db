import json
from datetime import datetime, timezone

import httpx
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fixtures import pe_cases
from idguide.enhance.cache import ResponseCache, digest_bytes
from idguide.enhance.pipeline import (
    EnhanceContext,
    EnhancementError,
    SampleRecord,
    UnresolvableReference,
    derive_ref_prompt,
    enhance_manifest,
    enhance_prompt,
    enhance_reference,
    read_manifest,
    write_manifest,
)
from idguide.enhance.providers import (
    CopyImageGenerator,
    HTTPChatProvider,
    MockTextProvider,
    ProviderError,
    ProviderRequest,
    RetryPolicy,
)
from idguide.enhance.templates import IE_CONSTRAINTS, PE_CONSTRAINTS, build_ie_instruction, build_pe_instruction
from idguide.enhance.validate import is_single_sentence, validate_pe, validate_ref_prompt

FIXED_CLOCK = lambda: datetime(2024, 1, 1, tzinfo=timezone.utc)  # noqa: E731
NO_SLEEP = RetryPolicy(attempts=3, base_delay=0.0, sleep=lambda s: None)


def make_ctx(tmp_path, provider=None, gen=None):
    return EnhanceContext(
        text_provider=provider or MockTextProvider(),
        image_generator=gen if gen is not None else CopyImageGenerator(),
        cache=ResponseCache(tmp_path / "cache"),
        retry=NO_SLEEP,
        clock=FIXED_CLOCK,
    )


@pytest.fixture
def ref(tmp_path):
    p = tmp_path / "face.png"
    p.write_bytes(b"\x89PNG fake face bytes")
    return p


# -- templates ---------------------------------------------------------------


def test_pe_instruction_contents():
    text = build_pe_instruction("The football quarterback")
    assert "The football quarterback" in text
    for bullet in PE_CONSTRAINTS:
        assert bullet in text
    assert "$" not in text


def test_pe_instruction_trims_and_is_pure():
    assert build_pe_instruction("The football quarterback  \n") == build_pe_instruction("The football quarterback")


def test_ie_instruction_contents():
    tc = "The lifeguard, a woman in her 30s with freckles, swims past the buoys."
    text = build_ie_instruction(tc)
    assert tc in text
    for bullet in IE_CONSTRAINTS:
        assert bullet in text
    assert build_ie_instruction(tc) == text


@pytest.mark.parametrize("builder", [build_pe_instruction, build_ie_instruction])
def test_empty_instruction_rejected(builder):
    with pytest.raises(ValueError):
        builder("   ")


def test_template_with_dollar_in_prompt():
    assert "costs $5" in build_pe_instruction("A vendor sells a hot dog that costs $5")


# -- validation --------------------------------------------------------------


def test_validate_identical():
    assert validate_pe("The football quarterback", "The football quarterback").ok


@given(st.lists(st.sampled_from(["The", "runner", "jogs", "along", "a", "quiet", "road", "Dana"]), min_size=1, max_size=10))
def test_validate_self_always_passes(words):
    t = " ".join(words)
    assert validate_pe(t, t).ok
    assert validate_pe(t + ".", t + ".").ok


def test_validate_missing_prompt():
    rep = validate_pe("The football quarterback", "The quarterback who has a beard.")
    assert rep.codes == ["verbatim"]
    assert rep.issues[0].message == "original prompt not preserved verbatim"


def test_validate_blacklisted_insertion():
    rep = validate_pe("The chef stirs the soup", "The chef stirs the soup wearing a red jacket.")
    assert "non-facial attribute" in rep.codes


def test_blacklist_applies_to_inserted_text_only():
    # "hat" belongs to the caption itself, not the insertion
    assert validate_pe("A man tips his hat", "A man tips his hat, a man in his 60s with a grey beard.").ok


def test_validate_whole_word_match():
    assert validate_pe("The football quarterback", "The football quarterbacks who are tall.").codes == ["verbatim"]


def test_validate_whitespace_normalised_unless_strict():
    assert validate_pe("The  football quarterback", "The football quarterback who is young.").ok
    assert not validate_pe("The  football quarterback", "The football quarterback who is young.", strict=True).ok


def test_validate_trailing_period_moves():
    assert validate_pe("A surfer paddles out.", "A surfer paddles out, a woman with short blond hair.").ok


def test_validate_multi_sentence():
    rep = validate_pe("A chef cooks", "A chef cooks. She has brown eyes.")
    assert rep.codes == ["single_sentence"]


def test_validate_empty():
    assert validate_pe("", "x").codes == ["empty"]


def test_validation_fixture_suite():
    preserved, mutated = pe_cases()
    assert len(preserved) == len(mutated) == 50
    assert all(validate_pe(t, tc).ok for t, tc in preserved)
    assert all("verbatim" in validate_pe(t, tc).codes for t, tc in mutated)


@pytest.mark.parametrize(
    "text,ok",
    [
        ("A cat sits.", True),
        ("A cat sits", True),
        ("Dr. Smith runs.", True),
        ("A cat sits. A dog barks.", False),
        ("A cat sits!\n", False),
        ("Why? Because.", False),
        ("Wait...", False),
    ],
)
def test_single_sentence(text, ok):
    assert is_single_sentence(text) is ok


def test_ref_prompt_meta_language():
    assert validate_ref_prompt("A lifeguard in a red uniform as the camera pans left.").codes == ["meta language"]
    assert validate_ref_prompt("A person in a lifeguard uniform stands on the beach.").ok


# -- providers ---------------------------------------------------------------


def test_mock_provider_deterministic():
    req = ProviderRequest("PE", "ignored", "The football quarterback", b"img")
    a, b = MockTextProvider().complete(req), MockTextProvider().complete(req)
    assert a == b and a.startswith("The football quarterback who is ")
    assert validate_pe("The football quarterback", a).ok


def test_http_provider_payload_and_key(monkeypatch):
    seen = {}

    def handler(request):
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"choices": [{"message": {"content": " The chef, a bald man, cooks. "}}]})

    client = httpx.Client(transport=httpx.MockTransport(handler))
    prov = HTTPChatProvider.from_config({"endpoint": "https://llm.invalid/v1/chat", "model": "m", "params": {"temperature": 0.2}}, client)
    monkeypatch.setenv("IDGUIDE_API_KEY", "sekret")
    out = prov.complete(ProviderRequest("PE", "instr", "The chef cooks", b"abc"))
    assert out == "The chef, a bald man, cooks."
    assert seen["auth"] == "Bearer sekret"
    assert seen["body"]["temperature"] == 0.2
    parts = seen["body"]["messages"][0]["content"]
    assert parts[0] == {"type": "text", "text": "instr"}
    assert parts[1]["image_url"]["url"].startswith("data:image/png;base64,")


def test_http_provider_requires_env_key(monkeypatch):
    monkeypatch.delenv("IDGUIDE_API_KEY", raising=False)
    prov = HTTPChatProvider("https://llm.invalid", "m", client=httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(500))))
    with pytest.raises(ProviderError, match="IDGUIDE_API_KEY"):
        prov.complete(ProviderRequest("PE", "i", "t"))


def test_http_provider_rejects_key_in_config():
    with pytest.raises(ValueError):
        HTTPChatProvider.from_config({"endpoint": "e", "model": "m", "api_key": "x"})


def test_http_provider_server_error(monkeypatch):
    monkeypatch.setenv("IDGUIDE_API_KEY", "k")
    prov = HTTPChatProvider("https://llm.invalid", "m", client=httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(503))))
    with pytest.raises(ProviderError):
        prov.complete(ProviderRequest("PE", "i", "t"))


# -- pipeline ----------------------------------------------------------------


def test_enhance_prompt_and_cache(tmp_path, ref):
    prov = MockTextProvider()
    ctx = make_ctx(tmp_path, prov)
    first = enhance_prompt(ctx, "The football quarterback", ref)
    assert first.report.ok and not first.response.cached
    assert first.value.startswith("The football quarterback who is ")
    second = enhance_prompt(ctx, "The football quarterback ", ref)
    assert second.response.cached and second.value == first.value
    assert prov.calls == 1


def test_enhance_prompt_validation_fallback(tmp_path, ref):
    prov = MockTextProvider(lambda r: "The quarterback, a tall man.")
    res = enhance_prompt(make_ctx(tmp_path, prov), "The football quarterback", ref)
    assert res.fallback and res.value == "The football quarterback"
    assert res.report.codes == ["verbatim"]


def test_enhance_prompt_retries_then_fails(tmp_path, ref):
    def boom(r):
        raise ProviderError("down")

    prov = MockTextProvider(boom)
    with pytest.raises(ProviderError) as info:
        enhance_prompt(make_ctx(tmp_path, prov), "A chef cooks", ref)
    assert info.value.attempts == 3 and prov.calls == 3


def test_retry_recovers(tmp_path, ref):
    state = {"n": 0}

    def flaky(r):
        state["n"] += 1
        if state["n"] < 3:
            raise ProviderError("blip")
        return "A chef cooks, a man with a shaved head."

    res = enhance_prompt(make_ctx(tmp_path, MockTextProvider(flaky)), "A chef cooks", ref)
    assert res.attempts == 3 and res.report.ok


def test_derive_ref_prompt(tmp_path):
    ctx = make_ctx(tmp_path)
    res = derive_ref_prompt(ctx, "The lifeguard who is a woman with freckles.")
    assert res.value == "A person shown as the lifeguard who is a woman with freckles."
    bad = derive_ref_prompt(make_ctx(tmp_path / "x", MockTextProvider(lambda r: "One. Two three.")), "T")
    assert bad.value is None and bad.report.codes == ["single_sentence"]


def test_enhance_reference_copy(tmp_path, ref):
    gen = CopyImageGenerator()
    ctx = make_ctx(tmp_path, gen=gen)
    out, prov = enhance_reference(ctx, ref, "A person.", tmp_path / "run")
    assert digest_bytes(out.read_bytes()) == digest_bytes(ref.read_bytes()) == prov["source_digest"] == prov["output_digest"]
    assert prov["timestamp"] == "2024-01-01T00:00:00+00:00" and prov["provider"] == "copy"
    again, prov2 = enhance_reference(ctx, ref, "A person.", tmp_path / "run")
    assert (again, prov2) == (out, prov) and gen.calls == 1


def test_enhance_reference_missing(tmp_path):
    with pytest.raises(UnresolvableReference, match="reference unresolvable"):
        enhance_reference(make_ctx(tmp_path), tmp_path / "nope.png", "A person.", tmp_path)


def _records(tmp_path, n=6):
    recs = []
    for i in range(n):
        p = tmp_path / "refs_in" / f"r{i}.png"
        p.parent.mkdir(exist_ok=True)
        p.write_bytes(f"face {i}".encode())
        recs.append(SampleRecord(f"s{i}", f"A runner number {i} jogs", str(p)))
    return recs


@pytest.mark.parametrize("parallelism", [1, 4])
def test_manifest_idempotent_under_warm_cache(tmp_path, parallelism):
    recs = _records(tmp_path)
    prov, gen = MockTextProvider(), CopyImageGenerator()
    ctx = make_ctx(tmp_path, prov, gen)
    out1 = [o.record for o in enhance_manifest(ctx, recs, tmp_path / "run", parallelism=parallelism)]
    calls = (prov.calls, gen.calls)
    assert calls == (12, 6)
    out2 = [o.record for o in enhance_manifest(ctx, recs, tmp_path / "run", parallelism=parallelism)]
    assert (prov.calls, gen.calls) == calls
    assert [r.to_dict() for r in out1] == [r.to_dict() for r in out2]
    assert [r.sample_id for r in out1] == [r.sample_id for r in recs]


def test_provider_failure_degrades(tmp_path):
    def boom(r):
        raise ProviderError("down")

    recs = _records(tmp_path, 2)
    outs = enhance_manifest(make_ctx(tmp_path, MockTextProvider(boom)), recs, tmp_path / "run")
    for o, r in zip(outs, recs):
        assert o.provider_failures == 1
        assert o.record.enhanced_prompt == r.raw_prompt
        assert o.warnings and "failed" in o.warnings[0]


def test_manifest_roundtrip_and_duplicates(tmp_path):
    recs = _records(tmp_path, 3)
    write_manifest(tmp_path / "m.jsonl", recs, {"schema_version": 1})
    header, back = read_manifest(tmp_path / "m.jsonl")
    assert header["schema_version"] == 1 and [r.to_dict() for r in back] == [r.to_dict() for r in recs]
    write_manifest(tmp_path / "d.jsonl", recs + recs[:1])
    with pytest.raises(EnhancementError, match="duplicate"):
        read_manifest(tmp_path / "d.jsonl")


def test_empty_raw_prompt_rejected():
    with pytest.raises(EnhancementError):
        SampleRecord("s", "  ", "ref")
