"""Prompt and reference-image enhancement over a manifest of samples."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from ..io import read_jsonl, write_jsonl
from .cache import ResponseCache, digest_bytes
from .providers import ImageGenerator, ProviderError, ProviderRequest, ProviderResponse, RetryPolicy, TextProvider, call_with_retry
from .templates import build_ie_instruction, build_pe_instruction
from .validate import ValidationReport, normalize_ws, validate_pe, validate_ref_prompt

log = logging.getLogger(__name__)


class EnhancementError(ValueError):
    pass


class UnresolvableReference(EnhancementError):
    pass


@dataclass
class SampleRecord:
    sample_id: str
    raw_prompt: str
    reference_id: str
    enhanced_prompt: str | None = None
    ref_image_prompt: str | None = None
    enhanced_reference: str | None = None
    text_class: str | None = None
    identity: str | None = None
    provenance: dict[str, Any] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.raw_prompt or not self.raw_prompt.strip():
            raise EnhancementError(f"sample {self.sample_id!r}: raw prompt is empty")

    def to_dict(self) -> dict[str, Any]:
        d = {
            "sample_id": self.sample_id,
            "raw_prompt": self.raw_prompt,
            "reference_id": self.reference_id,
            "enhanced_prompt": self.enhanced_prompt,
            "ref_image_prompt": self.ref_image_prompt,
            "enhanced_reference": self.enhanced_reference,
            "text_class": self.text_class,
            "identity": self.identity,
            "provenance": self.provenance or None,
            "warnings": self.warnings or None,
        }
        return {k: v for k, v in d.items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SampleRecord":
        return cls(
            sample_id=str(d["sample_id"]),
            raw_prompt=d["raw_prompt"],
            reference_id=str(d["reference_id"]),
            enhanced_prompt=d.get("enhanced_prompt"),
            ref_image_prompt=d.get("ref_image_prompt"),
            enhanced_reference=d.get("enhanced_reference"),
            text_class=d.get("text_class"),
            identity=d.get("identity"),
            provenance=dict(d.get("provenance") or {}),
            warnings=list(d.get("warnings") or []),
        )


def read_manifest(path: str | Path) -> tuple[dict[str, Any] | None, list[SampleRecord]]:
    header, rows = read_jsonl(path)
    records = [SampleRecord.from_dict(r) for r in rows]
    seen: set[str] = set()
    for r in records:
        if r.sample_id in seen:
            raise EnhancementError(f"duplicate sample_id {r.sample_id!r} in {path}")
        seen.add(r.sample_id)
    return header, records


def write_manifest(path: str | Path, records: Iterable[SampleRecord], header: dict[str, Any] | None = None) -> None:
    write_jsonl(path, (r.to_dict() for r in records), header)


def resolve_reference(ref: str, base_dir: str | Path | None = None) -> Path:
    p = Path(ref)
    if not p.is_absolute() and base_dir is not None:
        p = Path(base_dir) / p
    if not p.is_file():
        raise UnresolvableReference(f"reference unresolvable: {ref}")
    return p


@dataclass
class Enhancement:
    """Result of one enhancement call; ``value`` is what the sample should use."""

    value: str | None
    response: ProviderResponse | None
    report: ValidationReport
    attempts: int = 0

    @property
    def fallback(self) -> bool:
        return not self.report.ok


@dataclass
class EnhanceContext:
    text_provider: TextProvider
    image_generator: ImageGenerator | None
    cache: ResponseCache
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    blacklist: Sequence[str] | None = None
    meta_blacklist: Sequence[str] | None = None
    strict_verbatim: bool = False
    clock: Callable[[], datetime] = field(default=lambda: datetime.now(timezone.utc))


def _cached_completion(ctx: EnhanceContext, request: ProviderRequest, key: str) -> tuple[ProviderResponse, int]:
    hit = ctx.cache.get(key)
    if hit is not None:
        return ProviderResponse(hit["text"], hit["provider_name"], 0, cached=True), 0
    start = time.perf_counter()
    text, attempts = call_with_retry(
        lambda: ctx.text_provider.complete(request), ctx.retry, f"{request.kind} via {ctx.text_provider.name}"
    )
    latency = int((time.perf_counter() - start) * 1000)
    ctx.cache.put(key, {"text": text, "provider_name": ctx.text_provider.name})
    return ProviderResponse(text, ctx.text_provider.name, latency), attempts


def enhance_prompt(ctx: EnhanceContext, prompt: str, ref_path: str | Path) -> Enhancement:
    """Ask the text model to splice facial attributes into ``prompt``.

    Cached by (normalised prompt, image digest).  Raises :class:`ProviderError`
    once retries are exhausted; a response failing validation comes back with
    ``value`` set to the original prompt.
    """
    try:
        image = Path(ref_path).read_bytes()
    except OSError:
        raise UnresolvableReference(f"reference unresolvable: {ref_path}") from None
    prompt = prompt.strip()
    request = ProviderRequest("PE", build_pe_instruction(prompt), prompt, image)
    key = ResponseCache.key(kind="PE", prompt=normalize_ws(prompt), image=digest_bytes(image))
    response, attempts = _cached_completion(ctx, request, key)
    report = validate_pe(prompt, response.text, ctx.blacklist, strict=ctx.strict_verbatim)
    value = normalize_ws(response.text) if report.ok else prompt
    return Enhancement(value, response, report, attempts)


def derive_ref_prompt(ctx: EnhanceContext, enhanced_prompt: str) -> Enhancement:
    """One-sentence prompt for regenerating the reference image; ``value`` is None if invalid."""
    enhanced_prompt = enhanced_prompt.strip()
    request = ProviderRequest("IE", build_ie_instruction(enhanced_prompt), enhanced_prompt)
    key = ResponseCache.key(kind="IE", prompt=normalize_ws(enhanced_prompt))
    response, attempts = _cached_completion(ctx, request, key)
    report = validate_ref_prompt(response.text, ctx.meta_blacklist)
    return Enhancement(normalize_ws(response.text) if report.ok else None, response, report, attempts)


def enhance_reference(
    ctx: EnhanceContext, ref_path: str | Path, ref_prompt: str, out_dir: str | Path
) -> tuple[Path, dict[str, Any]]:
    """Regenerate the reference image and return ``(new_path, provenance)``.

    Outputs are content-addressed under ``out_dir``.  The generator result and
    its timestamp are cached, so a warm rerun reproduces the same provenance.
    """
    if ctx.image_generator is None:
        raise EnhancementError("no image generator configured")
    try:
        source = Path(ref_path).read_bytes()
    except OSError:
        raise UnresolvableReference(f"reference unresolvable: {ref_path}") from None
    src_digest = digest_bytes(source)
    suffix = Path(ref_path).suffix
    gen = ctx.image_generator
    key = ResponseCache.key(kind="IMG", source=src_digest, prompt=ref_prompt, provider=gen.name)
    entry = ctx.cache.get(key)
    if entry is None:
        out, _ = call_with_retry(lambda: gen.generate(source, ref_prompt), ctx.retry, f"image via {gen.name}")
        out_digest = digest_bytes(out)
        blob = ctx.cache.blob_path(out_digest, suffix)
        if not blob.exists():
            blob.parent.mkdir(parents=True, exist_ok=True)
            blob.write_bytes(out)
        entry = {
            "output_digest": out_digest,
            "suffix": suffix,
            "provider": gen.name,
            "timestamp": ctx.clock().isoformat(),
        }
        ctx.cache.put(key, entry)
    data = ctx.cache.blob_path(entry["output_digest"], entry["suffix"]).read_bytes()
    dest = Path(out_dir) / "refs" / f"{entry['output_digest']}{entry['suffix']}"
    if not dest.exists():
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_bytes(data)
    provenance = {
        "source_digest": src_digest,
        "output_digest": entry["output_digest"],
        "ref_prompt": ref_prompt,
        "provider": entry["provider"],
        "timestamp": entry["timestamp"],
    }
    return dest, provenance


@dataclass
class RecordOutcome:
    record: SampleRecord
    provider_failures: int = 0

    @property
    def warnings(self) -> list[str]:
        return self.record.warnings


def enhance_record(
    ctx: EnhanceContext, record: SampleRecord, out_dir: str | Path, base_dir: str | Path | None = None
) -> RecordOutcome:
    """Run prompt, reference-prompt and reference-image enhancement for one sample.

    Failures degrade instead of aborting: the sample keeps its raw prompt (and
    original reference) and gains a warning.
    """
    rec = replace(record, warnings=[], provenance={})
    failures = 0
    ref = resolve_reference(rec.reference_id, base_dir)
    try:
        pe = enhance_prompt(ctx, rec.raw_prompt, ref)
        rec.enhanced_prompt = pe.value
        if pe.fallback:
            rec.warnings.append("prompt enhancement rejected: " + "; ".join(i.message for i in pe.report.issues))
    except ProviderError as exc:
        failures += 1
        rec.enhanced_prompt = rec.raw_prompt.strip()
        rec.warnings.append(f"prompt enhancement failed: {exc}")
        return RecordOutcome(rec, failures)
    try:
        ie = derive_ref_prompt(ctx, rec.enhanced_prompt)
    except ProviderError as exc:
        failures += 1
        rec.warnings.append(f"reference prompt failed: {exc}")
        return RecordOutcome(rec, failures)
    if ie.value is None:
        rec.warnings.append("reference prompt rejected: " + "; ".join(i.message for i in ie.report.issues))
        return RecordOutcome(rec, failures)
    rec.ref_image_prompt = ie.value
    if ctx.image_generator is not None:
        try:
            path, prov = enhance_reference(ctx, ref, ie.value, out_dir)
        except ProviderError as exc:
            failures += 1
            rec.warnings.append(f"reference image failed: {exc}")
            return RecordOutcome(rec, failures)
        rec.enhanced_reference = str(Path(path).relative_to(out_dir)) if Path(path).is_relative_to(out_dir) else str(path)
        rec.provenance = prov
    return RecordOutcome(rec, failures)


def enhance_manifest(
    ctx: EnhanceContext,
    records: Sequence[SampleRecord],
    out_dir: str | Path,
    base_dir: str | Path | None = None,
    parallelism: int = 1,
) -> list[RecordOutcome]:
    """Enhance every record, up to ``parallelism`` samples at a time; output keeps input order."""
    if parallelism <= 1:
        return [enhance_record(ctx, r, out_dir, base_dir) for r in records]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(lambda r: enhance_record(ctx, r, out_dir, base_dir), records))
