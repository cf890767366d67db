import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from idguide.guidance import (
    AnalyticDenoiser,
    DecaySchedule,
    DegradationSpec,
    GuidanceConfig,
    PassStackDenoiser,
    cfg_sample_batch,
    combine_cfg,
    combine_tpige,
    effective_wi,
    guided_sample,
    guided_sample_batch,
    make_weak_denoiser,
)
from idguide.testbed import (
    ConditionSet,
    MixtureWorld,
    Mode,
    NoisySample,
    ParameterError,
    analytic_epsilon,
    make_schedule,
    symmetric_identity_world,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)
vec = arrays(np.float64, 3, elements=finite)
weight = st.floats(0, 20, allow_nan=False)


def explicit_score(x, t, cond, world, sched, temperature=1.0):
    """Component-by-component closed form, independent of the vectorised implementation."""
    ab = sched.alpha_bar[t]
    logs, grads = [], []
    for m, w in zip(world.modes, world.prior):
        if cond.text_class not in (None, m.text_class) or cond.identity not in (None, m.identity):
            continue
        mu = math.sqrt(ab) * m.mean
        v = ab * m.std**2 * temperature + (1 - ab)
        d = x - mu
        logs.append(math.log(w) - 0.5 * d @ d / v - 0.5 * world.dim * math.log(2 * math.pi * v))
        grads.append(-d / v)
    logs = np.array(logs)
    r = np.exp(logs - logs.max())
    r /= r.sum()
    return sum(ri * g for ri, g in zip(r, grads))


# -- combiners ---------------------------------------------------------------


def test_cfg_hand_value():
    np.testing.assert_array_equal(combine_cfg(np.array([1.0, 2.0]), np.array([0.5, 1.0]), 2.0), [2.0, 4.0])


def test_tpige_hand_value():
    out = combine_tpige(np.array([1.0]), np.array([0.0]), np.array([0.5]), 1.0, 2.0)
    # 1 + 1*(1-0) + 2*(1-0.5)
    np.testing.assert_array_equal(out, [3.0])


def test_tpige_zero_weights_returns_full():
    e = np.array([0.3, -0.7])
    np.testing.assert_array_equal(combine_tpige(e, np.zeros(2), np.ones(2), 0.0, 0.0), e)


@given(vec, vec, vec, weight)
def test_reduction_to_cfg_is_bitwise(a, b, c, w_c):
    assert np.array_equal(combine_tpige(a, b, c, w_c, 0.0), combine_cfg(a, b, w_c))


@given(vec, vec, vec, weight, weight, st.floats(-10, 10, allow_nan=False))
def test_tpige_scales_linearly(a, b, c, w_c, w_i, lam):
    out = combine_tpige(lam * a, lam * b, lam * c, w_c, w_i)
    ref = lam * combine_tpige(a, b, c, w_c, w_i)
    scale = (1 + w_c + w_i) * max(1.0, abs(lam)) * max(1.0, float(np.abs([a, b, c]).max()))
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12 * scale)


def test_negative_weights_rejected():
    z = np.zeros(2)
    with pytest.raises(ParameterError):
        combine_tpige(z, z, z, -1.0, 0.0)
    with pytest.raises(ParameterError):
        combine_tpige(z, z, z, 1.0, -0.1)


def test_shape_mismatch_rejected():
    with pytest.raises(ParameterError):
        combine_tpige(np.zeros(2), np.zeros(2), np.zeros(3), 1.0, 1.0)


# -- weak denoiser -----------------------------------------------------------


def test_weak_default_equals_identity_dropped_epsilon():
    world, sched = symmetric_identity_world(), make_schedule()
    weak = make_weak_denoiser(AnalyticDenoiser(world, sched), DegradationSpec())
    s = NoisySample(np.array([0.3, 0.8]), 12)
    cond = ConditionSet("run", "A")
    np.testing.assert_array_equal(weak(s, cond), analytic_epsilon(s, ConditionSet("run", None), world, sched))


@given(arrays(np.float64, 2, elements=st.floats(-4, 4)), st.integers(0, 49), st.sampled_from(["run", "swim", None]))
def test_weak_is_identity_agnostic(x, t, text):
    world, sched = symmetric_identity_world(), make_schedule()
    weak = make_weak_denoiser(AnalyticDenoiser(world, sched), DegradationSpec(temperature=1.5))
    s = NoisySample(x, t)
    assert np.array_equal(weak(s, ConditionSet(text, "A")), weak(s, ConditionSet(text, "B")))


def test_tempered_weak_score_is_smaller_off_mode():
    world = MixtureWorld(
        2,
        (Mode("t", "A", np.array([1.0, 0.0]), 0.3), Mode("t", "B", np.array([-1.0, 0.0]), 0.3)),
        np.array([0.5, 0.5]),
    )
    sched = make_schedule()
    base = AnalyticDenoiser(world, sched)
    x, t = np.array([2.0, 1.5]), 5
    s = NoisySample(x, t)
    cond = ConditionSet("t", "A")
    hot = make_weak_denoiser(base, DegradationSpec(temperature=1.5))(s, cond)
    cold = make_weak_denoiser(base, DegradationSpec(temperature=1.0))(s, cond)
    assert np.linalg.norm(hot) < np.linalg.norm(cold)
    # closed-form check of the tempered branch
    np.testing.assert_allclose(hot, -sched.sigma[t] * explicit_score(x, t, ConditionSet("t"), world, sched, 1.5), atol=1e-12)


def test_weak_rejects_bad_skip_index():
    stack = PassStackDenoiser([("a", lambda s, c: np.ones(2)), ("b", lambda s, c: np.ones(2))])
    with pytest.raises(ParameterError):
        make_weak_denoiser(stack, DegradationSpec(skip_layers=frozenset({2})))


def test_pass_stack_skips_listed_passes():
    seen = []

    def identity_pass(s, c):
        seen.append(c.identity)
        return np.full(2, 10.0)

    stack = PassStackDenoiser([("base", lambda s, c: np.ones(2)), ("refine", identity_pass)])
    weak = make_weak_denoiser(stack, DegradationSpec(skip_layers=frozenset({1})))
    s = NoisySample(np.zeros(2), 0)
    np.testing.assert_array_equal(weak(s, ConditionSet("t", "A")), [1.0, 1.0])
    np.testing.assert_array_equal(stack(s, ConditionSet("t", "A")), [11.0, 11.0])
    assert seen == ["A"]


def test_temperature_needs_analytic_base():
    stack = PassStackDenoiser([("base", lambda s, c: np.ones(2))])
    with pytest.raises(ParameterError):
        make_weak_denoiser(stack, DegradationSpec(temperature=2.0))


# -- gradient identity -------------------------------------------------------


def test_strong_minus_weak_is_scaled_score_difference():
    world, sched = symmetric_identity_world(), make_schedule()
    base = AnalyticDenoiser(world, sched)
    weak = make_weak_denoiser(base, DegradationSpec(temperature=1.5))
    rng = np.random.default_rng(7)
    for _ in range(100):
        t = int(rng.integers(sched.steps))
        x = rng.uniform(-3, 3, 2)
        cond = ConditionSet(str(rng.choice(["run", "swim"])), str(rng.choice(["A", "B"])))
        s = NoisySample(x, t)
        diff = base(s, cond) - weak(s, cond)
        ref = -sched.sigma[t] * (
            explicit_score(x, t, cond, world, sched) - explicit_score(x, t, cond.without_identity(), world, sched, 1.5)
        )
        assert np.linalg.norm(diff - ref) <= 1e-8 * max(np.linalg.norm(ref), 1e-300)


# -- decay -------------------------------------------------------------------


def test_constant_decay():
    cfg = GuidanceConfig(w_i=1.7)
    assert all(effective_wi(cfg, t, 10) == 1.7 for t in range(10))


def test_linear_decay_start_and_midpoint():
    cfg = GuidanceConfig(w_i=2.0, decay=DecaySchedule("linear-to-zero"))
    assert effective_wi(cfg, 4, 5) == 2.0
    assert effective_wi(cfg, 2, 5) == 1.0
    assert effective_wi(cfg, 0, 5) == 0.0


def test_cosine_decay_endpoints():
    cfg = GuidanceConfig(w_i=1.0, decay=DecaySchedule("cosine-to-zero"))
    assert effective_wi(cfg, 10, 11) == 1.0
    assert effective_wi(cfg, 5, 11) == pytest.approx(0.5, abs=1e-15)
    assert effective_wi(cfg, 0, 11) == pytest.approx(0.0, abs=1e-15)


@given(st.sampled_from(["linear-to-zero", "cosine-to-zero"]), st.integers(2, 200), weight)
def test_decay_non_increasing_in_progress(mode, steps, w_i):
    cfg = GuidanceConfig(w_i=w_i, decay=DecaySchedule(mode))
    vals = [effective_wi(cfg, t, steps) for t in range(steps - 1, -1, -1)]
    assert vals[0] == w_i
    assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))


def test_unknown_decay_mode():
    with pytest.raises(ParameterError):
        DecaySchedule("exponential")


# -- config ------------------------------------------------------------------


def test_config_json_roundtrip():
    cfg = GuidanceConfig(2.0, 0.5, DecaySchedule("cosine-to-zero"), DegradationSpec(True, frozenset({0, 2}), 1.25))
    d = json.loads(json.dumps(cfg.to_dict()))
    assert set(d) == {"w_c", "w_i", "decay", "degradation"}
    assert set(d["degradation"]) == {"drop_identity", "skip_layers", "temperature"}
    assert GuidanceConfig.from_dict(d) == cfg


def test_config_defaults():
    cfg = GuidanceConfig()
    assert (cfg.w_c, cfg.w_i, cfg.decay.mode) == (5.0, 1.0, "constant")


@pytest.mark.parametrize("bad", [{"w_c": -1}, {"w_i": float("nan")}, {"w_i": float("inf")}])
def test_config_rejects_bad_weights(bad):
    with pytest.raises(ParameterError):
        GuidanceConfig.from_dict(bad)


# -- sampling ----------------------------------------------------------------


def test_guidance_off_matches_conditional_sampling():
    world, sched = symmetric_identity_world(), make_schedule(20)
    den = AnalyticDenoiser(world, sched)
    cond = ConditionSet("run", "A")
    seeds = list(range(8))
    guided = guided_sample_batch(den, cond, GuidanceConfig(0.0, 0.0), sched, seeds, 2).final
    np.testing.assert_array_equal(guided, cfg_sample_batch(den, cond, 0.0, sched, seeds, 2))


@pytest.mark.parametrize("w_c", [0.5, 1.0, 4.0])
def test_wi_zero_matches_plain_cfg(w_c):
    world, sched = symmetric_identity_world(), make_schedule(20)
    den = AnalyticDenoiser(world, sched)
    cond = ConditionSet("swim", "B")
    seeds = [3, 11, 42]
    guided = guided_sample_batch(den, cond, GuidanceConfig(w_c, 0.0), sched, seeds, 2).final
    np.testing.assert_array_equal(guided, cfg_sample_batch(den, cond, w_c, sched, seeds, 2))


def test_single_sample_matches_batch_member():
    world, sched = symmetric_identity_world(), make_schedule(15)
    den = AnalyticDenoiser(world, sched)
    cond = ConditionSet("run", "B")
    cfg = GuidanceConfig(1.0, 1.0)
    single = guided_sample(den, cond, cfg, sched, 5, 2)
    batch = guided_sample_batch(den, cond, cfg, sched, [4, 5, 6], 2)
    np.testing.assert_array_equal(single.final, batch.final[1])


def test_trace_records_every_step():
    world, sched = symmetric_identity_world(), make_schedule(12)
    den = AnalyticDenoiser(world, sched)
    cfg = GuidanceConfig(1.0, 2.0, DecaySchedule("linear-to-zero"))
    res = guided_sample(den, ConditionSet("run", "A"), cfg, sched, 0, 2)
    assert [s.t for s in res.trace] == list(range(11, -1, -1))
    for s in res.trace:
        expected = combine_tpige(s.eps_full, s.eps_no_text, s.eps_weak, cfg.w_c, effective_wi(cfg, s.t, 12))
        np.testing.assert_array_equal(s.eps_guided, expected)
    lines = list(res.trace_jsonl())
    assert len(lines) == 12
    assert set(json.loads(lines[0])) == {"t", "w_i", "x", "eps_full", "eps_no_text", "eps_weak", "eps_guided"}


def test_sampling_is_deterministic():
    world, sched = symmetric_identity_world(), make_schedule(10)
    den = AnalyticDenoiser(world, sched)
    a = guided_sample(den, ConditionSet("run", "A"), GuidanceConfig(1.0, 1.0), sched, 9, 2)
    b = guided_sample(den, ConditionSet("run", "A"), GuidanceConfig(1.0, 1.0), sched, 9, 2)
    np.testing.assert_array_equal(a.final, b.final)


def test_sampling_requires_identity():
    world, sched = symmetric_identity_world(), make_schedule(5)
    with pytest.raises(ParameterError):
        guided_sample(AnalyticDenoiser(world, sched), ConditionSet("run"), GuidanceConfig(), sched, 0, 2)
