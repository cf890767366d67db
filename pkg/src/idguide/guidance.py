"""Identity-aware guidance on top of classifier-free guidance.

The guided prediction mixes three network evaluations per step::

    eps = e_full + w_c * (e_full - e_no_text) + w_i * (e_full - e_weak)

``e_full`` sees text and identity, ``e_no_text`` drops the text but keeps the
identity, and ``e_weak`` comes from a degraded copy of the denoiser that never
sees the identity and skips some of its refinement passes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Iterator, Mapping, Protocol, Sequence

import numpy as np

from .testbed import (
    ConditionSet,
    MixtureWorld,
    NoisySample,
    ParameterError,
    TimestepSchedule,
    analytic_epsilon,
    ancestral_step,
)

DECAY_MODES = ("constant", "linear-to-zero", "cosine-to-zero")


@dataclass(frozen=True)
class DecaySchedule:
    mode: str = "constant"

    def __post_init__(self) -> None:
        if self.mode not in DECAY_MODES:
            raise ParameterError(f"unknown decay mode {self.mode!r}; expected one of {DECAY_MODES}")

    def multiplier(self, progress: float) -> float:
        """Weight multiplier at sampling progress in [0, 1] (0 = noisiest step)."""
        p = min(max(progress, 0.0), 1.0)
        if self.mode == "constant":
            return 1.0
        if self.mode == "linear-to-zero":
            return 1.0 - p
        return 0.5 * (1.0 + math.cos(math.pi * p))


@dataclass(frozen=True)
class DegradationSpec:
    drop_identity: bool = True
    skip_layers: frozenset[int] = frozenset()
    temperature: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "skip_layers", frozenset(int(i) for i in self.skip_layers))
        if not self.temperature >= 1:
            raise ParameterError("degradation temperature must be >= 1")


@dataclass(frozen=True)
class GuidanceConfig:
    w_c: float = 5.0
    w_i: float = 1.0
    decay: DecaySchedule = field(default_factory=DecaySchedule)
    degradation: DegradationSpec = field(default_factory=DegradationSpec)

    def __post_init__(self) -> None:
        for name in ("w_c", "w_i"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ParameterError(f"{name} must be finite and >= 0, got {v}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "w_c": self.w_c,
            "w_i": self.w_i,
            "decay": {"mode": self.decay.mode},
            "degradation": {
                "drop_identity": self.degradation.drop_identity,
                "skip_layers": sorted(self.degradation.skip_layers),
                "temperature": self.degradation.temperature,
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "GuidanceConfig":
        deg = d.get("degradation", {})
        return cls(
            w_c=float(d.get("w_c", 5.0)),
            w_i=float(d.get("w_i", 1.0)),
            decay=DecaySchedule(d.get("decay", {}).get("mode", "constant")),
            degradation=DegradationSpec(
                drop_identity=bool(deg.get("drop_identity", True)),
                skip_layers=frozenset(deg.get("skip_layers", ())),
                temperature=float(deg.get("temperature", 1.0)),
            ),
        )


class Denoiser(Protocol):
    """Anything mapping (noisy sample, conditions) to a noise prediction.

    ``passes`` names the refinement passes that a degraded copy may skip.
    """

    passes: Sequence[str]

    def __call__(self, sample: NoisySample, cond: ConditionSet, *, skip: frozenset[int] = frozenset()) -> np.ndarray: ...


class AnalyticDenoiser:
    """Exact mixture predictor; its only degradation knob is ``temperature``."""

    passes: Sequence[str] = ()

    def __init__(self, world: MixtureWorld, sched: TimestepSchedule, temperature: float = 1.0):
        self.world = world
        self.sched = sched
        self.temperature = temperature

    def tempered(self, temperature: float) -> "AnalyticDenoiser":
        return AnalyticDenoiser(self.world, self.sched, self.temperature * temperature)

    def __call__(self, sample: NoisySample, cond: ConditionSet, *, skip: frozenset[int] = frozenset()) -> np.ndarray:
        if skip:
            raise ParameterError("analytic denoiser has no skippable passes")
        return analytic_epsilon(sample, cond, self.world, self.sched, self.temperature)


class PassStackDenoiser:
    """Prediction built as a sum of named passes; skipped passes contribute nothing."""

    def __init__(self, passes: Sequence[tuple[str, Callable[[NoisySample, ConditionSet], np.ndarray]]]):
        self._fns = [fn for _, fn in passes]
        self.passes = tuple(name for name, _ in passes)

    def __call__(self, sample: NoisySample, cond: ConditionSet, *, skip: frozenset[int] = frozenset()) -> np.ndarray:
        bad = [i for i in skip if not 0 <= i < len(self._fns)]
        if bad:
            raise ParameterError(f"invalid skip index {bad}")
        out = np.zeros_like(np.asarray(sample.x, dtype=float))
        for i, fn in enumerate(self._fns):
            if i not in skip:
                out = out + fn(sample, cond)
        return out


class WeakDenoiser:
    """Identity-agnostic, degraded view of another denoiser."""

    def __init__(self, base: Denoiser, spec: DegradationSpec):
        n = len(base.passes)
        bad = sorted(i for i in spec.skip_layers if not 0 <= i < n)
        if bad:
            raise ParameterError(f"invalid skip index {bad}; denoiser exposes {n} passes")
        if spec.temperature != 1.0:
            if not hasattr(base, "tempered"):
                raise ParameterError("base denoiser does not support temperature degradation")
            base = base.tempered(spec.temperature)
        self.base = base
        self.spec = spec
        self.passes = tuple(p for i, p in enumerate(base.passes) if i not in spec.skip_layers)

    def __call__(self, sample: NoisySample, cond: ConditionSet, *, skip: frozenset[int] = frozenset()) -> np.ndarray:
        # the weak branch never sees the identity, even with drop_identity=False
        return self.base(sample, cond.without_identity(), skip=self.spec.skip_layers | skip)


def make_weak_denoiser(base: Denoiser, spec: DegradationSpec) -> WeakDenoiser:
    return WeakDenoiser(base, spec)


def _check_same_shape(*arrays: np.ndarray) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ParameterError(f"dimension mismatch: {sorted(shapes)}")


def combine_cfg(eps_cond: np.ndarray, eps_uncond_text: np.ndarray, w_c: float) -> np.ndarray:
    eps_cond = np.asarray(eps_cond, dtype=float)
    eps_uncond_text = np.asarray(eps_uncond_text, dtype=float)
    _check_same_shape(eps_cond, eps_uncond_text)
    return eps_cond + w_c * (eps_cond - eps_uncond_text)


def combine_tpige(
    eps_full: np.ndarray,
    eps_no_text: np.ndarray,
    eps_weak: np.ndarray,
    w_c: float,
    w_i_effective: float,
) -> np.ndarray:
    """CFG plus the identity term ``w_i * (eps_full - eps_weak)``.

    With ``w_i_effective == 0`` the result is exactly :func:`combine_cfg`.
    """
    if w_c < 0 or w_i_effective < 0:
        raise ParameterError("guidance weights must be >= 0")
    eps_weak = np.asarray(eps_weak, dtype=float)
    out = combine_cfg(eps_full, eps_no_text, w_c)
    _check_same_shape(out, eps_weak)
    if w_i_effective == 0:
        return out
    return out + w_i_effective * (np.asarray(eps_full, dtype=float) - eps_weak)


def effective_wi(config: GuidanceConfig, t: int, steps: int) -> float:
    progress = 1.0 - t / (steps - 1) if steps > 1 else 0.0
    return config.w_i * config.decay.multiplier(progress)


@dataclass
class StepTrace:
    t: int
    w_i: float
    x: np.ndarray
    eps_full: np.ndarray
    eps_no_text: np.ndarray
    eps_weak: np.ndarray
    eps_guided: np.ndarray

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}


@dataclass
class GuidedResult:
    final: np.ndarray
    trace: list[StepTrace]

    def trace_jsonl(self) -> Iterator[str]:
        for step in self.trace:
            yield json.dumps(step.to_dict(), sort_keys=True)


def trajectory_noise(seeds: Sequence[int], steps: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Initial states and per-step noise, each trajectory drawn from its own seed.

    Returns ``(x_T, noise)`` with shapes ``(n, dim)`` and ``(steps, n, dim)``;
    ``noise[t]`` is consumed by the step leaving timestep ``t``.
    """
    init = np.empty((len(seeds), dim))
    noise = np.empty((steps, len(seeds), dim))
    for j, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        init[j] = rng.standard_normal(dim)
        noise[:, j, :] = rng.standard_normal((steps, dim))
    return init, noise


def guided_sample_batch(
    denoiser: Denoiser,
    cond: ConditionSet,
    config: GuidanceConfig,
    sched: TimestepSchedule,
    seeds: Sequence[int],
    dim: int,
    *,
    record_trace: bool = False,
) -> GuidedResult:
    """Guided ancestral sampling of one trajectory per seed, vectorised over the batch."""
    if cond.identity is None:
        raise ParameterError("guided sampling needs an identity condition")
    weak = make_weak_denoiser(denoiser, config.degradation)
    x, noise = trajectory_noise(seeds, sched.steps, dim)
    trace: list[StepTrace] = []
    no_text = cond.without_text()
    for t in range(sched.steps - 1, -1, -1):
        sample = NoisySample(x, t)
        e_full = denoiser(sample, cond)
        e_no_text = denoiser(sample, no_text)
        e_weak = weak(sample, cond)
        w_i = effective_wi(config, t, sched.steps)
        e = combine_tpige(e_full, e_no_text, e_weak, config.w_c, w_i)
        if record_trace:
            trace.append(StepTrace(t, w_i, x, e_full, e_no_text, e_weak, e))
        x = ancestral_step(sample, e, sched, noise[t]).x
    return GuidedResult(x, trace)


def guided_sample(
    denoiser: Denoiser,
    cond: ConditionSet,
    config: GuidanceConfig,
    sched: TimestepSchedule,
    seed: int,
    dim: int,
) -> GuidedResult:
    """Single-trajectory guided sampling; the trace holds every branch prediction."""
    res = guided_sample_batch(denoiser, cond, config, sched, [seed], dim, record_trace=True)
    for st in res.trace:
        st.x, st.eps_full, st.eps_no_text = st.x[0], st.eps_full[0], st.eps_no_text[0]
        st.eps_weak, st.eps_guided = st.eps_weak[0], st.eps_guided[0]
    return GuidedResult(res.final[0], res.trace)


def cfg_sample_batch(
    denoiser: Denoiser,
    cond: ConditionSet,
    w_c: float,
    sched: TimestepSchedule,
    seeds: Sequence[int],
    dim: int,
) -> np.ndarray:
    """Plain CFG sampler (text dropped for the negative branch), same noise stream as the guided one."""
    x, noise = trajectory_noise(seeds, sched.steps, dim)
    for t in range(sched.steps - 1, -1, -1):
        sample = NoisySample(x, t)
        e = combine_cfg(denoiser(sample, cond), denoiser(sample, cond.without_text()), w_c)
        x = ancestral_step(sample, e, sched, noise[t]).x
    return x
