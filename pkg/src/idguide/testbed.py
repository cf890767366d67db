"""Analytic conditional diffusion over isotropic Gaussian mixtures.

Every mode of a :class:`MixtureWorld` carries a text-class label and an
identity label.  Because Gaussians stay Gaussian under the variance-preserving
forward process, the noised conditional density ``p_t(x | cond)`` is again a
mixture and its score is available in closed form.  That gives exact
epsilon-predictors (conditional, unconditional and degraded) to drive the
guidance code without any trained network.

Sampling is ancestral DDPM.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp


class ParameterError(ValueError):
    """Invalid numeric parameter or shape."""


class ConditionError(ValueError):
    """A condition label that the world does not know about."""


@dataclass(frozen=True)
class Mode:
    text_class: str
    identity: str
    mean: np.ndarray
    std: float


@dataclass(frozen=True)
class MixtureWorld:
    """Low-dimensional stand-in for a conditional data distribution."""

    dim: int
    modes: tuple[Mode, ...]
    prior: np.ndarray

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ParameterError("dim must be positive")
        if not self.modes:
            raise ParameterError("world needs at least one mode")
        prior = np.asarray(self.prior, dtype=float)
        if prior.shape != (len(self.modes),):
            raise ParameterError("prior must have one weight per mode")
        if np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-12:
            raise ParameterError("prior weights must be nonnegative and sum to 1")
        seen = set()
        for m in self.modes:
            if np.shape(m.mean) != (self.dim,):
                raise ParameterError(f"mode ({m.text_class}, {m.identity}) mean has wrong dimension")
            if not m.std > 0:
                raise ParameterError("mode std must be strictly positive")
            key = (m.text_class, m.identity)
            if key in seen:
                raise ParameterError(f"duplicate mode {key}")
            seen.add(key)
        object.__setattr__(self, "prior", prior)

    @property
    def means(self) -> np.ndarray:
        return np.stack([m.mean for m in self.modes])

    @property
    def stds(self) -> np.ndarray:
        return np.array([m.std for m in self.modes])

    @property
    def text_classes(self) -> list[str]:
        return sorted({m.text_class for m in self.modes})

    @property
    def identities(self) -> list[str]:
        return sorted({m.identity for m in self.modes})

    def mode_mask(self, cond: "ConditionSet") -> np.ndarray:
        """Boolean mask of modes compatible with every non-empty label of ``cond``."""
        if cond.text_class is not None and cond.text_class not in self.text_classes:
            raise ConditionError(f"unknown text class {cond.text_class!r}")
        if cond.identity is not None and cond.identity not in self.identities:
            raise ConditionError(f"unknown identity {cond.identity!r}")
        mask = np.array(
            [
                (cond.text_class is None or m.text_class == cond.text_class)
                and (cond.identity is None or m.identity == cond.identity)
                for m in self.modes
            ]
        )
        if not mask.any():
            raise ConditionError(f"no mode matches {cond}")
        return mask

    def to_dict(self) -> dict[str, Any]:
        return {
            "dim": self.dim,
            "modes": [
                {
                    "text_class": m.text_class,
                    "identity": m.identity,
                    "mean": [float(v) for v in m.mean],
                    "std": float(m.std),
                }
                for m in self.modes
            ],
            "prior": [float(p) for p in self.prior],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MixtureWorld":
        modes = tuple(
            Mode(
                text_class=str(m["text_class"]),
                identity=str(m["identity"]),
                mean=np.asarray(m["mean"], dtype=float),
                std=float(m["std"]),
            )
            for m in d["modes"]
        )
        prior = d.get("prior")
        if prior is None:
            prior = np.full(len(modes), 1.0 / len(modes))
        return cls(dim=int(d.get("dim", 2)), modes=modes, prior=np.asarray(prior, dtype=float))


@dataclass(frozen=True)
class TimestepSchedule:
    betas: np.ndarray
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        betas = np.asarray(self.betas, dtype=float)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - betas))

    @property
    def steps(self) -> int:
        return len(self.betas)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar)

    def check_t(self, t: int) -> None:
        if not 0 <= t < self.steps:
            raise ParameterError(f"timestep {t} outside [0, {self.steps})")


@dataclass(frozen=True)
class NoisySample:
    """State ``x_t`` at timestep index ``t``; ``x`` may be a batch of shape (n, dim)."""

    x: np.ndarray
    t: int


@dataclass(frozen=True)
class ConditionSet:
    text_class: str | None = None
    identity: str | None = None

    def without_identity(self) -> "ConditionSet":
        return ConditionSet(self.text_class, None)

    def without_text(self) -> "ConditionSet":
        return ConditionSet(None, self.identity)


def make_schedule(steps: int = 50, beta_min: float = 1e-4, beta_max: float = 0.02) -> TimestepSchedule:
    """Linear-beta variance-preserving schedule with ``alpha_bar_t = prod_{s<=t} (1 - beta_s)``."""
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    if not 0 < beta_min <= beta_max < 1:
        raise ParameterError("need 0 < beta_min <= beta_max < 1")
    return TimestepSchedule(np.linspace(beta_min, beta_max, steps))


def schedule_to_dict(sched: TimestepSchedule, beta_min: float, beta_max: float) -> dict[str, Any]:
    return {"steps": sched.steps, "beta_min": beta_min, "beta_max": beta_max}


def load_testbed(d: Mapping[str, Any]) -> tuple[MixtureWorld, TimestepSchedule]:
    """Build world and schedule from one JSON config (keys dim, modes, prior, steps, beta_min, beta_max)."""
    world = MixtureWorld.from_dict(d)
    sched = make_schedule(int(d.get("steps", 50)), float(d.get("beta_min", 1e-4)), float(d.get("beta_max", 0.02)))
    return world, sched


def _as_batch(x: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != dim:
        raise ParameterError(f"expected vectors of dimension {dim}, got shape {x.shape}")
    return xb, single


def forward_noise(x0: np.ndarray, t: int, noise: np.ndarray, sched: TimestepSchedule) -> NoisySample:
    x0 = np.asarray(x0, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if x0.shape != noise.shape:
        raise ParameterError(f"dimension mismatch: x0 {x0.shape} vs noise {noise.shape}")
    sched.check_t(t)
    return NoisySample(np.sqrt(sched.alpha_bar[t]) * x0 + sched.sigma[t] * noise, t)


def _noised_components(
    world: MixtureWorld, sched: TimestepSchedule, t: int, cond: ConditionSet, temperature: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if temperature < 1:
        raise ParameterError("temperature must be >= 1")
    sched.check_t(t)
    mask = world.mode_mask(cond)
    ab = sched.alpha_bar[t]
    means = np.sqrt(ab) * world.means[mask]
    variances = ab * world.stds[mask] ** 2 * temperature + (1.0 - ab)
    with np.errstate(divide="ignore"):
        log_w = np.log(world.prior[mask])
    return means, variances, log_w - logsumexp(log_w)


def _component_log_joint(xb: np.ndarray, means: np.ndarray, variances: np.ndarray, log_w: np.ndarray) -> np.ndarray:
    dim = xb.shape[1]
    sq = ((xb[:, None, :] - means[None, :, :]) ** 2).sum(axis=-1)
    return log_w[None, :] - 0.5 * sq / variances[None, :] - 0.5 * dim * np.log(2 * np.pi * variances)[None, :]


def log_density(
    x: np.ndarray,
    t: int,
    cond: ConditionSet,
    world: MixtureWorld,
    sched: TimestepSchedule,
    temperature: float = 1.0,
) -> np.ndarray | float:
    """``log p_t(x | cond)`` of the noised, condition-restricted mixture."""
    xb, single = _as_batch(x, world.dim)
    means, variances, log_w = _noised_components(world, sched, t, cond, temperature)
    out = logsumexp(_component_log_joint(xb, means, variances, log_w), axis=1)
    return float(out[0]) if single else out


def score(
    x: np.ndarray,
    t: int,
    cond: ConditionSet,
    world: MixtureWorld,
    sched: TimestepSchedule,
    temperature: float = 1.0,
) -> np.ndarray:
    """Exact ``grad_x log p_t(x | cond)``: responsibility-weighted ``(m_k - x) / v_k``."""
    xb, single = _as_batch(x, world.dim)
    means, variances, log_w = _noised_components(world, sched, t, cond, temperature)
    lj = _component_log_joint(xb, means, variances, log_w)
    resp = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    pulls = (means[None, :, :] - xb[:, None, :]) / variances[None, :, None]
    out = np.einsum("nk,nkd->nd", resp, pulls)
    return out[0] if single else out


def analytic_epsilon(
    sample: NoisySample,
    cond: ConditionSet,
    world: MixtureWorld,
    sched: TimestepSchedule,
    temperature: float = 1.0,
) -> np.ndarray:
    """Optimal noise prediction ``-sigma_t * score``.

    ``temperature`` inflates the clean-data variance of every component, which is
    how the testbed models a blurrier, degraded predictor.
    """
    return -sched.sigma[sample.t] * score(sample.x, sample.t, cond, world, sched, temperature)


def ancestral_step(
    sample: NoisySample, eps_hat: np.ndarray, sched: TimestepSchedule, noise: np.ndarray | None = None
) -> NoisySample:
    """One DDPM reverse step from ``t`` to ``t - 1``.

    At ``t == 0`` the step is the final one: it returns the clean-data estimate
    ``(x - sigma_0 * eps) / sqrt(alpha_bar_0)`` (still labelled ``t = 0``) and
    ignores ``noise``.
    """
    x = np.asarray(sample.x, dtype=float)
    eps_hat = np.asarray(eps_hat, dtype=float)
    if eps_hat.shape != x.shape:
        raise ParameterError(f"dimension mismatch: x {x.shape} vs eps {eps_hat.shape}")
    t = sample.t
    sched.check_t(t)
    ab = sched.alpha_bar[t]
    x0_hat = (x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    if t == 0:
        return NoisySample(x0_hat, 0)
    if noise is None:
        raise ParameterError("stochastic step needs noise")
    noise = np.asarray(noise, dtype=float)
    if noise.shape != x.shape:
        raise ParameterError(f"dimension mismatch: x {x.shape} vs noise {noise.shape}")
    ab_prev = sched.alpha_bar[t - 1]
    beta = sched.betas[t]
    coef_x0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    coef_xt = np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
    var = beta * (1.0 - ab_prev) / (1.0 - ab)
    return NoisySample(coef_x0 * x0_hat + coef_xt * x + np.sqrt(var) * noise, t - 1)


def nearest_modes(points: np.ndarray, world: MixtureWorld) -> np.ndarray:
    xb, _ = _as_batch(points, world.dim)
    d2 = ((xb[:, None, :] - world.means[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=1)


def mode_hit_rate(finals: Sequence[np.ndarray] | np.ndarray, world: MixtureWorld, target: ConditionSet) -> float:
    """Fraction of points whose nearest mode mean carries every non-empty target label."""
    pts = np.asarray(finals, dtype=float)
    if pts.size == 0:
        raise ParameterError("finals must be nonempty")
    hits = world.mode_mask(target)[nearest_modes(pts.reshape(-1, world.dim), world)]
    return float(hits.mean())


def symmetric_identity_world(
    separation: float = 0.5, text_separation: float = 2.0, std: float = 0.5
) -> MixtureWorld:
    """Two text classes x two identities on a rectangle; identities differ along axis 0."""
    modes = []
    for text, ty in (("run", text_separation), ("swim", -text_separation)):
        for ident, ix in (("A", separation), ("B", -separation)):
            modes.append(Mode(text, ident, np.array([ix, ty]), std))
    return MixtureWorld(dim=2, modes=tuple(modes), prior=np.full(4, 0.25))
