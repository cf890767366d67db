"""Weighted overall score, per-sample best-of-N selection and weight fitting."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import nnls

from .metrics import CORE_METRICS, MetricTable, MetricVector

log = logging.getLogger(__name__)

CALIBRATION_TOLERANCE = 0.02


class SelectionError(ValueError):
    pass


class MissingMetricError(SelectionError):
    pass


@dataclass(frozen=True)
class WeightVector:
    weights: Mapping[str, float]

    def __post_init__(self) -> None:
        w = {str(k): float(v) for k, v in self.weights.items()}
        unknown = sorted(set(w) - set(CORE_METRICS))
        if unknown:
            raise SelectionError(f"weights only apply to {CORE_METRICS}; got {unknown}")
        if any(v < 0 or not np.isfinite(v) for v in w.values()):
            raise SelectionError("weights must be finite and >= 0")
        if not any(v > 0 for v in w.values()):
            raise SelectionError("at least one weight must be positive")
        object.__setattr__(self, "weights", {m: w.get(m, 0.0) for m in CORE_METRICS})

    @classmethod
    def uniform(cls) -> "WeightVector":
        return cls({m: 1.0 / len(CORE_METRICS) for m in CORE_METRICS})

    def scaled(self, factor: float) -> "WeightVector":
        return WeightVector({k: v * factor for k, v in self.weights.items()})

    def required(self) -> list[str]:
        return [m for m in CORE_METRICS if self.weights[m] > 0]

    def as_array(self) -> np.ndarray:
        return np.array([self.weights[m] for m in CORE_METRICS])

    def to_dict(self) -> dict[str, float]:
        return dict(self.weights)


def overall_score(m: MetricVector, w: WeightVector) -> float:
    """``sum_i w_i * M_i`` over the core metrics; extras never count."""
    total = 0.0
    for name in CORE_METRICS:
        wi = w.weights[name]
        if wi == 0:
            continue
        v = getattr(m, name)
        if v is None:
            raise MissingMetricError(f"metric {name!r} is required (weight {wi}) but missing")
        total += wi * v
    return total


# -- calibration -------------------------------------------------------------


@dataclass
class CalibrationReport:
    weights: WeightVector
    residuals: list[float]
    labels: list[str]
    rank: int
    degenerate: bool
    tolerance: float = CALIBRATION_TOLERANCE

    @property
    def max_abs_residual(self) -> float:
        return max(abs(r) for r in self.residuals)

    @property
    def accepted(self) -> bool:
        return self.max_abs_residual <= self.tolerance

    def to_dict(self) -> dict[str, Any]:
        return {
            "weights": self.weights.to_dict(),
            "rows": [{"label": lab, "residual": r} for lab, r in zip(self.labels, self.residuals)],
            "max_abs_residual": self.max_abs_residual,
            "rank": self.rank,
            "degenerate": self.degenerate,
            "tolerance": self.tolerance,
            "accepted": self.accepted,
        }


def calibrate_weights(
    rows: Sequence[tuple[MetricVector, float]],
    labels: Sequence[str] | None = None,
    tolerance: float = CALIBRATION_TOLERANCE,
) -> CalibrationReport:
    """Nonnegative least-squares fit of the five core weights to target overall scores.

    Solver is Lawson-Hanson active set (scipy ``nnls``), which is deterministic.
    A rank-deficient design has no unique answer; then a tiny ridge term
    (1e-9 of the largest singular value) picks the minimum-norm member of the
    solution set and the report is flagged ``degenerate``.
    """
    if len(rows) < 5:
        raise SelectionError(f"calibration needs at least 5 rows, got {len(rows)}")
    labels = list(labels) if labels is not None else [f"row{i}" for i in range(len(rows))]
    A = np.empty((len(rows), len(CORE_METRICS)))
    b = np.empty(len(rows))
    for i, (mv, target) in enumerate(rows):
        if not 0 < target < 1:
            raise SelectionError(f"row {labels[i]}: target {target} outside (0, 1)")
        for j, name in enumerate(CORE_METRICS):
            v = getattr(mv, name)
            if v is None:
                raise MissingMetricError(f"row {labels[i]}: metric {name!r} missing")
            A[i, j] = v
        b[i] = target
    rank = int(np.linalg.matrix_rank(A))
    degenerate = rank < len(CORE_METRICS)
    if degenerate:
        warnings.warn(f"calibration design has rank {rank} < {len(CORE_METRICS)}; using minimum-norm solution")
        lam = 1e-9 * np.linalg.svd(A, compute_uv=False)[0]
        w, _ = nnls(np.vstack([A, lam * np.eye(A.shape[1])]), np.concatenate([b, np.zeros(A.shape[1])]))
    else:
        w, _ = nnls(A, b)
    weights = WeightVector(dict(zip(CORE_METRICS, w.tolist())))
    residuals = (A @ w - b).tolist()
    return CalibrationReport(weights, residuals, labels, rank, degenerate, tolerance)


def load_published_rows() -> list[dict[str, Any]]:
    """Published per-method metric means and overall scores bundled with the package."""
    doc = json.loads(resources.files("idguide").joinpath("data/published_rows.json").read_text())
    return doc["rows"]


def published_calibration_rows(holdout: bool = False) -> tuple[list[tuple[MetricVector, float]], list[str]]:
    rows, labels = [], []
    for r in load_published_rows():
        if bool(r.get("holdout", False)) != holdout:
            continue
        rows.append((MetricVector.from_dict(r["metrics"]), float(r["overall"])))
        labels.append(r["method"])
    return rows, labels


def load_weights(path: str | None = None) -> WeightVector:
    """Weights from a JSON file, ``"uniform"``, or the bundled calibrated default.

    The bundled default falls back to uniform weights if its calibration report
    was not accepted.
    """
    if path == "uniform":
        return WeightVector.uniform()
    if path is None:
        doc = json.loads(resources.files("idguide").joinpath("data/default_weights.json").read_text())
        if not doc.get("calibration", {}).get("accepted", False):
            log.warning("bundled calibration was rejected; falling back to uniform weights")
            return WeightVector.uniform()
        return WeightVector(doc["weights"])
    with open(path) as fh:
        doc = json.load(fh)
    return WeightVector(doc.get("weights", doc))


# -- selection ---------------------------------------------------------------


@dataclass
class SampleChoice:
    sample_id: str
    winning_method: str
    winning_score: float
    scores: dict[str, float]


@dataclass
class SelectionReport:
    per_sample: list[SampleChoice]
    aggregate: dict[str, float]
    method_usage: dict[str, int]
    method_means: dict[str, dict[str, float]]
    exclusions: list[dict[str, str]] = field(default_factory=list)
    weights: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "weights": self.weights,
            "per_sample": [
                {
                    "sample_id": c.sample_id,
                    "winning_method": c.winning_method,
                    "winning_score": c.winning_score,
                    "scores": dict(sorted(c.scores.items())),
                }
                for c in self.per_sample
            ],
            "aggregate": self.aggregate,
            "method_usage": dict(sorted(self.method_usage.items())),
            "method_means": {k: self.method_means[k] for k in sorted(self.method_means)},
            "exclusions": self.exclusions,
        }


def _priority_key(priority: Sequence[str]):
    rank = {m: i for i, m in enumerate(priority)}
    return lambda method: (rank.get(method, len(rank)), method)


def _means(vectors: Sequence[MetricVector], scores: Sequence[float]) -> dict[str, float]:
    out = {}
    for name in CORE_METRICS:
        vals = [getattr(v, name) for v in vectors]
        if vals and all(x is not None for x in vals):
            out[name] = float(np.mean(vals))
    out["overall"] = float(np.mean(scores)) if scores else float("nan")
    return out


def select_per_sample(
    candidates: MetricTable,
    w: WeightVector,
    priority: Sequence[str] = (),
) -> SelectionReport:
    """Pick the highest-scoring method for every sample.

    Exact ties go to the method listed first in ``priority``; unlisted methods
    rank after listed ones, by name.  Candidates lacking a weighted metric are
    skipped and logged in ``exclusions``; a sample with no usable candidate is
    excluded as a whole.
    """
    key = _priority_key(priority)
    choices: list[SampleChoice] = []
    exclusions: list[dict[str, str]] = []
    winners: list[MetricVector] = []
    per_method: dict[str, tuple[list[MetricVector], list[float]]] = {}
    for sid in sorted(candidates):
        scores: dict[str, float] = {}
        for method in sorted(candidates[sid], key=key):
            try:
                scores[method] = overall_score(candidates[sid][method], w)
            except MissingMetricError as exc:
                exclusions.append({"sample_id": sid, "method": method, "reason": str(exc)})
                continue
            vecs, vals = per_method.setdefault(method, ([], []))
            vecs.append(candidates[sid][method])
            vals.append(scores[method])
        if not scores:
            exclusions.append({"sample_id": sid, "method": "", "reason": "no candidate with all required metrics"})
            continue
        best = max(scores.values())
        # scores is in priority order, so the first method at the max wins ties
        winner = next(m for m, s in scores.items() if s == best)
        choices.append(SampleChoice(sid, winner, best, scores))
        winners.append(candidates[sid][winner])
    usage: dict[str, int] = {}
    for c in choices:
        usage[c.winning_method] = usage.get(c.winning_method, 0) + 1
    return SelectionReport(
        per_sample=choices,
        aggregate=_means(winners, [c.winning_score for c in choices]),
        method_usage=usage,
        method_means={m: _means(v, s) for m, (v, s) in per_method.items()},
        exclusions=exclusions,
        weights=w.to_dict(),
    )


_COLS = [("gme", "GMEScore"), ("cur", "CurScore"), ("arc", "ArcScore"), ("motion", "Motion"), ("imaging", "Imaging"), ("overall", "OverallScore")]


def render_table(report: SelectionReport, moe_label: str = "MoE") -> str:
    """Plain-text table: one row of metric means per method plus the selected set."""
    rows = [(m, report.method_means[m]) for m in sorted(report.method_means)]
    rows.append((moe_label, report.aggregate))
    width = max([len("Method")] + [len(r[0]) for r in rows])
    head = "Method".ljust(width) + " | " + " | ".join(h.rjust(12) for _, h in _COLS)
    lines = [head, "-" * len(head)]
    for name, means in rows:
        cells = [f"{means[k]:.4f}".rjust(12) if k in means else "--".rjust(12) for k, _ in _COLS]
        lines.append(name.ljust(width) + " | " + " | ".join(cells))
    usage = ", ".join(f"{m}: {n}" for m, n in sorted(report.method_usage.items()))
    lines.append("")
    lines.append(f"selected per method: {usage}")
    if report.exclusions:
        lines.append(f"exclusions: {len(report.exclusions)}")
    return "\n".join(lines)


def iter_table_methods(table: MetricTable) -> Iterable[str]:
    return sorted({m for methods in table.values() for m in methods})
