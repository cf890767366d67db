"""Per-video metric vectors: identity cosine scores, quality proxies, ingestion.

Neural feature extractors stay out of process.  Identity scores are computed
from embedding files written by whatever face model the caller trusts; motion
and imaging quality come from desk-scale proxies over supplied frame vectors
and frame statistics; anything else (text alignment, VBench numbers, FID)
arrives through :func:`ingest_metrics`.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

SCHEMA_VERSION = 1
CORE_METRICS = ("gme", "cur", "arc", "motion", "imaging")

_EMB_MAGIC = b"IDEM"
_EMB_HEADER = struct.Struct("<4sIIIH")


class MetricError(ValueError):
    pass


class MetricRangeError(MetricError):
    pass


@dataclass
class MetricVector:
    gme: float | None = None
    cur: float | None = None
    arc: float | None = None
    motion: float | None = None
    imaging: float | None = None
    extras: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in CORE_METRICS:
            v = getattr(self, name)
            if v is None:
                continue
            v = float(v)
            if not (0.0 <= v <= 1.0):
                raise MetricRangeError(f"{name}={v} outside [0, 1]")
            setattr(self, name, v)

    def get(self, name: str) -> float | None:
        if name in CORE_METRICS:
            return getattr(self, name)
        return self.extras.get(name)

    def present(self) -> dict[str, float]:
        out = {m: getattr(self, m) for m in CORE_METRICS if getattr(self, m) is not None}
        out.update(self.extras)
        return out

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {m: getattr(self, m) for m in CORE_METRICS if getattr(self, m) is not None}
        if self.extras:
            d["extras"] = dict(sorted(self.extras.items()))
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MetricVector":
        core = {m: d[m] for m in CORE_METRICS if d.get(m) is not None}
        extras = {k: float(v) for k, v in d.get("extras", {}).items()}
        return cls(**core, extras=extras)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise MetricError("zero-norm embedding")
    return v / n


@dataclass
class EmbeddingSet:
    """Reference embedding plus one embedding per sampled frame; unit-normalised on construction."""

    ref: np.ndarray
    frames: np.ndarray
    space_tag: str = "unknown"

    def __post_init__(self) -> None:
        ref = np.asarray(self.ref, dtype=float)
        frames = np.asarray(self.frames, dtype=float)
        if frames.ndim == 1:
            frames = frames[None, :] if frames.size else frames.reshape(0, ref.shape[0])
        if ref.ndim != 1 or frames.ndim != 2 or frames.shape[1] != ref.shape[0]:
            raise MetricError(f"dimension mismatch: ref {ref.shape} vs frames {frames.shape}")
        self.ref = _unit(ref)
        self.frames = _unit(frames) if len(frames) else frames


def identity_score(emb: EmbeddingSet, negative: str = "clamp") -> float:
    """Mean per-frame cosine similarity to the reference.

    Face-model cosines can be negative.  ``negative="clamp"`` maps them to 0;
    ``negative="rescale"`` maps every cosine ``c`` to ``(1 + c) / 2`` instead.
    """
    if len(emb.frames) == 0:
        raise MetricError("no frames to score")
    cos = np.clip(emb.frames @ emb.ref, -1.0, 1.0)
    if negative == "clamp":
        vals = np.maximum(cos, 0.0)
    elif negative == "rescale":
        vals = 0.5 * (1.0 + cos)
    else:
        raise MetricError(f"unknown negative-cosine policy {negative!r}")
    return float(min(max(vals.mean(), 0.0), 1.0))


def motion_smoothness_proxy(traj: Sequence[Sequence[float]] | np.ndarray, eps_div: float = 0.0) -> float:
    """Linear-interpolation residual score: ``1 - mean|f[k+1]-2f[k]+f[k-1]| / (2 mean|f[k+1]-f[k]|)``.

    A sequence with no motion at all counts as perfectly smooth.
    """
    f = np.asarray(traj, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] < 3:
        raise MetricError("motion proxy needs at least 3 frames")
    step = np.linalg.norm(np.diff(f, axis=0), axis=1).mean()
    curv = np.linalg.norm(f[2:] - 2.0 * f[1:-1] + f[:-2], axis=1).mean()
    den = 2.0 * step + eps_div
    if den == 0.0:
        return 1.0
    return float(min(max(1.0 - curv / den, 0.0), 1.0))


FRAME_STAT_FIELDS = ("clip", "noise", "sharpness")


def imaging_quality_proxy(frame_stats: Iterable[Mapping[str, float]]) -> float:
    """Mean of ``(1 - clip) * (1 - noise) * sharpness`` over frames; stats pre-normalised to [0, 1]."""
    vals = []
    for i, rec in enumerate(frame_stats):
        missing = [k for k in FRAME_STAT_FIELDS if k not in rec]
        if missing:
            raise MetricError(f"frame {i}: missing fields {missing}")
        clip, noise, sharp = (float(rec[k]) for k in FRAME_STAT_FIELDS)
        for k, v in zip(FRAME_STAT_FIELDS, (clip, noise, sharp)):
            if not 0.0 <= v <= 1.0:
                raise MetricRangeError(f"frame {i}: {k}={v} outside [0, 1]")
        vals.append((1.0 - clip) * (1.0 - noise) * sharp)
    if not vals:
        raise MetricError("no frame statistics")
    return float(min(max(sum(vals) / len(vals), 0.0), 1.0))


# -- embedding files ---------------------------------------------------------


def write_embeddings(path: str | Path, emb: EmbeddingSet, fmt: str | None = None) -> None:
    """Write ``.json`` or binary float32 (``.emb``) embedding files.

    Binary layout: magic ``IDEM``, then little-endian uint32 schema_version,
    uint32 dim, uint32 frame count, uint16 tag length, the UTF-8 space tag,
    and ``(count + 1) * dim`` float32 values with the reference first.
    """
    path = Path(path)
    fmt = fmt or ("json" if path.suffix == ".json" else "bin")
    if fmt == "json":
        doc = {
            "schema_version": SCHEMA_VERSION,
            "space_tag": emb.space_tag,
            "dim": int(emb.ref.shape[0]),
            "ref": emb.ref.tolist(),
            "frames": emb.frames.tolist(),
        }
        path.write_text(json.dumps(doc, sort_keys=True) + "\n")
        return
    tag = emb.space_tag.encode()
    header = _EMB_HEADER.pack(_EMB_MAGIC, SCHEMA_VERSION, emb.ref.shape[0], len(emb.frames), len(tag))
    body = np.vstack([emb.ref[None, :], emb.frames]).astype("<f4").tobytes()
    path.write_bytes(header + tag + body)


def read_embeddings(path: str | Path) -> EmbeddingSet:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == _EMB_MAGIC:
        magic, version, dim, count, tag_len = _EMB_HEADER.unpack_from(raw)
        if version != SCHEMA_VERSION:
            raise MetricError(f"{path}: unsupported schema_version {version}")
        off = _EMB_HEADER.size
        tag = raw[off : off + tag_len].decode()
        data = np.frombuffer(raw, dtype="<f4", offset=off + tag_len)
        if data.size != (count + 1) * dim:
            raise MetricError(f"{path}: truncated embedding file")
        data = data.reshape(count + 1, dim).astype(float)
        return EmbeddingSet(data[0], data[1:], tag)
    doc = json.loads(raw)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise MetricError(f"{path}: unsupported schema_version {doc.get('schema_version')}")
    ref = np.asarray(doc["ref"], dtype=float)
    frames = np.asarray(doc["frames"], dtype=float).reshape(-1, ref.shape[0])
    if "dim" in doc and doc["dim"] != ref.shape[0]:
        raise MetricError(f"{path}: header dim {doc['dim']} != {ref.shape[0]}")
    return EmbeddingSet(ref, frames, doc.get("space_tag", "unknown"))


# -- metric tables -----------------------------------------------------------

MetricTable = dict[str, dict[str, MetricVector]]


def _check_value(sample_id: str, method: str, metric: str, value: Any) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise MetricError(f"sample {sample_id!r}, method {method!r}: {metric} is not a number: {value!r}") from None
    if metric in CORE_METRICS and not (0.0 <= v <= 1.0):
        raise MetricRangeError(f"sample {sample_id!r}, method {method!r}: {metric}={v} outside [0, 1]")
    if not math.isfinite(v):
        raise MetricError(f"sample {sample_id!r}, method {method!r}: {metric} is not finite")
    return v


def table_from_rows(rows: Iterable[Mapping[str, Any]]) -> MetricTable:
    """Build a table from long-format rows ``{sample_id, method, metric, value}``."""
    flat: dict[tuple[str, str], dict[str, float]] = {}
    for row in rows:
        sid, method, metric = str(row["sample_id"]), str(row["method"]), str(row["metric"]).lower()
        v = _check_value(sid, method, metric, row["value"])
        cell = flat.setdefault((sid, method), {})
        if metric in cell and cell[metric] != v:
            raise MetricError(f"sample {sid!r}, method {method!r}: conflicting values for {metric}")
        cell[metric] = v
    table: MetricTable = {}
    for (sid, method), vals in flat.items():
        core = {k: v for k, v in vals.items() if k in CORE_METRICS}
        extras = {k: v for k, v in vals.items() if k not in CORE_METRICS}
        table.setdefault(sid, {})[method] = MetricVector(**core, extras=extras)
    return table


def table_to_rows(table: MetricTable) -> list[dict[str, Any]]:
    rows = []
    for sid in sorted(table):
        for method in sorted(table[sid]):
            for metric, value in sorted(table[sid][method].present().items()):
                rows.append({"sample_id": sid, "method": method, "metric": metric, "value": value})
    return rows


def merge_tables(external: MetricTable, local: MetricTable, prefer_local: bool = False) -> MetricTable:
    """Union of two tables; a metric present in both must agree unless ``prefer_local``."""
    merged: dict[tuple[str, str], dict[str, float]] = {}
    for sid, methods in external.items():
        for method, mv in methods.items():
            merged[(sid, method)] = dict(mv.present())
    for sid, methods in local.items():
        for method, mv in methods.items():
            cell = merged.setdefault((sid, method), {})
            for metric, v in mv.present().items():
                if metric in cell and cell[metric] != v and not prefer_local:
                    raise MetricError(
                        f"sample {sid!r}, method {method!r}: {metric} ingested as {cell[metric]} "
                        f"but computed locally as {v} (use --prefer-local)"
                    )
                cell[metric] = v
    rows = (
        {"sample_id": sid, "method": method, "metric": k, "value": v}
        for (sid, method), cell in merged.items()
        for k, v in cell.items()
    )
    return table_from_rows(rows)


def ingest_metrics(path: str | Path, local: MetricTable | None = None, prefer_local: bool = False) -> MetricTable:
    """Read a metrics JSONL file and merge it with locally computed values.

    Lines are ``{"sample_id", "method", "metric", "value"}``; a line carrying a
    ``header`` key (as written by this package) is skipped after its
    ``schema_version`` is checked.
    """
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "header" in rec:
                version = rec["header"].get("schema_version")
                if version != SCHEMA_VERSION:
                    raise MetricError(f"{path}: unsupported schema_version {version}")
                continue
            if rec.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
                raise MetricError(f"{path}:{lineno}: unsupported schema_version")
            rows.append(rec)
    table = table_from_rows(rows)
    if local:
        table = merge_tables(table, local, prefer_local=prefer_local)
    return table
