"""Pipeline stages behind the command line: enhance, sample, score, select, calibrate, report.

Each stage reads upstream files from the run directory, writes its own
outputs atomically, and stamps every artifact with the schema version, run
seed and config digest.  Stages refuse to overwrite their own outputs unless
``force`` is set.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from .enhance.cache import ResponseCache
from .enhance.pipeline import EnhanceContext, enhance_manifest, read_manifest, write_manifest
from .enhance.providers import (
    ImageGenerator,
    RetryPolicy,
    TextProvider,
    image_generator_from_config,
    text_provider_from_config,
)
from .enhance.validate import load_blacklist
from .guidance import GuidanceConfig
from .io import digest_json, make_header, read_jsonl, write_json, write_jsonl
from .metrics import (
    MetricTable,
    MetricVector,
    identity_score,
    imaging_quality_proxy,
    ingest_metrics,
    motion_smoothness_proxy,
    read_embeddings,
    table_from_rows,
    table_to_rows,
)
from .selector import (
    CalibrationReport,
    SampleChoice,
    SelectionReport,
    WeightVector,
    calibrate_weights,
    load_weights,
    overall_score,
    published_calibration_rows,
    render_table,
    select_per_sample,
)
from .synthetic import render_videos, write_video_artifacts
from .testbed import ConditionSet, load_testbed, mode_hit_rate

log = logging.getLogger(__name__)

ENHANCED_MANIFEST = "manifest.enhanced.jsonl"
ENHANCE_SUMMARY = "enhance_summary.json"
FINALS = "samples/finals.json"
SAMPLE_SUMMARY = "samples/summary.json"
ARTIFACTS = "artifacts"
METRICS = "metrics.jsonl"
SELECTION = "selection.json"
REPORT = "report.txt"
WEIGHTS = "weights.json"


class StageError(RuntimeError):
    """Data problem at stage level (missing upstream file, empty candidate set, ...)."""


class UsageError(RuntimeError):
    pass


@dataclass
class RunConfig:
    manifest_path: str | None = None
    world: dict[str, Any] | None = None
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    methods: dict[str, GuidanceConfig] = field(default_factory=dict)
    providers: dict[str, Any] = field(default_factory=lambda: {"text": {"kind": "mock"}, "image": {"kind": "copy"}})
    weights_path: str | None = None
    tie_break: list[str] = field(default_factory=list)
    seed: int = 0
    parallelism: int = 1
    output_dir: str = "run"
    cache_dir: str | None = None
    frames_per_video: int = 8
    motion_window: int = 10
    blacklist_path: str | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise UsageError("seed must be a 64-bit unsigned integer")
        if self.parallelism < 1:
            raise UsageError("parallelism must be positive")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
        kw = dict(d)
        if "guidance" in kw:
            kw["guidance"] = GuidanceConfig.from_dict(kw["guidance"])
        if "methods" in kw:
            kw["methods"] = {k: GuidanceConfig.from_dict(v) for k, v in kw["methods"].items()}
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path | None, **overrides: Any) -> "RunConfig":
        d: dict[str, Any] = {}
        if path is not None:
            d = json.loads(Path(path).read_text())
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)

    def to_dict(self) -> dict[str, Any]:
        return {
            "manifest_path": self.manifest_path,
            "world": self.world,
            "guidance": self.guidance.to_dict(),
            "methods": {k: v.to_dict() for k, v in sorted(self.methods.items())},
            "providers": self.providers,
            "weights_path": self.weights_path,
            "tie_break": self.tie_break,
            "seed": self.seed,
            "parallelism": self.parallelism,
            "output_dir": self.output_dir,
            "cache_dir": self.cache_dir,
            "frames_per_video": self.frames_per_video,
            "motion_window": self.motion_window,
            "blacklist_path": self.blacklist_path,
        }

    def digest(self) -> str:
        # where outputs land and how many threads ran must not change the digest
        d = self.to_dict()
        for k in ("output_dir", "cache_dir", "parallelism"):
            d.pop(k)
        return digest_json(d)

    def header(self, **extra: Any) -> dict[str, Any]:
        return make_header(self.seed, self.digest(), **extra)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def method_configs(self) -> dict[str, GuidanceConfig]:
        return dict(sorted(self.methods.items())) if self.methods else {"guided": self.guidance}


def _guard(paths: list[Path], force: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise UsageError(f"refusing to overwrite {existing}; pass --force")


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise StageError(f"{path} not found; run `idguide {producer}` first")
    return path


def sample_seed(run_seed: int, index: int) -> int:
    """Per-sample seed: the run seed XOR the sample's position in the manifest."""
    return run_seed ^ index


def _deterministic_clock() -> Callable[[], datetime]:
    # honour SOURCE_DATE_EPOCH so provenance timestamps can be pinned
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        fixed = datetime.fromtimestamp(int(epoch), tz=timezone.utc)
        return lambda: fixed
    return lambda: datetime.now(timezone.utc)


# -- enhance -----------------------------------------------------------------


@dataclass
class EnhanceSummary:
    samples: int
    warnings: int
    provider_failures: int


def run_enhance(
    cfg: RunConfig,
    force: bool = False,
    text_provider: TextProvider | None = None,
    image_generator: ImageGenerator | None = None,
    retry: RetryPolicy | None = None,
) -> EnhanceSummary:
    if cfg.manifest_path is None:
        raise UsageError("no manifest given (--manifest or manifest_path in config)")
    out = cfg.out
    _guard([out / ENHANCED_MANIFEST], force)
    manifest = Path(cfg.manifest_path)
    if not manifest.exists():
        raise StageError(f"manifest {manifest} not found")
    _, records = read_manifest(manifest)
    ctx = EnhanceContext(
        text_provider=text_provider or text_provider_from_config(cfg.providers.get("text")),
        image_generator=image_generator or image_generator_from_config(cfg.providers.get("image")),
        cache=ResponseCache(cfg.cache_dir or out / "cache"),
        retry=retry or RetryPolicy(),
        blacklist=load_blacklist(cfg.blacklist_path) if cfg.blacklist_path else None,
        clock=_deterministic_clock(),
    )
    out.mkdir(parents=True, exist_ok=True)
    outcomes = enhance_manifest(ctx, records, out, base_dir=manifest.parent, parallelism=cfg.parallelism)
    write_manifest(out / ENHANCED_MANIFEST, [o.record for o in outcomes], cfg.header(stage="enhance"))
    summary = EnhanceSummary(
        samples=len(outcomes),
        warnings=sum(len(o.warnings) for o in outcomes),
        provider_failures=sum(o.provider_failures for o in outcomes),
    )
    for o in outcomes:
        for w in o.warnings:
            log.warning("%s: %s", o.record.sample_id, w)
    write_json(out / ENHANCE_SUMMARY, {"header": cfg.header(stage="enhance"), **summary.__dict__})
    return summary


# -- sample ------------------------------------------------------------------


def _load_samples(cfg: RunConfig) -> list[dict[str, Any]]:
    path = cfg.out / ENHANCED_MANIFEST
    if not path.exists():
        if cfg.manifest_path is None:
            _require(path, "enhance")
        path = Path(cfg.manifest_path)
    _, records = read_manifest(path)
    return [r.to_dict() for r in records]


def run_sample(cfg: RunConfig, force: bool = False, traces: bool = False) -> dict[str, dict[str, float]]:
    """Guided testbed sampling for every (sample, method); returns per-method hit rates."""
    if cfg.world is None:
        raise UsageError("sample needs a testbed world config ('world' in the run config)")
    out = cfg.out
    _guard([out / FINALS, out / SAMPLE_SUMMARY], force)
    world, sched = load_testbed(cfg.world)
    samples = _load_samples(cfg)
    if not samples:
        raise StageError("manifest has no samples")
    pairs = [(m.text_class, m.identity) for m in world.modes]
    groups: dict[ConditionSet, list[int]] = {}
    for idx, s in enumerate(samples):
        text, ident = s.get("text_class"), s.get("identity")
        if text is None or ident is None:
            text, ident = pairs[idx % len(pairs)]
        groups.setdefault(ConditionSet(text, ident), []).append(idx)
    finals: dict[str, dict[str, list]] = {s["sample_id"]: {} for s in samples}
    hit: dict[str, dict[int, float]] = {}
    for name, gcfg in cfg.method_configs().items():
        for cond, members in groups.items():
            seeds = [sample_seed(cfg.seed, idx) for idx in members]
            videos = render_videos(world, sched, cond, gcfg, seeds, cfg.frames_per_video, cfg.motion_window)
            for idx, video in zip(members, videos):
                sid = samples[idx]["sample_id"]
                finals[sid][name] = video["finals"].tolist()
                hit.setdefault(name, {})[idx] = mode_hit_rate(video["finals"], world, cond)
                write_video_artifacts(out / ARTIFACTS / sid / name, video)
                if traces:
                    write_jsonl(
                        out / "samples" / "traces" / sid / f"{name}.jsonl",
                        (st.to_dict() for st in video["trace"]),
                        cfg.header(stage="sample", sample_id=sid, method=name),
                    )
    hits = {name: [v[i] for i in sorted(v)] for name, v in hit.items()}
    summary = {name: {"hit_rate": float(np.mean(v)), "samples": len(v)} for name, v in hits.items()}
    write_json(out / FINALS, {"header": cfg.header(stage="sample"), "finals": finals})
    write_json(
        out / SAMPLE_SUMMARY,
        {
            "header": cfg.header(stage="sample"),
            "methods": {k: v.to_dict() for k, v in cfg.method_configs().items()},
            "hit_rates": summary,
        },
    )
    return summary


def render_hit_rates(summary: Mapping[str, Mapping[str, float]]) -> str:
    width = max(len("method"), *(len(k) for k in summary))
    lines = [f"{'method'.ljust(width)} | hit_rate", "-" * (width + 11)]
    lines += [f"{k.ljust(width)} | {v['hit_rate']:.4f}" for k, v in summary.items()]
    return "\n".join(lines)


# -- score -------------------------------------------------------------------


def _find(d: Path, stem: str) -> Path | None:
    for suffix in (".emb", ".json"):
        p = d / f"{stem}{suffix}"
        if p.exists():
            return p
    return None


def score_video_dir(d: Path) -> MetricVector:
    """Metrics for one artifact directory; absent inputs leave that metric unset."""
    vals: dict[str, float] = {}
    for metric in ("gme", "cur", "arc"):
        p = _find(d, metric)
        if p is not None:
            vals[metric] = identity_score(read_embeddings(p))
    if (d / "frames.json").exists():
        vals["motion"] = motion_smoothness_proxy(json.loads((d / "frames.json").read_text())["frames"])
    if (d / "stats.json").exists():
        vals["imaging"] = imaging_quality_proxy(json.loads((d / "stats.json").read_text())["frames"])
    return MetricVector(**vals)


def score_artifacts(root: Path) -> MetricTable:
    table: MetricTable = {}
    if not root.exists():
        return table
    for sdir in sorted(p for p in root.iterdir() if p.is_dir()):
        for mdir in sorted(p for p in sdir.iterdir() if p.is_dir()):
            table.setdefault(sdir.name, {})[mdir.name] = score_video_dir(mdir)
    return table


def run_score(cfg: RunConfig, force: bool = False, ingest: str | None = None, prefer_local: bool = False) -> MetricTable:
    out = cfg.out
    _guard([out / METRICS], force)
    art = out / ARTIFACTS
    if not art.exists() and ingest is None:
        _require(art, "sample")
    local = score_artifacts(art)
    table = ingest_metrics(ingest, local, prefer_local) if ingest else local
    if not table:
        raise StageError("no candidates to score")
    write_jsonl(out / METRICS, table_to_rows(table), cfg.header(stage="score"))
    return table


# -- select ------------------------------------------------------------------


def load_metric_table(path: Path) -> MetricTable:
    _, rows = read_jsonl(path)
    return table_from_rows(rows)


def run_select(cfg: RunConfig, force: bool = False, exclusions_fatal: bool = False, metrics_path: str | None = None):
    out = cfg.out
    _guard([out / SELECTION], force)
    path = Path(metrics_path) if metrics_path else _require(out / METRICS, "score")
    table = load_metric_table(path)
    if not table:
        raise StageError("empty candidate set")
    weights = load_weights(cfg.weights_path)
    report = select_per_sample(table, weights, cfg.tie_break)
    if not report.per_sample:
        raise StageError("no sample has a usable candidate")
    if report.exclusions and exclusions_fatal:
        raise StageError(f"{len(report.exclusions)} exclusions: {report.exclusions[0]['reason']}")
    write_json(out / SELECTION, {"header": cfg.header(stage="select"), **report.to_dict()})
    return report


# -- calibrate ---------------------------------------------------------------


def load_calibration_rows(path: str | Path | None) -> tuple[list[tuple[MetricVector, float]], list[str]]:
    """Rows from a JSON file shaped like the bundled published rows, or the bundled set."""
    if path is None:
        return published_calibration_rows()
    doc = json.loads(Path(path).read_text())
    rows, labels = [], []
    for r in doc["rows"] if isinstance(doc, dict) else doc:
        if r.get("holdout"):
            continue
        rows.append((MetricVector.from_dict(r["metrics"]), float(r["overall"])))
        labels.append(str(r.get("method", f"row{len(labels)}")))
    return rows, labels


def run_calibrate(cfg: RunConfig, force: bool = False, rows_path: str | None = None) -> CalibrationReport:
    out = cfg.out
    _guard([out / WEIGHTS], force)
    rows, labels = load_calibration_rows(rows_path)
    report = calibrate_weights(rows, labels)
    if not report.accepted:
        log.warning(
            "calibration residual %.4f exceeds %.2f; published column is inconsistent with any nonnegative weights",
            report.max_abs_residual,
            report.tolerance,
        )
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / WEIGHTS, {"header": cfg.header(stage="calibrate"), "weights": report.weights.to_dict(), "calibration": report.to_dict()})
    return report


def render_calibration(report: CalibrationReport, rows: list[tuple[MetricVector, float]]) -> str:
    width = max(len("Method"), *(len(lab) for lab in report.labels))
    head = f"{'Method'.ljust(width)} | {'published':>9} | {'refit':>9} | {'residual':>9}"
    lines = [head, "-" * len(head)]
    for lab, (mv, target) in zip(report.labels, rows):
        fit = overall_score(mv, report.weights)
        lines.append(f"{lab.ljust(width)} | {target:9.4f} | {fit:9.4f} | {fit - target:+9.5f}")
    w = ", ".join(f"{k}={v:.4f}" for k, v in report.weights.weights.items())
    lines += ["", f"weights: {w}", f"max |residual| = {report.max_abs_residual:.5f} (tolerance {report.tolerance})",
              f"status: {'accepted' if report.accepted else 'REJECTED: falls back to uniform weights'}"]
    return "\n".join(lines)


# -- report ------------------------------------------------------------------


def run_report(cfg: RunConfig, force: bool = False, published: bool = False) -> str:
    out = cfg.out
    _guard([out / REPORT], force)
    doc = json.loads(_require(out / SELECTION, "select").read_text())
    report = SelectionReport(
        per_sample=[SampleChoice(c["sample_id"], c["winning_method"], c["winning_score"], c["scores"]) for c in doc["per_sample"]],
        aggregate=doc["aggregate"],
        method_usage=doc["method_usage"],
        method_means=doc["method_means"],
        exclusions=doc["exclusions"],
        weights=doc["weights"],
    )
    hdr = doc["header"]
    parts = [
        f"schema_version={hdr['schema_version']} seed={hdr['seed']} config_digest={hdr['config_digest']}",
        "",
        render_table(report),
    ]
    summary = out / SAMPLE_SUMMARY
    if summary.exists():
        parts += ["", "testbed identity hit rate:", render_hit_rates(json.loads(summary.read_text())["hit_rates"])]
    if published:
        rows, labels = published_calibration_rows()
        parts += ["", "published overall scores under the selection weights:", _published_table(rows, labels, report.weights)]
    text = "\n".join(parts) + "\n"
    out.mkdir(parents=True, exist_ok=True)
    (out / REPORT).write_text(text)
    return text


def _published_table(rows, labels, weights: Mapping[str, float]) -> str:
    w = WeightVector(weights)
    width = max(len(lab) for lab in labels)
    lines = []
    for lab, (mv, target) in zip(labels, rows):
        fit = overall_score(mv, w)
        lines.append(f"{lab.ljust(width)} | published {target:.4f} | recomputed {fit:.4f} | diff {fit - target:+.4f}")
    return "\n".join(lines)
