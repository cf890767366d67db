"""Testbed "videos" and synthetic fixtures.

A testbed video for one (sample, method) pair is ``frames`` independent guided
trajectories under the sample's condition.  Each frame is featurised the way
an external scorer would see it:

* identity features (``cur``, ``arc``): posterior over identities under the
  clean mixture, and a blunter distance softmax; the reference is the one-hot
  target identity;
* text features (``gme``): posterior over text classes vs the one-hot target;
* motion: the last ``window`` states of the first trajectory;
* imaging stats: out-of-support flag, distance-to-mode noise and a sharpness
  term, all in [0, 1].
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.special import logsumexp

from .guidance import AnalyticDenoiser, GuidanceConfig, StepTrace, guided_sample_batch
from .io import atomic_write
from .metrics import CORE_METRICS, SCHEMA_VERSION, EmbeddingSet, MetricTable, MetricVector, write_embeddings
from .testbed import ConditionSet, MixtureWorld, TimestepSchedule, nearest_modes, symmetric_identity_world


def _clean_log_joint(x: np.ndarray, world: MixtureWorld) -> np.ndarray:
    d2 = ((x[:, None, :] - world.means[None]) ** 2).sum(-1)
    v = world.stds**2
    with np.errstate(divide="ignore"):
        logp = np.log(world.prior)
    return logp[None] - 0.5 * d2 / v[None] - 0.5 * world.dim * np.log(2 * np.pi * v)[None]


def _group_posterior(x: np.ndarray, world: MixtureWorld, labels: list[str], attr: str) -> np.ndarray:
    lj = _clean_log_joint(x, world)
    cols = []
    for lab in labels:
        mask = np.array([getattr(m, attr) == lab for m in world.modes])
        cols.append(logsumexp(lj[:, mask], axis=1))
    g = np.stack(cols, axis=1)
    return np.exp(g - logsumexp(g, axis=1, keepdims=True))


def identity_features(x: np.ndarray, world: MixtureWorld) -> np.ndarray:
    return _group_posterior(x, world, world.identities, "identity")


def text_features(x: np.ndarray, world: MixtureWorld) -> np.ndarray:
    return _group_posterior(x, world, world.text_classes, "text_class")


def blunt_identity_features(x: np.ndarray, world: MixtureWorld, width: float = 2.0) -> np.ndarray:
    ids = world.identities
    d2 = ((x[:, None, :] - world.means[None]) ** 2).sum(-1)
    scale = 2.0 * (width * world.stds.max()) ** 2
    cols = [-d2[:, [m.identity == i for m in world.modes]].min(axis=1) / scale for i in ids]
    g = np.stack(cols, axis=1)
    return np.exp(g - logsumexp(g, axis=1, keepdims=True))


def frame_stats(x: np.ndarray, world: MixtureWorld) -> list[dict[str, float]]:
    idx = nearest_modes(x, world)
    std = world.stds[idx]
    d = np.linalg.norm(x - world.means[idx], axis=1)
    lo = world.means.min(axis=0) - 4 * world.stds.max()
    hi = world.means.max(axis=0) + 4 * world.stds.max()
    clip = np.any((x < lo) | (x > hi), axis=1).astype(float)
    noise = np.minimum(d / (4 * std), 1.0)
    sharp = np.exp(-0.5 * (d / (2 * std)) ** 2)
    return [{"clip": float(c), "noise": float(n), "sharpness": float(s)} for c, n, s in zip(clip, noise, sharp)]


def _one_hot(labels: list[str], target: str) -> np.ndarray:
    return np.array([1.0 if lab == target else 0.0 for lab in labels])


def render_videos(
    world: MixtureWorld,
    sched: TimestepSchedule,
    cond: ConditionSet,
    config: GuidanceConfig,
    sample_seeds: Sequence[int],
    frames: int,
    window: int = 10,
) -> list[dict[str, Any]]:
    """Sample one testbed video per seed (batched) with finals, motion path and featurised frames.

    Frame ``f`` of the video for seed ``s`` is the trajectory seeded by ``(s, f)``.
    """
    seeds = [(s, f) for s in sample_seeds for f in range(frames)]
    res = guided_sample_batch(AnalyticDenoiser(world, sched), cond, config, sched, seeds, world.dim, record_trace=True)
    tail = res.trace[-(window - 1) :] if window > 1 else []
    id_ref = _one_hot(world.identities, cond.identity)
    text_ref = _one_hot(world.text_classes, cond.text_class)
    videos = []
    for i in range(len(sample_seeds)):
        rows = slice(i * frames, (i + 1) * frames)
        finals = res.final[rows]
        first = i * frames
        videos.append(
            {
                "finals": finals,
                "path": np.array([st.x[first] for st in tail] + [res.final[first]]),
                "cur": EmbeddingSet(id_ref, identity_features(finals, world), "testbed-posterior"),
                "arc": EmbeddingSet(id_ref, blunt_identity_features(finals, world), "testbed-distance"),
                "gme": EmbeddingSet(text_ref, text_features(finals, world), "testbed-text"),
                "stats": frame_stats(finals, world),
                "trace": [
                    StepTrace(st.t, st.w_i, st.x[first], st.eps_full[first], st.eps_no_text[first], st.eps_weak[first], st.eps_guided[first])
                    for st in res.trace
                ],
            }
        )
    return videos


def write_video_artifacts(dest: Path, video: dict[str, Any]) -> None:
    dest.mkdir(parents=True, exist_ok=True)
    write_embeddings(dest / "cur.emb", video["cur"])
    write_embeddings(dest / "arc.emb", video["arc"])
    write_embeddings(dest / "gme.json", video["gme"])
    doc = {"schema_version": SCHEMA_VERSION, "frames": video["path"].tolist()}
    atomic_write(dest / "frames.json", (json.dumps(doc, sort_keys=True) + "\n").encode())
    doc = {"schema_version": SCHEMA_VERSION, "frames": video["stats"]}
    atomic_write(dest / "stats.json", (json.dumps(doc, sort_keys=True) + "\n").encode())


DEFAULT_METHODS: dict[str, dict[str, Any]] = {
    "plain": {"w_c": 0.0, "w_i": 0.0},
    "cfg1": {"w_c": 1.0, "w_i": 0.0},
    "cfg3": {"w_c": 3.0, "w_i": 0.0},
    "ge0.5": {"w_c": 1.0, "w_i": 0.5, "degradation": {"temperature": 1.5}},
    "ge1": {"w_c": 1.0, "w_i": 1.0, "degradation": {"temperature": 1.5}},
    "ge2-cos": {"w_c": 1.0, "w_i": 2.0, "decay": {"mode": "cosine-to-zero"}, "degradation": {"temperature": 1.5}},
}

PROMPT_BANK = {
    "run": [
        "The football quarterback sprints down the field",
        "A marathon runner jogs along the river path",
        "The delivery driver hurries up the front steps",
        "A race car driver runs toward the pit lane",
        "The firefighter rushes out of the station",
    ],
    "swim": [
        "The lifeguard swims out past the breakers",
        "A diver glides through clear blue water",
        "The swimmer turns at the end of the lane",
        "A surfer paddles toward the incoming wave",
        "The coach swims beside the young athletes",
    ],
}


def default_testbed_config(steps: int = 50) -> dict[str, Any]:
    return {**symmetric_identity_world().to_dict(), "steps": steps, "beta_min": 1e-4, "beta_max": 0.02}


def make_synthetic_run(root: str | Path, n_samples: int = 50, seed: int = 0) -> Path:
    """Write a manifest, per-sample reference files and a run config under ``root``.

    Returns the config path.  Contents depend only on the arguments.
    """
    root = Path(root)
    (root / "references").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    texts = sorted(PROMPT_BANK)
    identities = ["A", "B"]
    rows = []
    for i in range(n_samples):
        text = texts[i % len(texts)]
        ident = identities[(i // len(texts)) % len(identities)]
        prompt = PROMPT_BANK[text][int(rng.integers(len(PROMPT_BANK[text])))]
        sid = f"s{i:03d}"
        ref = root / "references" / f"{sid}.bin"
        ref.write_bytes(f"identity={ident};sample={sid};".encode() + rng.bytes(16))
        rows.append(
            {
                "sample_id": sid,
                "raw_prompt": prompt,
                "reference_id": f"references/{sid}.bin",
                "text_class": text,
                "identity": ident,
            }
        )
    (root / "manifest.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    config = {
        "manifest_path": str(root / "manifest.jsonl"),
        "world": default_testbed_config(),
        "methods": DEFAULT_METHODS,
        "providers": {"text": {"kind": "mock"}, "image": {"kind": "copy"}},
        "seed": seed,
        "frames_per_video": 8,
    }
    cfg_path = root / "run_config.json"
    cfg_path.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    return cfg_path


def random_candidate_table(
    rng: np.random.Generator,
    n_samples: int = 50,
    methods: Sequence[str] = ("m0", "m1", "m2", "m3", "m4", "m5"),
) -> MetricTable:
    """Random metric table with per-method offsets so methods differ on average."""
    offsets = {m: rng.uniform(-0.15, 0.15, size=len(CORE_METRICS)) for m in methods}
    table: MetricTable = {}
    for i in range(n_samples):
        base = rng.uniform(0.2, 0.8, size=len(CORE_METRICS))
        table[f"s{i:03d}"] = {
            m: MetricVector(**dict(zip(CORE_METRICS, np.clip(base + offsets[m] + rng.normal(0, 0.1, len(CORE_METRICS)), 0, 1).tolist())))
            for m in methods
        }
    return table
