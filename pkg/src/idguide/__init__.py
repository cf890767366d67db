"""Identity-aware diffusion guidance, prompt/reference enhancement and multi-metric selection."""

from .guidance import (
    AnalyticDenoiser,
    DecaySchedule,
    DegradationSpec,
    GuidanceConfig,
    combine_cfg,
    combine_tpige,
    effective_wi,
    guided_sample,
    guided_sample_batch,
    make_weak_denoiser,
)
from .metrics import EmbeddingSet, MetricVector, identity_score, imaging_quality_proxy, ingest_metrics, motion_smoothness_proxy
from .selector import WeightVector, calibrate_weights, overall_score, select_per_sample
from .testbed import (
    ConditionSet,
    MixtureWorld,
    NoisySample,
    TimestepSchedule,
    analytic_epsilon,
    ancestral_step,
    forward_noise,
    make_schedule,
    mode_hit_rate,
)

__version__ = "0.1.0"
