"""PocketSR: an ultra-light single-step super-resolution model stack.

Pieces: a lite encoder/decoder pair with adaptive skips and feature injection,
an SD-style U-Net backbone, online annealing pruning with a lightweight
replacement catalog, multi-layer feature distillation, analytic compute
accounting, and a CLI for training / profiling / ablation sweeps.
"""

from .backbone import (
    ConditioningState,
    DepthMap,
    UNetConfig,
    UNetModel,
    build_unet,
    label_depths,
)
from .lite_ed import (
    EncoderOutput,
    LiteDecoder,
    LiteDecoderConfig,
    LiteEncoder,
    LiteEncoderConfig,
    cross_normalize,
)
from .pruning import (
    AnnealedPair,
    AnnealingSchedule,
    PruningPlan,
    apply_plan,
    channel_prune,
    finalize,
    linear_attention,
    make_replacement,
    sigma,
)
from .distillation import DistillConfig, distill_loss, register_taps
from .training import (
    DegradationConfig,
    LossWeights,
    StagePlan,
    adversarial_losses,
    compose_loss,
    degrade,
    train_stage1,
    train_stage2,
)
from .accounting import (
    ComputeReport,
    compression_report,
    count_macs,
    count_params,
    measure_latency,
)
from .config import RunConfig
from .pipeline import PocketSRModel, build_pipeline

__version__ = "0.1.0"

__all__ = [
    "AnnealedPair", "AnnealingSchedule", "ComputeReport", "ConditioningState",
    "DegradationConfig", "DepthMap", "DistillConfig", "EncoderOutput",
    "LiteDecoder", "LiteDecoderConfig", "LiteEncoder", "LiteEncoderConfig",
    "LossWeights", "PocketSRModel", "PruningPlan", "RunConfig", "StagePlan",
    "UNetConfig", "UNetModel", "adversarial_losses", "apply_plan",
    "build_pipeline", "build_unet", "channel_prune", "compose_loss",
    "compression_report", "count_macs", "count_params", "cross_normalize",
    "degrade", "distill_loss", "finalize", "label_depths", "linear_attention",
    "make_replacement", "measure_latency", "register_taps", "sigma",
    "train_stage1", "train_stage2",
]
