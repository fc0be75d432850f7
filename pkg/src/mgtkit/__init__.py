"""Fine-tuning and error-analysis toolkit for binary machine-generated-text detection."""

from .arch_audit import (
    ArchDescriptor,
    ClassifierHeadSpec,
    FreezePlan,
    LoraPlan,
    ParamAudit,
    audit_freeze,
    audit_lora,
    count_params,
    lora_delta,
)
from .corpus import (
    Corpus,
    Record,
    TokenLengthStats,
    group_counts,
    load_corpus,
    save_corpus,
    token_length_stats,
)
from .evaluator import (
    ConfusionMatrix,
    MetricReport,
    breakdown_by,
    confusion,
    evaluate,
    f1_scores,
    predict,
)
from .sampler import BalanceSpec, ClassWeights, balance_downsample, class_weights
from .trainer import (
    EpochLog,
    Schedule,
    TrainConfig,
    TruncationPolicy,
    early_stop,
    make_schedule,
    train,
    truncate,
    weighted_cross_entropy,
)

__version__ = "0.1.0"

__all__ = [
    "ArchDescriptor",
    "BalanceSpec",
    "ClassWeights",
    "ClassifierHeadSpec",
    "ConfusionMatrix",
    "Corpus",
    "EpochLog",
    "FreezePlan",
    "LoraPlan",
    "MetricReport",
    "ParamAudit",
    "Record",
    "Schedule",
    "TokenLengthStats",
    "TrainConfig",
    "TruncationPolicy",
    "audit_freeze",
    "audit_lora",
    "balance_downsample",
    "breakdown_by",
    "class_weights",
    "confusion",
    "count_params",
    "early_stop",
    "evaluate",
    "f1_scores",
    "group_counts",
    "load_corpus",
    "lora_delta",
    "make_schedule",
    "predict",
    "save_corpus",
    "token_length_stats",
    "train",
    "truncate",
    "weighted_cross_entropy",
]
