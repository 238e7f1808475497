"""Multi-user WiFi-CSI activity sensing.

Two problem formulations over one shared pipeline: per-user-slot activity
classification and identity-agnostic activity counting.  The pipeline turns
raw CSI amplitude into fixed-size images, extracts features with a
pretrained convolutional backbone, and attaches a task head.
"""

from .data import (
    CsiSample,
    DatasetManifest,
    SyntheticSpec,
    generate_synthetic,
    load_manifest,
    load_sample,
    load_wimans_manifest,
    write_dataset,
)
from .estimators import (
    ActivityCountRegressor,
    IdentitySlotClassifier,
    load_estimator,
)
from .labels import (
    ACTIVITIES,
    NUM_ACTIVITIES,
    NUM_SLOT_CLASSES,
    NUM_USER_SLOTS,
    SlotLabels,
    derive_counts,
    encode_slot_targets,
    round_counts,
)
from .metrics import (
    InvarianceReport,
    MetricReport,
    classification_metrics,
    counting_metrics,
    identity_invariance,
    per_activity_mae,
    per_user_count_breakdown,
)
from .splits import SplitManifest, loeo_splits, luo_splits, standard_split
from .training import LrSchedule, TrainConfig, lr_at
from .transform import CsiImageTransformer

__version__ = "0.1.0"

__all__ = [
    "ACTIVITIES",
    "ActivityCountRegressor",
    "CsiImageTransformer",
    "CsiSample",
    "DatasetManifest",
    "IdentitySlotClassifier",
    "InvarianceReport",
    "LrSchedule",
    "MetricReport",
    "NUM_ACTIVITIES",
    "NUM_SLOT_CLASSES",
    "NUM_USER_SLOTS",
    "SlotLabels",
    "SplitManifest",
    "SyntheticSpec",
    "TrainConfig",
    "classification_metrics",
    "counting_metrics",
    "derive_counts",
    "encode_slot_targets",
    "generate_synthetic",
    "identity_invariance",
    "load_estimator",
    "load_manifest",
    "load_sample",
    "load_wimans_manifest",
    "loeo_splits",
    "lr_at",
    "luo_splits",
    "per_activity_mae",
    "per_user_count_breakdown",
    "round_counts",
    "standard_split",
    "write_dataset",
]
