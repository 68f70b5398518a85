"""Dataset distillation for Wi-Fi CSI sensing data.

Compresses a labeled CSI dataset into a small learnable synthetic set by
matching student training trajectories against pre-recorded teacher
trajectories, with classical coreset baselines and an evaluation harness
for accuracy and cross-architecture comparisons.
"""

__version__ = "0.1.0"

from .autodiff import Graph, GraphError, backward, evaluate, fd_check
from .config import ConfigError, RunConfig
from .coresets import (
    METHODS,
    CoresetResult,
    herding_select,
    kcenter_select,
    kmeans_select,
    random_select,
    select,
)
from .data import (
    LabeledDataset,
    Manifest,
    MultipathConfig,
    PackError,
    PreprocessConfig,
    load_pack,
    preprocess,
    save_pack,
    split,
    subset,
    synth_csi,
)
from .distill import (
    DegenerateSegmentError,
    DistillConfig,
    DistillError,
    DistillState,
    SyntheticDataset,
    buffer_digest,
    distill,
    distill_step,
    init_synthetic,
)
from .evaluate import (
    EvalConfig,
    EvalReport,
    cross_matrix,
    evaluate_set,
    render_table,
    report_csv,
    train_student,
)
from .models import ModelSpec, NetworkParams, accuracy, init_params, param_count
from .trajectories import (
    BufferError,
    TeacherConfig,
    Trajectory,
    TrainingError,
    load_trajectory,
    run_sgd,
    save_trajectory,
    train_teacher,
)

__all__ = [
    "BufferError",
    "ConfigError",
    "CoresetResult",
    "DegenerateSegmentError",
    "DistillConfig",
    "DistillError",
    "DistillState",
    "EvalConfig",
    "EvalReport",
    "Graph",
    "GraphError",
    "LabeledDataset",
    "METHODS",
    "Manifest",
    "ModelSpec",
    "MultipathConfig",
    "NetworkParams",
    "PackError",
    "PreprocessConfig",
    "RunConfig",
    "SyntheticDataset",
    "TeacherConfig",
    "TrainingError",
    "Trajectory",
    "accuracy",
    "backward",
    "buffer_digest",
    "cross_matrix",
    "distill",
    "distill_step",
    "evaluate",
    "evaluate_set",
    "fd_check",
    "herding_select",
    "init_params",
    "init_synthetic",
    "kcenter_select",
    "kmeans_select",
    "load_pack",
    "load_trajectory",
    "param_count",
    "preprocess",
    "random_select",
    "render_table",
    "report_csv",
    "run_sgd",
    "save_pack",
    "save_trajectory",
    "select",
    "split",
    "subset",
    "synth_csi",
    "train_student",
    "train_teacher",
]
