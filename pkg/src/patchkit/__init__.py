"""patchkit: recursive-partition Shapley attribution and patch-grid
classification for 3D volumes, with a synthetic phantom test bed."""

from .errors import (
    BudgetExceededError,
    ConfigError,
    ContractViolationError,
    DependencyError,
    EmptyCohortError,
    InvalidArgumentError,
    InvalidStateError,
    NumericalFailureError,
    PatchkitError,
    UndefinedMetricError,
)
from .evaluation import auc, evaluate_scores, kfold_indices, metrics, roc_points
from .patchnet import (
    PatchNetConfig,
    PatchNetParams,
    embed_patches,
    forward,
    gsi_block,
    init_params,
    load_checkpoint,
    loss_and_grad,
    lpi_block,
    op_count_report,
    save_checkpoint,
)
from .phantom import DatasetManifest, PhantomSpec, class_separability, generate
from .shapley import (
    AttributionMap,
    SelectionResult,
    cohort_average,
    exact_shapley,
    recursive_attribution,
    select_top,
    sibling_shapley,
    ttest_select,
)
from .surrogate import SurrogatePredictor, additive_probe, surrogate_train
from .train import TrainSchedule, train_patchnet
from .volume import (
    PatchGrid,
    Region,
    Volume,
    extract_patch,
    make_grid,
    octree_children,
    patch_means,
    perturb_zero,
    read_vol,
    write_vol,
)

__version__ = "0.1.0"

__all__ = [
    "AttributionMap",
    "BudgetExceededError",
    "ConfigError",
    "ContractViolationError",
    "DatasetManifest",
    "DependencyError",
    "EmptyCohortError",
    "InvalidArgumentError",
    "InvalidStateError",
    "NumericalFailureError",
    "PatchGrid",
    "PatchNetConfig",
    "PatchNetParams",
    "PatchkitError",
    "PhantomSpec",
    "Region",
    "SelectionResult",
    "SurrogatePredictor",
    "TrainSchedule",
    "UndefinedMetricError",
    "Volume",
    "additive_probe",
    "auc",
    "class_separability",
    "cohort_average",
    "embed_patches",
    "evaluate_scores",
    "exact_shapley",
    "extract_patch",
    "forward",
    "generate",
    "gsi_block",
    "init_params",
    "kfold_indices",
    "load_checkpoint",
    "loss_and_grad",
    "lpi_block",
    "make_grid",
    "metrics",
    "octree_children",
    "op_count_report",
    "patch_means",
    "perturb_zero",
    "read_vol",
    "recursive_attribution",
    "roc_points",
    "save_checkpoint",
    "select_top",
    "sibling_shapley",
    "surrogate_train",
    "train_patchnet",
    "ttest_select",
    "write_vol",
]
