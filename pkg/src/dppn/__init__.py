"""Progressive prototype network for generalized zero-shot learning.

A small numpy library: a reverse-mode autodiff core, progressive attribute
localization and category classification modules, a training loop, a synthetic
planted-correspondence benchmark, and GZSL evaluation tooling.
"""

from dppn.autodiff import (
    AdamState,
    DimensionError,
    Node,
    adam_step,
    backward,
    finite_diff_check,
    leaf,
    tensor,
)
from dppn.data import (
    DatasetError,
    GzslDataset,
    SyntheticConfig,
    TensorFormatError,
    generate_synthetic,
    load_dataset,
    load_tensor,
    reference_config,
    save_dataset,
    save_tensor,
)
from dppn.model import (
    Checkpoint,
    DppnModel,
    TrainConfig,
    baseline_v2s_loss,
    load_checkpoint,
    model_from_checkpoint,
    predict,
    save_checkpoint,
    total_loss,
    train,
)
from dppn.evaluate import (
    EvaluationError,
    GzslReport,
    evaluate_gzsl,
    export_localization,
    harmonic_mean,
    mca,
    parse_grid,
    planted_argmax_hit_rate,
    planted_mass_by_iteration,
    run_ablation,
)

__version__ = "0.1.0"
