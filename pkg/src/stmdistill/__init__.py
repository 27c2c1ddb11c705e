"""Dataset distillation by trajectory matching with a self-adaptive horizon.

The pieces, bottom up:

- `autodiff`: small reverse-mode tape over numpy arrays, good for second
  order use (gradients of functions that already contain gradients).
- `nets`: plain convolutional classifiers expressed as flat parameter
  vectors, so whole training trajectories are easy to store and compare.
- `teacher`: expert trajectory generation (SGD snapshots per epoch), ZCA
  whitening, light augmentation.
- `distill`: the matching loss, the unrolled inner loop and its
  hypergradients, the adaptive horizon controller, and a fixed-horizon
  baseline at a matched budget.
- `curate`: labeled image containers, confidence-ranked curation,
  rotation augmentation, a deterministic toy generator, binary dataset IO.
- `evaluate`: train-from-scratch scoring of candidate sets with seeded
  repeats, random-subset baselines, side-by-side comparison.
- `cli`: subcommand front end wiring the above into reproducible runs.
"""

from .curate import (
    GeneratorSpec,
    LabeledDataset,
    curate_topk,
    generate_synthetic,
    import_image_dir,
    load_dataset,
    rotate_augment,
    save_dataset,
)
from .distill import (
    MatchLoss,
    RunHistory,
    StmState,
    SyntheticDataset,
    init_synthetic,
    inner_unroll,
    load_checkpoint,
    match_loss,
    pearson_r,
    run_mtt,
    run_stm,
    save_checkpoint,
    should_expand,
    unroll_values,
)
from .errors import (
    ArchMismatchError,
    BadMagicError,
    ConfigError,
    DataError,
    DegeneratePairError,
    DivergenceError,
    ShapeError,
    StmError,
    TrajectoryExhaustedError,
    TruncatedFileError,
    VersionError,
)
from .evaluate import (
    Comparison,
    EvalReport,
    TrainConfig,
    compare,
    random_baseline,
)
from .nets import ArchDescriptor, ParamVector, accuracy, init_params
from .teacher import (
    TrajectoryBuffer,
    augment,
    load_trajectory,
    save_trajectory,
    train_teacher,
    zca_apply,
    zca_fit,
    zca_invert,
)

# the scoring entry point lives one level down (stmdistill.evaluate.evaluate)
# so the submodule name stays importable
from . import evaluate  # noqa: E402  (must follow the from-imports above)

__version__ = "0.1.0"

__all__ = [
    "ArchDescriptor",
    "ArchMismatchError",
    "BadMagicError",
    "Comparison",
    "ConfigError",
    "DataError",
    "DegeneratePairError",
    "DivergenceError",
    "EvalReport",
    "GeneratorSpec",
    "LabeledDataset",
    "MatchLoss",
    "ParamVector",
    "RunHistory",
    "ShapeError",
    "StmError",
    "StmState",
    "SyntheticDataset",
    "TrainConfig",
    "TrajectoryBuffer",
    "TrajectoryExhaustedError",
    "TruncatedFileError",
    "VersionError",
    "accuracy",
    "augment",
    "compare",
    "curate_topk",
    "generate_synthetic",
    "import_image_dir",
    "init_params",
    "init_synthetic",
    "inner_unroll",
    "load_checkpoint",
    "load_dataset",
    "load_trajectory",
    "match_loss",
    "pearson_r",
    "random_baseline",
    "rotate_augment",
    "run_mtt",
    "run_stm",
    "save_checkpoint",
    "save_dataset",
    "save_trajectory",
    "should_expand",
    "train_teacher",
    "unroll_values",
    "zca_apply",
    "zca_fit",
    "zca_invert",
]
