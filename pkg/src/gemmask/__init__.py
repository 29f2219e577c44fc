"""Scale-aware sparse fine-tuning masks.

Parameters are scored by the magnitude of their gradient relative to
their own value; per-layer budgets are set by the entropy of each
layer's score distribution times its score norm; the budgeted top
scorers per layer form a static binary mask whose complement stays
bit-exactly frozen through training. The package also ships baseline
strategies (random, top-gradient, allocator ablations), self-contained
toy models with exact backprop, and a reproducible experiment harness.
"""

from .allocation import (
    AllocationError,
    AllocationPlan,
    LayerAllocation,
    allocate_budget,
    build_allocation,
    layer_entropy,
    layer_importance,
    normalize_scores,
)
from .harness import ExperimentConfig, Report, default_config, load_config, run_experiment
from .mask_engine import (
    AdamWHyper,
    AdamWState,
    LayerMask,
    MaskError,
    MaskFormatError,
    MaskSet,
    apply_masked_adamw,
    apply_masked_sgd,
    build_masks,
    full_mask_set,
    load_masks,
    save_masks,
    select_top_k,
)
from .model_store import (
    GradientSnapshot,
    LayerTensor,
    ModelSnapshot,
    SnapshotError,
    check_pairing,
    load_gradients,
    load_snapshot,
    save_snapshot,
    snapshot_from_arrays,
    with_tunable_patterns,
)
from .scoring import (
    DEFAULT_EPS,
    ScoreVector,
    ScoringError,
    captured_share,
    compute_gwr,
    loss_reduction_proxy,
    relative_weight_change,
    score_snapshot,
    total_loss_reduction_proxy,
    total_relative_weight_change,
)
from .strategies import STRATEGIES, StrategySpec, make_mask
from .toy_models import (
    OptimizerConfig,
    SyntheticTask,
    ToyModel,
    ToyModelSpec,
    TrainConfig,
    TrainRecord,
    forward_backward,
    init_model,
    make_dataset,
    train_masked,
)

__version__ = "0.1.0"
