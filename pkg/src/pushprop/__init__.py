"""Mini-batch semi-supervised node classification on push-approximated
propagation matrices."""

from .graph import (
    CsrGraph,
    FeatureMatrix,
    LabelTable,
    build_csr,
    load_dataset,
    load_edge_list,
    load_labels,
    load_sparse_features,
    load_split,
    row_normalize_features,
)
from .push import (
    GfpushResult,
    PanelParams,
    PropagationWeights,
    SparseRowVector,
    SparsifiedPanel,
    build_panel,
    dense_transition_powers,
    error_bound,
    exact_row,
    gfpush,
    top_k_sparsify,
    weights_for,
)
from .augment import (
    AugmentedBatch,
    DropMask,
    MaskSampler,
    backprop_propagate,
    deterministic_propagate,
    random_propagate_batch,
    random_propagate_row,
)
from .neural import (
    AdamState,
    MlpModel,
    PropagationSettings,
    adam_step,
    batch_normalize,
    cross_entropy,
    init_model,
    kl_divergence,
    l2_distance,
    load_model,
    mlp_backward,
    mlp_forward,
    save_model,
    sharpen,
    softmax,
)
from .trainer import (
    Predictions,
    TrainConfig,
    TrainLog,
    consistency_loss,
    evaluate,
    infer,
    lambda_warmup,
    sample_unlabeled_subset,
    supervised_loss,
    train,
)

__version__ = "0.1.0"
