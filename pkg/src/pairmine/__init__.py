"""Pair-based metric learning with asymmetric adaptive pair mining and a
meta-learned loss threshold."""

from .data import (
    Batch,
    InfeasibleBatchError,
    LabeledDataset,
    build_meta_set,
    gen_gaussian_clusters,
    load_features_csv,
    pk_sample,
    save_features_csv,
    split_dataset,
)
from .evaluation import EvalReport, evaluate, nmi, recall_at_k, similarity_histogram
from .losses import LossOutput, LossParams, contrastive, embedding_gradients, soft_contrastive
from .meta_threshold import (
    MetaConfig,
    StarvedMetaBatchError,
    generate_threshold,
    lookahead_params,
    meta_gradient_fd,
    meta_loss,
    update_threshold,
)
from .mining import (
    MinedPairs,
    MiningConfig,
    MiningDecision,
    SimilarityMatrix,
    adapt_tolerances,
    mine,
    mine_adaptive,
    mine_asymmetric,
    mine_base,
    mine_symmetric,
    pair_counts,
    similarity_matrix,
)
from .model import (
    AdamState,
    DegenerateEmbeddingError,
    EmbeddingNet,
    ParamGrads,
    adam_step,
    backward,
    forward,
    init_adam,
    init_net,
    sgd_step,
)
from .trainer import MetricsLog, TrainConfig, Trainer, checkpoint, restore, train

__version__ = "0.1.0"
