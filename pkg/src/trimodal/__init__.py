"""Desk-scale cross-modal metric learning engine.

Synthetic three-modality identity data (visible-like, infrared-like, and
a deterministic transition view bridging them), contrastive/center/
query-alignment/identity losses with hand-derived analytic gradients, a
toy trainable encoder, and a retrieval evaluation kit (CMC, mAP,
k-reciprocal re-ranking).
"""

__version__ = "0.1.0"

from .batching import BatchSpec, EmbeddingBatch, ObservationBatch, pk_sample, reindex_by_identity
from .config import EvalConfig, ExperimentConfig, TrainSettings, load_config
from .evalkit import (
    MetricsReport,
    RetrievalSet,
    cmc_map,
    distance_gap,
    k_reciprocal_rerank,
    pca2d,
)
from .geometry import (
    IdDistanceMatrix,
    PairwiseBlock,
    QueryMatrixSet,
    id_distance_matrix,
    pairwise_euclidean,
    positive_query_matrices,
    topk_aggregate,
)
from .losses import (
    CenterBank,
    ClassifierSet,
    LossReport,
    LossWeights,
    center_loss,
    contrastive_loss,
    identity_loss,
    negative_loss,
    normalize_features,
    pair_contrast_loss,
    positive_loss,
    query_alignment_loss,
    total_loss,
)
from .model import (
    EncoderParams,
    ModelConfig,
    OptimizerState,
    ScheduleConfig,
    TrainState,
    adam_step,
    encode,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train,
)
from .synthgen import (
    GeneratorConfig,
    ModalityParams,
    SyntheticDataset,
    generate_dataset,
    load_dataset,
    make_identity_latents,
    sample_instance,
    save_dataset,
    transition_transform,
)
