"""Region generation and assessment for occluded person re-identification."""

from .assessment import (
    AssessmentError,
    ConfidenceScores,
    MemoryBank,
    combine_scores,
    confidence_weighted_id_loss,
    discrimination_scores,
    init_memory,
    invariance_scores,
    update_memory,
)
from .config import Config, ConfigError, format_config, load_config, parse_config
from .data import (
    DataError,
    DatasetSplit,
    Sample,
    SyntheticConfig,
    augment,
    generate_synthetic,
    load_directory_dataset,
    pk_sampler,
    resize_labels,
)
from .encoder import VisionBackbone, encode_image, global_average_pool
from .losses import LossError, LossReport, id_loss, total_loss, triplet_loss
from .model import ModelError, ReidModel
from .prototypes import (
    FrozenTextEncoder,
    PromptContext,
    PrototypeError,
    PrototypeSet,
    build_prompt_sequence,
    build_template_sequence,
    encode_prototypes,
    encode_template_prototypes,
    load_prototypes,
    save_prototypes,
)
from .regions import (
    RegionError,
    SegmentationMasks,
    compute_masks,
    masked_average_pool,
    segmentation_loss,
    stripe_bounds,
    stripe_pool,
)
from .retrieval import (
    RetrievalEntry,
    RetrievalError,
    RetrievalIndex,
    aggregate_distance,
    build_index,
    cosine_distance,
    distance_matrix,
    evaluate,
)
from .training import (
    TrainingDiverged,
    evaluate_model,
    invariance_stats,
    load_model,
    load_splits,
    mask_accuracy,
    run_pipeline,
    run_sweep,
    save_model,
    train,
    train_prompt,
)

__version__ = "0.1.0"
