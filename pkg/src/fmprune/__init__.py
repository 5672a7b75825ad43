"""Structured CNN filter pruning driven by feature-map similarity."""

__version__ = "0.1.0"

from .auxiliary import (
    AuxiliaryScore,
    RankVector,
    avg_rank,
    detect_unimportant_filters,
    l1_scores,
    matrix_rank,
    random_scores,
)
from .dataset_io import LabeledImage, ProbeSet, parse_cifar_batch, sample_probe_set
from .errors import (
    DataFormatError,
    ModelFormatError,
    PruneError,
    ScheduleError,
    ToolkitError,
)
from .inference import (
    Engine,
    FeatureMapStack,
    Logits,
    evaluate_accuracy,
    forward,
    forward_capture,
)
from .metrics import (
    CostBreakdown,
    analyze_costs,
    calibrate_mac_factor,
    count_flops,
    count_params,
    pruning_rate,
)
from .model_ir import (
    Layer,
    Model,
    PruneBlock,
    identify_prune_blocks,
    load_model,
    model_equal,
    save_model,
    validate,
)
from .pruner import (
    DeleteSet,
    PruneReport,
    PruneSchedule,
    prune_block,
    run_schedule,
    select_baseline,
    select_delete_set,
)
from .similarity import (
    SimilarityMatrix,
    SimilarityMeasure,
    dynamic_range,
    neg_euclidean,
    pairwise_similarity,
    ssim,
)
