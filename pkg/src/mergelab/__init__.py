"""Checkpoint merging (linear, TIES, DARE-TIES), similarity diagnostics, merge statistics, and a toy merge lab."""

from .checkpoint import (
    Checkpoint,
    ShapeSignature,
    check_compatible,
    file_digest,
    load_checkpoint,
    save_checkpoint,
)
from .errors import (
    ArgumentError,
    DegenerateError,
    DtypeError,
    FormatError,
    MergeLabError,
    MismatchError,
    SchemaError,
    TrainingError,
    ValidationError,
)
from .merge import (
    DareConfig,
    MergeWeights,
    TaskVector,
    TiesConfig,
    apply_task_vector,
    dare_ties_merge,
    dare_transform,
    linear_merge,
    task_vector,
    ties_merge,
)
from .similarity import (
    ActivationSet,
    CKAProfile,
    LayerGrouping,
    SimilarityReport,
    cka_profile,
    cosine_layerwise,
    linear_cka,
    parametric_diff,
    similarity_report,
    stable_rank,
)
from .stats import (
    BootstrapCI,
    CorrelationReport,
    DeltaRecord,
    bootstrap_ci,
    correlate_measures,
    cv_percent,
    merge_delta,
    pearson,
    spearman,
)

__version__ = "0.1.0"
