"""Burst-aware VLAD: feature aggregation, retrieval evaluation, benchmarking."""

from .aggregation import (
    AggregationModel,
    AssignmentParams,
    BurstParams,
    MarginAnalysis,
    aggregate,
    aggregate_blocks,
    cluster_margin_analysis,
    init_assignment_from_vocab,
    load_bundle,
    rank_shift,
    save_bundle,
    sigmoid,
    soft_assign,
    soft_count,
)
from .bench import BenchCase, BenchReport, make_bench_models, time_aggregation
from .errors import (
    BenchError,
    BurstVladError,
    ConfigError,
    ContractError,
    DataError,
    DegenerateError,
    FormatError,
    IoError,
    ManifestError,
    NumericalError,
    ShapeError,
    TruncatedError,
)
from .featureio import (
    GlobalDescriptor,
    LocalFeatureSet,
    l2_normalize_rows,
    load_descriptor,
    load_features,
    normalize_rows,
    read_matrix,
    sample_features,
    save_descriptor,
    save_features,
    write_matrix,
)
from .projection import (
    PcaModel,
    WhiteningModel,
    apply_whitening,
    fit_pca,
    fit_whitening,
    make_random_projection,
    project_prepool,
    project_rows,
)
from .retrieval import (
    DatasetManifest,
    GenParams,
    ManifestEntry,
    RetrievalResult,
    evaluate,
    generate_burst_benchmark,
    ground_truth_within_radius,
    load_manifest,
    rank_references,
    recall_at_k,
    save_manifest,
    write_report,
)
from .rng import make_rng
from .training import (
    TrainableModel,
    TrainConfig,
    TrainResult,
    TripletBatch,
    backward,
    batch_loss,
    build_triplets,
    central_differences,
    finite_diff_grad,
    flatten_params,
    gradient_check,
    make_gradcheck_case,
    train,
    triplet_loss,
    unflatten_params,
)
from .vocabulary import Vocabulary, assign_hard, kmeans_fit, load_vocabulary, save_vocabulary

__version__ = "0.1.0"
