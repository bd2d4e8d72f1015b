"""Distortion-free cluster-based statistical watermarking for token sequences.

The pipeline: cluster a token codebook once (`kmeans_cluster`), derive
per-context watermark codes from a secret key (`derive_code`), embed during
sampling (`generate_watermarked` / `creweight_sample`), and detect with an
exact binomial test (`detect`).  `simulate` provides desk-scale stand-ins
for a real tokenizer pipeline and `experiments` the Monte-Carlo harness.
"""

from ._meta import __version__
from .codebook import (
    Clustering,
    ClusteringIntegrityError,
    CodebookFormatError,
    TokenEmbeddingTable,
    adjusted_rand_index,
    export_clustering_json,
    export_table_json,
    kmeans_cluster,
    load_clustering,
    load_table,
    nearest_token,
    save_bundle,
    save_clustering,
    save_table,
)
from .codes import (
    KEY_ENV_VAR,
    SecretKey,
    WatermarkCode,
    derive_code,
    derive_stream_seed,
    derive_unit_uniform,
)
from .detect import (
    DetectionReport,
    binomial_tail,
    detect,
    score_token,
    threshold_for_fpr,
)
from .experiments import (
    ChannelSpec,
    DistortionCheckConfig,
    ExperimentConfig,
    MethodSpec,
    ResultTable,
    mcnemar_exact,
    null_calibration,
    run_detectability_experiment,
    run_distortion_free_check,
    run_robustness_experiment,
    wilson_interval,
)
from .generate import (
    GenerationConfig,
    ModelSource,
    TokenSequence,
    generate_plain,
    generate_watermarked,
    load_sequence,
    save_sequence,
)
from .reweight import (
    cluster_probabilities,
    creweight_distribution,
    creweight_sample,
    dip_reweight,
    kgw_reweight,
    overflow_distribution,
    validate_distribution,
)
from .simulate import (
    MockModel,
    RetokenizationChannel,
    apply_retokenization,
    apply_substitution_attack,
    load_sim_config,
    planted_assignment,
    sample_mock_model,
    synthesize_codebook,
)

__all__ = [
    "__version__",
    "TokenEmbeddingTable",
    "Clustering",
    "CodebookFormatError",
    "ClusteringIntegrityError",
    "kmeans_cluster",
    "nearest_token",
    "adjusted_rand_index",
    "save_table",
    "load_table",
    "save_clustering",
    "load_clustering",
    "save_bundle",
    "export_table_json",
    "export_clustering_json",
    "SecretKey",
    "WatermarkCode",
    "derive_code",
    "derive_unit_uniform",
    "derive_stream_seed",
    "KEY_ENV_VAR",
    "validate_distribution",
    "cluster_probabilities",
    "overflow_distribution",
    "creweight_sample",
    "creweight_distribution",
    "dip_reweight",
    "kgw_reweight",
    "ModelSource",
    "GenerationConfig",
    "TokenSequence",
    "generate_watermarked",
    "generate_plain",
    "save_sequence",
    "load_sequence",
    "DetectionReport",
    "score_token",
    "binomial_tail",
    "threshold_for_fpr",
    "detect",
    "RetokenizationChannel",
    "MockModel",
    "synthesize_codebook",
    "planted_assignment",
    "sample_mock_model",
    "apply_retokenization",
    "apply_substitution_attack",
    "load_sim_config",
    "MethodSpec",
    "ChannelSpec",
    "ExperimentConfig",
    "ResultTable",
    "DistortionCheckConfig",
    "run_distortion_free_check",
    "run_detectability_experiment",
    "run_robustness_experiment",
    "null_calibration",
    "wilson_interval",
    "mcnemar_exact",
]
