"""Retinal fundus image quality metrics and evaluation tooling.

Qv (vesselness-weighted anisotropy) and ISC (image structure clustering)
no-reference quality scores, Frangi vesselness, ROC/Youden and paired
statistics, evaluators for the conditional adversarial + L1 objective, and a
manifest-driven batch pipeline with a command-line front end.
"""

__version__ = "0.1.0"

from ._validation import (
    EmptyMaskError,
    FingerprintMismatchError,
    FundusQAError,
    ImageDecodeError,
    ZeroVarianceError,
)
from .adversarial import LossConfig, PatchGrid, adversarial_loss, combined_loss, l1_term, patch_grid, score_triples
from .isc import (
    ClusterModel,
    IscFeatureConfig,
    IscQualityModel,
    KMeans,
    LinearSVM,
    SvmModel,
    extract_isc_features,
    isc_histogram,
    isc_score,
    kmeans_fit,
    load_isc_model,
    save_isc_model,
    svm_train,
)
from .pipeline import (
    DatasetManifest,
    ManifestEntry,
    QualityTable,
    SplitSpec,
    build_manifest,
    compare_report,
    read_manifest,
    score_batch,
    split_dataset,
    write_manifest,
)
from .qv import QvReport, QvScorer, local_svd_anisotropy, qv_score
from .raster import (
    FovMask,
    ScaleSpaceParams,
    crop_resize,
    detect_fov,
    extract_patches,
    gaussian_derivative,
    hessian_at_scale,
    load_image,
    save_png,
)
from .stats import (
    PairedTestResult,
    RocCurve,
    StatsSummary,
    auc,
    ks_statistic,
    paired_t_test,
    roc_curve,
    summarize,
    youden_threshold,
)
from .vesselness import (
    FrangiFilter,
    FrangiParams,
    VesselSegmenter,
    binarize,
    frangi_vesselness,
    segment_classical,
)
