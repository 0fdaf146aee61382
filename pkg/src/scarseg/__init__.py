"""Joint mixture segmentation of co-registered volumes with embedded
registration and surface-projected scar quantification."""

from .grid import (
    LabelVolume,
    ScalarVolume,
    VolumeGrid,
    grids_overlap,
    resample_to_grid,
    sample_gradient,
    sample_trilinear,
)
from .transforms import (
    AffineTransform,
    FfdTransform,
    TransformSet,
    TransformStack,
    bspline_basis,
    bspline_basis_d,
)
from .priors import (
    PriorMap,
    distance_to_boundary,
    fuse_labels_majority,
    wall_prior_from_segmentation,
)
from .mixture import (
    GaussianComponent,
    MvmmParams,
    PosteriorField,
    TissueConfig,
    classify,
    e_step,
    gaussian_pdf,
    gaussian_pdf_dv,
    image_tissue_pdf,
    init_params,
    log_likelihood,
    m_step,
    voxel_prior,
)
from .registration import (
    OptimizerConfig,
    ascend,
    grad_image_transform,
    grad_map_transform,
    icm_fit,
)
from .surface import (
    MetricsReport,
    SurfaceShell,
    extract_shell,
    gmm_baseline,
    otsu_scar_map,
    otsu_threshold,
    project_scar,
    surface_metrics,
)
from .phantom import (
    ModalityIntensities,
    PhantomSpec,
    ScarPatch,
    generate_phantom,
)
from .io import read_prior, read_volume, write_prior, write_volume
from .estimators import GmmBaseline, MvmmSegmenter, OtsuBaseline

__version__ = "0.1.0"

__all__ = [
    "VolumeGrid", "ScalarVolume", "LabelVolume",
    "sample_trilinear", "sample_gradient", "resample_to_grid", "grids_overlap",
    "bspline_basis", "bspline_basis_d",
    "AffineTransform", "FfdTransform", "TransformStack", "TransformSet",
    "PriorMap", "distance_to_boundary", "wall_prior_from_segmentation",
    "fuse_labels_majority",
    "TissueConfig", "GaussianComponent", "MvmmParams", "PosteriorField",
    "gaussian_pdf", "gaussian_pdf_dv", "voxel_prior", "image_tissue_pdf",
    "log_likelihood", "e_step", "m_step", "init_params", "classify",
    "OptimizerConfig", "grad_image_transform", "grad_map_transform",
    "ascend", "icm_fit",
    "SurfaceShell", "MetricsReport", "extract_shell", "project_scar",
    "surface_metrics", "otsu_threshold", "otsu_scar_map", "gmm_baseline",
    "PhantomSpec", "ScarPatch", "ModalityIntensities", "generate_phantom",
    "read_volume", "write_volume", "read_prior", "write_prior",
    "MvmmSegmenter", "GmmBaseline", "OtsuBaseline",
    "__version__",
]
