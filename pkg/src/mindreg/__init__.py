"""Modality-robust 3D deformable image registration.

MIND feature volumes, magnitude-bounded cubic B-spline deformation stages,
symmetric multiresolution optimization, weight-space ensembling, evaluation
metrics, a synthetic phantom benchmark, and a NIfTI-1 subset CLI.
"""

__version__ = "0.1.0"

from .grids import (
    GridGeometry,
    LabelVolume,
    MaskVolume,
    ScalarVolume,
    VectorField,
    downsample_by_two,
    foreground_mask,
    gaussian_blur,
    trilinear_sample,
)
from .mind import MindParams, MindVolume, local_variance, mind_distance, mind_transform, patch_ssd
from .bspline import (
    BOUND_FACTOR,
    BSplineField,
    InversionError,
    StageStack,
    apply_warp,
    bspline_to_dense,
    clamp_coefficients,
    compose,
    control_grid_shape,
    invert_fixed_point,
    invert_newton,
    jacobian_determinant,
    non_diffeomorphic_volume,
    stack_to_dense,
)
from .losses import (
    LossReport,
    LossWeights,
    PairObjective,
    diffusion_regularizer,
    group_consistency,
    lncc,
    loss_gradient,
    loss_value,
    multichannel_lncc,
    ndv_penalty,
)
from .engine import (
    RegistrationConfig,
    RegistrationResult,
    build_pyramid,
    register_pair,
    register_triplet,
)
from .ensemble import EnsembleConfig, ensemble_average, run_ensemble
from .metrics import LandmarkSet, dice, hd95, ndv_metric, tre, warp_labels
from .synth import (
    BenchCase,
    PhantomSpec,
    augment,
    contrast_remap,
    make_case,
    make_phantom,
    random_diffeomorphism,
)
from .nifti import (
    ChannelVolume,
    MalformedHeaderError,
    NiftiError,
    SizeMismatchError,
    UnsupportedFeatureError,
    read_volume,
    write_volume,
)
from .caseio import (
    read_case,
    read_config,
    read_landmarks,
    read_result,
    write_case,
    write_landmarks,
    write_result,
)

# mindreg.report and mindreg.cli are imported on demand: report selects a
# matplotlib backend at import time, which is not a package-import side
# effect library users should inherit.
