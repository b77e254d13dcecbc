"""Frequency-aware pyramid fusion and positional depth encoding for camera rigs."""

__version__ = "0.1.0"

from .csdp import (  # noqa: E402
    CsdpConfig,
    attractor_refine,
    bin_probabilities,
    categorical_depth,
    clip_depth,
    cross_view_width_attention,
    csdp_forward,
    eca_condition,
    fuse_depth,
    init_bins,
    regress_depth,
)
from .errors import ConfigError, DegenerateInputError, FormatError, FreqPDEError, ShapeError  # noqa: E402
from .fspe import (  # noqa: E402
    FilterField,
    Pyramid,
    WaveletQuad,
    apply_lowpass,
    build_pyramid,
    dwt_haar,
    fuse_level,
    idwt_haar,
    predict_lowpass_filters,
)
from .geometry import (  # noqa: E402
    CameraModel,
    CoverageReport,
    PositionRange,
    SparseDepthTarget,
    coverage_stats,
    depth_to_pe,
    fuse_features_pe,
    lidar_to_sparse_depth,
    project,
    sine_embed,
    unproject,
)
from .supervision import (  # noqa: E402
    LossReport,
    depth_loss_grad,
    hybrid_depth_loss,
    mse_rel,
    normalize_inv_depth,
    smooth_l1_sparse,
    total_loss,
)
from .tensor import WeightSet, conv2d_3x3, perceptron, read_tensor, seeded_init, softmax, write_tensor  # noqa: E402
