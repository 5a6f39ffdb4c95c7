"""Differentiable Gaussian-splat renderer with flow supervision at sampled views.

The package trains a small 3D Gaussian cloud against posed images and, to keep
the geometry honest where no camera looks, matches the optical flow implied by
rendered depth against a prior flow at randomly sampled nearby viewpoints.
A synthetic-scene harness provides ground-truth depth so the geometric effect
is measurable.
"""

from .errors import (
    BadMagicError,
    BehindCameraError,
    EmptyCloudError,
    FlowsplatError,
    MissingGroundTruthError,
    NonPositiveDepthError,
    NonZeroT3Error,
    NoValidPixelsError,
    NumericalDivergenceError,
    SceneValidationError,
    ShapeMismatchError,
    StateMismatchError,
    TruncatedFileError,
    ZeroQuaternionError,
)
from .flow import (
    FlowField,
    endpoint_error,
    pure_translation_flow,
    radiance_flow,
    read_flo,
    roundtrip_displacement,
    write_flo,
)
from .gaussians import (
    GaussianCloud,
    RenderOutput,
    build_covariance,
    eval_gaussian,
    load_checkpoint,
    project_gaussian,
    render_aux,
    render_backward,
    render_forward,
    save_checkpoint,
)
from .geometry import (
    Camera,
    Pixel,
    RigidTransform,
    look_at,
    project,
    quaternion_to_rotation,
    relative_transform,
    unproject,
)
from .imgio import read_pfm, read_ppm, turbo_colormap, write_pfm, write_ppm
from .losses import (
    FdsLoss,
    LossWeights,
    fds_loss,
    fds_loss_term,
    photometric_loss,
    photometric_terms,
    ssim,
    ssim_map,
)
from .metrics import EvalReport, ViewMetrics, abs_rel, evaluate, psnr, write_report
from .oracle import OracleConfig, prior_flow
from .sampling import (
    SamplerConfig,
    SampledView,
    adaptive_radius,
    mean_rendered_depth,
    rng_stream,
    sample_translation,
    sample_view,
)
from .scene import (
    FloaterSpec,
    LoadedScene,
    SceneView,
    generate_scene,
    init_cloud,
    init_cloud_from_manifest,
    load_scene,
)
from .train import StepReport, TrainResult, TrainSchedule, Trainer, train

__version__ = "0.1.0"
