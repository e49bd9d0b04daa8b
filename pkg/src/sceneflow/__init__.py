"""Diffusion-based scene flow estimation for point cloud pairs."""

from .config import Config, ConfigError, TrainConfig, load_config, parse_config, serialize_config
from .denoiser import (
    DenoiserConfig,
    GraphCache,
    denoise_forward,
    edgeconv_features,
    global_correlation_flow,
    global_cross_block,
    init_denoiser_params,
    local_transformer,
    similarity_matrices,
)
from .diffusion import (
    DiffusionConfig,
    NoiseSchedule,
    ddim_timesteps,
    make_schedule,
    posterior_mean,
    q_sample,
    sample_ddim,
    sample_ddpm,
)
from .harness import evaluate, make_model, subsample_pair, train
from .numerics import ParamStore, RngStream, Tensor, grad_check
from .objective import LossConfig, MetricReport, macro_average, metrics, robust_loss, total_loss
from .pointcloud import (
    FlowField,
    PointCloud,
    SceneFormatError,
    SceneGenConfig,
    ScenePair,
    farthest_point_sampling,
    generate_scene,
    knn,
    load_scene,
    save_scene,
)
from .uncertainty import (
    HypothesisSet,
    PRPoint,
    outlier_pr_curve,
    sample_hypotheses,
    uncertainty_error_bins,
)

__version__ = "0.1.0"
