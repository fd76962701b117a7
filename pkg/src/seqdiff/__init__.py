"""seqdiff: a sequence-diffusion engine with per-frame noise levels,
composable history guidance, and an exact linear-Gaussian oracle layer."""

from .schedules import (
    DiscreteNoiseGrid,
    LossWeighting,
    NoiseSchedule,
    Parameterization,
    SingularConversionError,
    alpha_sigma,
    convert_param,
    forward_diffuse,
    loss_weight,
)
from .gaussian import (
    GaussianPosteriorDenoiser,
    GaussianSeqSpec,
    conditional_moments,
    exact_conditional_score,
    lemma_conditional,
)
from .guidance import (
    GuidanceScheme,
    GuidanceTerm,
    TaskSpec,
    build_model_input,
    compose_extended,
    compose_scores,
    scheme_conditional,
    scheme_extended,
    scheme_fractional,
    scheme_from_config,
    scheme_temporal,
    scheme_vanilla,
)
from .model import Checkpoint, TinyDenoiser, TinyDenoiserConfig, ema_update
from .sampler import (
    InterpolationConfig,
    RolloutConfig,
    RolloutDriver,
    SamplerConfig,
    SteeringInput,
    interpolate,
    reverse_step,
    rollout,
    sample,
    sample_conditional,
)
from .training import Objective, TrainConfig, sample_noise_levels, train
from .oracle import (
    ElboResult,
    FourierSpec,
    PathSpec,
    ScoreEnsembleSpec,
    elbo,
    fourier_attenuation,
    make_path,
    mle_combine,
    partition_example_mse,
    random_path,
    real_dft_matrix,
)
from .config import EngineConfig

__version__ = "0.1.0"
