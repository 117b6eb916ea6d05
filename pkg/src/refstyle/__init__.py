"""Training-free reference-image stylization by DDIM inversion with
self-attention feature caching and feature-fusion attention sampling."""

from . import synthetic
from .attention import ProjectionWeights, QKV, adain, blend_queries, ffa, project_qkv, scaled_dot_attention
from .codec import SpaceToDepth
from .denoiser import (
    Conditioning,
    ToyUNet,
    ToyUNetConfig,
    build_toy_unet,
    cfg_combine,
    list_attention_sites,
    null_conditioning,
)
from .feature_cache import CacheKey, CachedFeatures, FeatureStore
from .pipeline import (
    StylizeConfig,
    StylizeResult,
    csdi_invert,
    fff_sample,
    fuse_initial_latents,
    reconstruct,
    stylize,
)
from .schedule import NoiseSchedule, TimestepPlan, build_schedule, plan_timesteps

__version__ = "0.1.0"
