"""Two-phase stylization: invert content and style while caching their
self-attention features, then sample forward from the AdaIN-fused terminal
latent with feature-fusion attention at the injection sites."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import attention
from .codec import SpaceToDepth
from .denoiser import (
    Conditioning,
    Inject,
    Record,
    cfg_combine,
    decoder_sites,
    guided_noise,
    list_attention_sites,
    null_conditioning,
)
from .errors import CacheMissError, ConfigError, ConstraintError, ShapeError, SiteError
from .feature_cache import CachedFeatures, FeatureStore
from .schedule import TimestepPlan, build_schedule, ddim_denoise_step, ddim_invert_step, plan_timesteps

ROLES = ("content", "style")


@dataclass(frozen=True)
class StylizeConfig:
    """Run parameters. ``injection_sites`` is ``"decoder"`` (upsampling-path
    self-attention), ``"all"``, or an explicit tuple of site ids. ``seed``
    identifies the job; the toy backend built for a job uses it."""

    alpha: float = 0.8
    beta: float = 0.2
    steps: int = 30
    cfg_inversion: float = 1.0
    cfg_forward: float = 5.0
    injection_sites: Union[str, tuple] = "decoder"
    eps_guard: float = 1e-5
    seed: int = 0
    conditioning: Optional[Conditioning] = field(default=None, compare=False)
    value_stats: str = "channel"

    def __post_init__(self):
        if abs(self.alpha + self.beta - 1.0) > 1e-9:
            raise ConstraintError(f"alpha + beta must equal 1, got {self.alpha} + {self.beta}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError(f"steps must be a positive integer, got {self.steps!r}")
        if self.cfg_inversion < 0 or self.cfg_forward < 0:
            raise ConfigError("guidance scales must be non-negative")
        if self.eps_guard <= 0:
            raise ConfigError("eps_guard must be positive")
        if self.value_stats not in ("channel", "head"):
            raise ConfigError(f"value_stats must be 'channel' or 'head', got {self.value_stats!r}")
        if not isinstance(self.injection_sites, str):
            object.__setattr__(self, "injection_sites", tuple(self.injection_sites))
        elif self.injection_sites not in ("decoder", "all"):
            raise ConfigError(f"injection_sites must be 'decoder', 'all' or a list of site ids")

    def with_beta(self, beta: float) -> "StylizeConfig":
        from dataclasses import replace

        return replace(self, alpha=1.0 - beta, beta=beta)


@dataclass
class StylizeResult:
    latent: np.ndarray
    image: np.ndarray
    store: FeatureStore
    z_content: np.ndarray
    z_style: np.ndarray
    z_fused: np.ndarray
    plan: TimestepPlan
    sites: list
    trajectory: Optional[list] = None
    config: Optional[StylizeConfig] = None


def resolve_sites(backend, selection) -> list:
    sites = list_attention_sites(backend)
    if selection == "all":
        return sites
    if selection == "decoder":
        return decoder_sites(backend)
    chosen = list(selection)
    unknown = [s for s in chosen if s not in sites]
    if unknown:
        raise SiteError(f"unknown attention site(s): {', '.join(unknown)}")
    return chosen


def _conditioning(config: StylizeConfig, backend) -> Conditioning:
    return config.conditioning if config.conditioning is not None else null_conditioning(backend.context_shape)


def _check_latent(latent, backend):
    latent = np.asarray(latent, dtype=np.float64)
    if latent.shape != tuple(backend.latent_shape):
        raise ShapeError(f"latent shape {latent.shape} != backend latent shape {tuple(backend.latent_shape)}")
    return latent


def csdi_invert(latent, backend, plan: TimestepPlan, store: Optional[FeatureStore], role: str,
                config: StylizeConfig = StylizeConfig(), trajectory: Optional[list] = None):
    """DDIM-invert ``latent`` to the plan's largest timestep.

    At plan timestep ``t`` the backend sees the latent of the previous
    (smaller) timestep labelled ``t``; the Q/K/V (content) or K/V (style)
    of every injection site are stored under ``t``. With ``store=None``
    nothing is recorded. Recording uses the conditional branch only.
    """
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}, got {role!r}")
    x = _check_latent(latent, backend)
    schedule = plan.schedule
    cond = _conditioning(config, backend)
    sites = resolve_sites(backend, config.injection_sites) if store is not None else []
    for t, t_next in plan.ascending():
        rec = Record()
        eps = backend.predict_noise(x, t_next, cond, {s: rec for s in sites})
        if config.cfg_inversion != 1 and not cond.is_null:
            eps_u = backend.predict_noise(x, t_next, null_conditioning(backend.context_shape))
            eps = cfg_combine(eps_u, eps, config.cfg_inversion)
        for site in sites:
            q, k, v = rec.captured[site]
            feats = CachedFeatures(k, v, q if role == "content" else None)
            store.record((t_next, site, role), feats)
        x = ddim_invert_step(x, eps, t, t_next, schedule)
        if trajectory is not None:
            trajectory.append(x)
    return x


def fuse_initial_latents(z_c, z_s, eps_guard=1e-5):
    """Per-channel AdaIN over the spatial axes of two ``(1, C, H, W)`` latents."""
    z_c = np.asarray(z_c, dtype=np.float64)
    z_s = np.asarray(z_s, dtype=np.float64)
    if z_c.shape != z_s.shape:
        raise ShapeError(f"latent shapes differ: {z_c.shape} vs {z_s.shape}")
    c = z_c.shape[1]
    flat = lambda z: z.reshape(c, -1).T  # noqa: E731
    fused = attention.adain(flat(z_c), flat(z_s), eps_guard)
    return fused.T.reshape(z_c.shape)


def fff_sample(z_cs, backend, plan: TimestepPlan, store: FeatureStore,
               config: StylizeConfig = StylizeConfig(), trajectory: Optional[list] = None):
    """Forward DDIM sampling with feature-fusion attention at injection sites.

    Both guidance branches receive the same injected features.
    """
    x = _check_latent(z_cs, backend)
    schedule = plan.schedule
    cond = _conditioning(config, backend)
    sites = resolve_sites(backend, config.injection_sites)
    n = plan.num_inference_steps
    for i, (t, t_prev) in enumerate(plan.descending()):
        hooks = {}
        for site in sites:
            try:
                content = store.lookup((t, site, "content"))
                style = store.lookup((t, site, "style"))
            except CacheMissError as exc:
                raise CacheMissError(f"sampling step {i + 1}/{n}: {exc}", exc.key) from None
            hooks[site] = Inject(content, style, config.alpha, config.beta,
                                 config.eps_guard, config.value_stats)
        eps = guided_noise(backend, x, t, cond, config.cfg_forward, hooks)
        x = ddim_denoise_step(x, eps, t, t_prev, schedule)
        if trajectory is not None:
            trajectory.append(x)
    return x


def ddim_sample(z_t, backend, plan: TimestepPlan, config: StylizeConfig = StylizeConfig(), guidance=None):
    """Plain DDIM sampling with unmodified attention everywhere."""
    x = _check_latent(z_t, backend)
    cond = _conditioning(config, backend)
    scale = config.cfg_forward if guidance is None else guidance
    for t, t_prev in plan.descending():
        eps = guided_noise(backend, x, t, cond, scale)
        x = ddim_denoise_step(x, eps, t, t_prev, plan.schedule)
    return x


def reconstruct(latent, backend, plan: TimestepPlan, config: StylizeConfig = StylizeConfig(), guidance=1.0):
    """Invert then plainly resample ``latent``; the no-injection baseline."""
    z_t = csdi_invert(latent, backend, plan, None, "content", config)
    return ddim_sample(z_t, backend, plan, config, guidance)


def invert_pair(content_latent, style_latent, backend, plan, config: StylizeConfig):
    """Run both inversions into a fresh store; returns (store, Z_C, Z_S)."""
    if np.shape(content_latent) != np.shape(style_latent):
        raise ShapeError(
            f"content latent {np.shape(content_latent)} and style latent {np.shape(style_latent)} "
            "differ; resize the style image to the content image's size"
        )
    store = FeatureStore()
    z_c = csdi_invert(content_latent, backend, plan, store, "content", config)
    z_s = csdi_invert(style_latent, backend, plan, store, "style", config)
    return store.freeze(), z_c, z_s


def stylize(content_image, style_image, backend, config: StylizeConfig = StylizeConfig(),
            codec=None, schedule=None, keep_trajectory=False) -> StylizeResult:
    codec = codec or SpaceToDepth()
    schedule = schedule or build_schedule()
    content_image = np.asarray(content_image)
    style_image = np.asarray(style_image)
    if content_image.shape != style_image.shape:
        raise ShapeError(
            f"content image {content_image.shape} and style image {style_image.shape} differ; "
            "resize the style image to the content image's size"
        )
    plan = plan_timesteps(schedule, config.steps)
    store, z_c, z_s = invert_pair(codec.encode(content_image), codec.encode(style_image),
                                  backend, plan, config)
    z_cs = fuse_initial_latents(z_c, z_s, config.eps_guard)
    traj = [] if keep_trajectory else None
    z0 = fff_sample(z_cs, backend, plan, store, config, traj)
    image = np.clip(codec.decode(z0), 0.0, 1.0)
    return StylizeResult(z0, image, store, z_c, z_s, z_cs, plan,
                         resolve_sites(backend, config.injection_sites), traj, config)
