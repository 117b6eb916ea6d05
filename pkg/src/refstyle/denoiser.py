"""Noise-prediction backends with interceptable self-attention sites.

A backend is anything with ``latent_shape``, ``context_shape``,
``list_attention_sites()`` and ``predict_noise(x_t, t, cond, hooks)``.
``hooks`` maps site ids to :class:`SiteHook` objects; a backend must route
every self-attention block whose site is hooked through the hook and
compute unhooked sites exactly as :data:`PASSTHROUGH` would.

:class:`ToyUNet` is the reference backend: a small numpy U-Net whose levels
run residual block -> self-attention -> cross-attention, with weights drawn
from a seeded generator.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Optional, Protocol, Sequence, runtime_checkable

import numpy as np

from . import attention as attn
from .errors import AdapterContractError, ConfigError, ShapeError, SiteError
from .feature_cache import CachedFeatures, _Reader, read_array_record, write_array_record
from .schedule import NoiseSchedule, build_schedule, marginal_noise

# --------------------------------------------------------------------------
# conditioning


@dataclass(frozen=True, eq=False)
class Conditioning:
    embedding: np.ndarray
    is_null: bool = False

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64)
        if emb.ndim != 2:
            raise ShapeError(f"conditioning must be (tokens, dim), got {emb.shape}")
        if not np.all(np.isfinite(emb)):
            raise ValueError("conditioning contains non-finite entries")
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)

    @property
    def shape(self):
        return self.embedding.shape


def null_conditioning(shape) -> Conditioning:
    return Conditioning(np.zeros(shape), is_null=True)


# --------------------------------------------------------------------------
# attention hooks


def self_attention(features, weights: attn.ProjectionWeights):
    """Unmodified self-attention block: ``Attn(W_Q, W_K, W_V) + residual``."""
    return attn.scaled_dot_attention(attn.project_qkv(features, weights)) + features


class SiteHook:
    mode = "passthrough"

    def __call__(self, site: str, features, weights: attn.ProjectionWeights):
        return self_attention(features, weights)


PASSTHROUGH = SiteHook()


class Record(SiteHook):
    """Computes the block unchanged and captures its Q/K/V per site."""

    mode = "record"

    def __init__(self):
        self.captured: dict[str, attn.QKV] = {}

    def __call__(self, site, features, weights):
        qkv = attn.project_qkv(features, weights)
        self.captured[site] = qkv
        return attn.scaled_dot_attention(qkv) + features


@dataclass
class Inject(SiteHook):
    """Replaces the block with feature-fusion attention over cached features."""

    content: CachedFeatures
    style: CachedFeatures
    alpha: float
    beta: float
    eps_guard: float = 1e-5
    value_stats: str = "channel"
    mode = "ffa"

    def __call__(self, site, features, weights):
        return attn.ffa(
            features,
            self.content,
            self.style,
            self.alpha,
            self.beta,
            weights,
            self.eps_guard,
            self.value_stats,
        )


# --------------------------------------------------------------------------
# backend contract


@runtime_checkable
class DenoiserBackend(Protocol):
    latent_shape: tuple
    context_shape: tuple

    def list_attention_sites(self) -> Sequence[str]: ...

    def predict_noise(self, x_t, t, cond=None, hooks=None) -> np.ndarray: ...


def list_attention_sites(backend) -> list[str]:
    """Validated site enumeration; adapters reporting duplicates are rejected."""
    if not isinstance(backend, DenoiserBackend):
        raise AdapterContractError(
            f"{type(backend).__name__} does not implement the denoiser backend contract"
        )
    sites = list(backend.list_attention_sites())
    if not all(isinstance(s, str) for s in sites):
        raise AdapterContractError("site ids must be strings")
    seen = set()
    for s in sites:
        if s in seen:
            raise AdapterContractError(f"backend reports duplicate site id {s!r}")
        seen.add(s)
    return sites


def decoder_sites(backend) -> list[str]:
    """Sites in the upsampling half; adapters may override via ``decoder_sites()``."""
    sites = list_attention_sites(backend)
    custom = getattr(backend, "decoder_sites", None)
    if callable(custom):
        chosen = list(custom())
        unknown = set(chosen) - set(sites)
        if unknown:
            raise AdapterContractError(f"decoder sites not in site list: {sorted(unknown)}")
        return chosen
    up = [s for s in sites if s.startswith("up")]
    return up or sites[len(sites) // 2 :]


def check_hooks(hooks: Optional[Mapping], sites: Sequence[str]):
    if not hooks:
        return {}
    unknown = [s for s in hooks if s not in sites]
    if unknown:
        raise SiteError(f"unknown attention site(s): {', '.join(map(str, unknown))}")
    return hooks


def cfg_combine(eps_uncond, eps_cond, scale):
    if np.shape(eps_uncond) != np.shape(eps_cond):
        raise ShapeError(f"shape mismatch: {np.shape(eps_uncond)} vs {np.shape(eps_cond)}")
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    if scale == 1:
        return eps_cond.copy()
    return eps_uncond + scale * (eps_cond - eps_uncond)


def guided_noise(backend, x_t, t, cond: Conditioning, scale, hooks=None):
    """Classifier-free guided prediction.

    Both branches receive the same ``hooks``. The unconditional branch is
    skipped when ``scale == 1`` or when ``cond`` is itself the null
    conditioning (both branches would be identical).
    """
    eps_cond = backend.predict_noise(x_t, t, cond, hooks)
    if scale == 1 or cond.is_null:
        return eps_cond
    null = null_conditioning(backend.context_shape)
    eps_uncond = backend.predict_noise(x_t, t, null, hooks)
    return cfg_combine(eps_uncond, eps_cond, scale)


_REGISTRY: dict[str, Callable[..., object]] = {}


def register_backend(name: str, factory: Callable[..., object]) -> None:
    """Make an external adapter selectable as ``adapter:<name>``."""
    _REGISTRY[name] = factory


def resolve_adapter(name: str):
    if name in _REGISTRY:
        return _REGISTRY[name]
    if ":" in name:
        import importlib

        mod, _, attr = name.partition(":")
        try:
            return getattr(importlib.import_module(mod), attr)
        except (ImportError, AttributeError) as exc:
            raise ConfigError(f"cannot import adapter {name!r}: {exc}") from None
    raise ConfigError(f"unknown adapter {name!r}; registered: {sorted(_REGISTRY)}")


# --------------------------------------------------------------------------
# toy U-Net


@dataclass(frozen=True)
class ToyUNetConfig:
    latent_channels: int = 192
    latent_size: int = 8
    base_width: int = 32
    levels: int = 2
    attention_heads: int = 2
    attention_blocks_per_level: int = 1
    encoder_attention: bool = True
    context_tokens: int = 4
    context_dim: int = 16
    attention_gain: float = 3.0
    tied_qk: bool = True
    prior_skip: bool = True
    out_scale: float = 0.2
    seed: int = 0

    def widths(self):
        return [self.base_width * 2**level for level in range(self.levels)]

    def validate(self):
        if self.levels < 1 or self.attention_blocks_per_level < 1:
            raise ConfigError("toy U-Net needs at least one level and one attention block per level")
        if self.latent_size % (2 ** (self.levels - 1)):
            raise ConfigError(
                f"latent size {self.latent_size} not divisible by 2^{self.levels - 1}"
            )
        for w in self.widths():
            if w % self.attention_heads:
                raise ConfigError(f"width {w} not divisible by {self.attention_heads} heads")
            if w % min(8, w):
                raise ConfigError(f"width {w} incompatible with group norm")
        if min(self.latent_channels, self.base_width, self.context_tokens, self.context_dim) < 1:
            raise ConfigError("dimensions must be positive")

    def expected_sites(self) -> int:
        per_level = self.attention_blocks_per_level * (2 if self.encoder_attention else 1)
        return self.levels * per_level


def silu(x):
    return x / (1.0 + np.exp(-x))


def group_norm(x, eps=1e-5):
    c = x.shape[0]
    g = min(8, c)
    xg = x.reshape(g, -1)
    mu = xg.mean(axis=1, keepdims=True)
    var = xg.var(axis=1, keepdims=True)
    return ((xg - mu) / np.sqrt(var + eps)).reshape(x.shape)


def conv2d(x, w, b):
    """Same-padded 1x1 or 3x3 convolution of a ``(C, H, W)`` map."""
    out_ch, in_ch, k, _ = w.shape
    _, h, wd = x.shape
    if k == 1:
        y = np.tensordot(w[:, :, 0, 0], x, axes=1)
    else:
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        cols = np.stack([xp[:, i : i + h, j : j + wd] for i in range(3) for j in range(3)], axis=1)
        y = (w.reshape(out_ch, in_ch * 9) @ cols.reshape(in_ch * 9, h * wd)).reshape(out_ch, h, wd)
    return y + b[:, None, None]


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = float(t) * freqs
    return np.concatenate([np.cos(args), np.sin(args)])


class ToyUNet:
    """Reference backend.

    With ``prior_skip`` the prediction is ``sqrt(1 - abar_t) * x_t`` (the
    exact noise predictor for standard-normal data) plus ``out_scale``
    times the U-Net output, so untrained weights still give a well-posed
    inversion. ``tied_qk`` shares W_Q and W_K, making self-attention
    similarity-seeking as in trained models.
    """

    def __init__(self, config: ToyUNetConfig, schedule: Optional[NoiseSchedule] = None):
        config.validate()
        self.config = config
        self.schedule = schedule if schedule is not None else build_schedule()
        n = config.latent_size
        self.latent_shape = (1, config.latent_channels, n, n)
        self.context_shape = (config.context_tokens, config.context_dim)
        self.params: dict[str, np.ndarray] = {}
        self._rng = np.random.default_rng(config.seed)
        self._build()
        del self._rng
        self._sites = list(self._site_order)
        self._projections = {
            site: attn.ProjectionWeights(
                self.params[f"{site}.w_q"],
                self.params[f"{site}.w_k"],
                self.params[f"{site}.w_v"],
                num_heads=config.attention_heads,
                norm_eps=1e-5,
            )
            for site in self._sites
        }

    # -- parameters ----------------------------------------------------------

    def _param(self, name, shape, std):
        # drawn in float32 so the f32 weight file round-trips exactly
        w = (self._rng.standard_normal(shape) * std).astype(np.float32).astype(np.float64)
        self.params[name] = w
        return w

    def _zeros(self, name, shape):
        self.params[name] = np.zeros(shape)

    def _conv(self, name, cin, cout, k, gain=1.0):
        self._param(f"{name}.w", (cout, cin, k, k), gain / math.sqrt(cin * k * k))
        self._zeros(f"{name}.b", (cout,))

    def _linear(self, name, cin, cout, gain=1.0):
        self._param(f"{name}.w", (cin, cout), gain / math.sqrt(cin))
        self._zeros(f"{name}.b", (cout,))

    def _res(self, name, cin, cout):
        self._conv(f"{name}.conv1", cin, cout, 3)
        self._linear(f"{name}.temb", self.temb_dim, cout)
        self._conv(f"{name}.conv2", cout, cout, 3, gain=0.5)
        if cin != cout:
            self._conv(f"{name}.skip", cin, cout, 1)

    def _sa(self, site, ch):
        g = self.config.attention_gain
        w_q = self._param(f"{site}.w_q", (ch, ch), g / math.sqrt(ch))
        if self.config.tied_qk:
            self.params[f"{site}.w_k"] = w_q
        else:
            self._param(f"{site}.w_k", (ch, ch), g / math.sqrt(ch))
        self._param(f"{site}.w_v", (ch, ch), 1.0 / math.sqrt(ch))
        self._site_order.append(site)

    def _ca(self, name, ch):
        d = self.config.context_dim
        self._param(f"{name}.w_q", (ch, ch), 1.0 / math.sqrt(ch))
        self._param(f"{name}.w_k", (d, ch), 1.0 / math.sqrt(d))
        self._param(f"{name}.w_v", (d, ch), 1.0 / math.sqrt(d))
        self._param(f"{name}.w_o", (ch, ch), 1.0 / math.sqrt(ch))

    def _build(self):
        cfg = self.config
        widths = cfg.widths()
        w0 = cfg.base_width
        self.temb_dim = 4 * w0
        self._site_order: list[str] = []
        self._linear("time.lin1", w0, self.temb_dim)
        self._linear("time.lin2", self.temb_dim, self.temb_dim)
        self._conv("conv_in", cfg.latent_channels, w0, 3)
        ch = w0
        for level, width in enumerate(widths):
            for j in range(cfg.attention_blocks_per_level):
                self._res(f"down.{level}.res{j}", ch, width)
                ch = width
                if cfg.encoder_attention:
                    self._sa(f"down.{level}.attn{j}", ch)
                self._ca(f"down.{level}.cross{j}", ch)
        self._res("mid.res", ch, ch)
        for level in reversed(range(cfg.levels)):
            width = widths[level]
            for j in range(cfg.attention_blocks_per_level):
                cin = ch + width if j == 0 else ch
                self._res(f"up.{level}.res{j}", cin, width)
                ch = width
                self._sa(f"up.{level}.attn{j}", ch)
                self._ca(f"up.{level}.cross{j}", ch)
        self._conv("head", w0, cfg.latent_channels, 1)

    # -- contract ------------------------------------------------------------

    def list_attention_sites(self):
        return list(self._sites)

    def decoder_sites(self):
        return [s for s in self._sites if s.startswith("up.")]

    def projection(self, site) -> attn.ProjectionWeights:
        try:
            return self._projections[site]
        except KeyError:
            raise SiteError(f"unknown attention site: {site}") from None

    def predict_noise(self, x_t, t, cond: Optional[Conditioning] = None, hooks=None):
        feats = self.trunk(x_t, t, cond, hooks)
        p = self.params
        eps = self.config.out_scale * conv2d(feats, p["head.w"], p["head.b"])[None]
        if self.config.prior_skip:
            eps = eps + np.sqrt(1.0 - self.schedule.alpha_bar(t)) * np.asarray(x_t, dtype=np.float64)
        return eps

    def trunk(self, x_t, t, cond=None, hooks=None):
        """Network up to (excluding) the linear output head."""
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape != self.latent_shape:
            raise ShapeError(f"latent shape {x_t.shape} != backend shape {self.latent_shape}")
        if cond is None:
            cond = null_conditioning(self.context_shape)
        if cond.shape != self.context_shape:
            raise ShapeError(f"conditioning shape {cond.shape} != {self.context_shape}")
        hooks = check_hooks(hooks, self._sites)
        cfg = self.config
        p = self.params
        lin = lambda name, v: v @ p[f"{name}.w"] + p[f"{name}.b"]  # noqa: E731
        temb = lin("time.lin2", silu(lin("time.lin1", timestep_embedding(t, cfg.base_width))))
        temb = silu(temb)

        def res(name, h):
            y = conv2d(silu(group_norm(h)), p[f"{name}.conv1.w"], p[f"{name}.conv1.b"])
            y = y + lin(f"{name}.temb", temb)[:, None, None]
            y = conv2d(silu(group_norm(y)), p[f"{name}.conv2.w"], p[f"{name}.conv2.b"])
            skip = conv2d(h, p[f"{name}.skip.w"], p[f"{name}.skip.b"]) if f"{name}.skip.w" in p else h
            return skip + y

        def sa(site, h):
            c, hh, ww = h.shape
            tokens = h.reshape(c, hh * ww).T
            out = hooks.get(site, PASSTHROUGH)(site, tokens, self._projections[site])
            return np.asarray(out).T.reshape(c, hh, ww)

        def ca(name, h):
            c, hh, ww = h.shape
            tokens = h.reshape(c, hh * ww).T
            heads = cfg.attention_heads
            q = attn.split_heads(attn.layer_norm(tokens, 1e-5) @ p[f"{name}.w_q"], heads)
            k = attn.split_heads(cond.embedding @ p[f"{name}.w_k"], heads)
            v = attn.split_heads(cond.embedding @ p[f"{name}.w_v"], heads)
            out = attn.scaled_dot_attention(attn.QKV(q, k, v)) @ p[f"{name}.w_o"]
            return (tokens + out).T.reshape(c, hh, ww)

        h = conv2d(x_t[0], p["conv_in.w"], p["conv_in.b"])
        skips = []
        for level in range(cfg.levels):
            for j in range(cfg.attention_blocks_per_level):
                h = res(f"down.{level}.res{j}", h)
                if cfg.encoder_attention:
                    h = sa(f"down.{level}.attn{j}", h)
                h = ca(f"down.{level}.cross{j}", h)
            skips.append(h)
            if level < cfg.levels - 1:
                c, hh, ww = h.shape
                h = h.reshape(c, hh // 2, 2, ww // 2, 2).mean(axis=(2, 4))
        h = res("mid.res", h)
        for level in reversed(range(cfg.levels)):
            for j in range(cfg.attention_blocks_per_level):
                if j == 0:
                    h = np.concatenate([h, skips[level]], axis=0)
                h = res(f"up.{level}.res{j}", h)
                h = sa(f"up.{level}.attn{j}", h)
                h = ca(f"up.{level}.cross{j}", h)
            if level > 0:
                h = h.repeat(2, axis=1).repeat(2, axis=2)
        return silu(group_norm(h))


def build_toy_unet(config: ToyUNetConfig = ToyUNetConfig(), schedule=None) -> ToyUNet:
    return ToyUNet(config, schedule)


# --------------------------------------------------------------------------
# denoising objective and optional head fitting


def denoising_loss(backend, x0, t, eps, schedule: NoiseSchedule, cond=None):
    """Mean squared error between injected and predicted noise at ``t``."""
    x_t = marginal_noise(x0, t, eps, schedule)
    pred = backend.predict_noise(x_t, t, cond)
    return float(np.mean((np.asarray(eps) - pred) ** 2))


def fit_output_head(
    backend: ToyUNet,
    latents: Sequence[np.ndarray],
    schedule: NoiseSchedule,
    samples_per_latent: int = 8,
    ridge: float = 1e-3,
    seed: int = 0,
):
    """Least-squares fit of the toy U-Net's linear output head to the
    denoising objective on ``latents``; the trunk stays frozen.

    Returns the mean denoising loss before and after the fit over the
    training draws.
    """
    rng = np.random.default_rng(seed)
    cfg = backend.config
    feats, targets, draws = [], [], []
    n = schedule.num_train_steps
    for x0 in latents:
        for _ in range(samples_per_latent):
            t = int(rng.integers(1, n + 1))
            eps = rng.standard_normal(backend.latent_shape)
            draws.append((x0, t, eps))
            x_t = marginal_noise(x0, t, eps, schedule)
            f = backend.trunk(x_t, t)
            target = eps
            if cfg.prior_skip:
                target = target - np.sqrt(1.0 - backend.schedule.alpha_bar(t)) * x_t
            feats.append(f.reshape(f.shape[0], -1).T)
            targets.append((target[0] / cfg.out_scale).reshape(eps.shape[1], -1).T)
    before = float(np.mean([denoising_loss(backend, *d, schedule) for d in draws]))
    a = np.concatenate(feats)
    a = np.hstack([a, np.ones((a.shape[0], 1))])
    y = np.concatenate(targets)
    sol = np.linalg.solve(a.T @ a + ridge * np.eye(a.shape[1]), a.T @ y)
    backend.params["head.w"] = sol[:-1].T[:, :, None, None].astype(np.float32).astype(np.float64)
    backend.params["head.b"] = sol[-1].astype(np.float32).astype(np.float64)
    after = float(np.mean([denoising_loss(backend, *d, schedule) for d in draws]))
    return before, after


# --------------------------------------------------------------------------
# weight files

WEIGHTS_MAGIC = b"MSFW"


def save_weights(backend: ToyUNet, path) -> None:
    """Config JSON plus every parameter as an f32 array record."""
    cfg = json.dumps(asdict(backend.config), sort_keys=True).encode("utf-8")
    parts = [WEIGHTS_MAGIC, struct.pack("<II", 1, len(cfg)), cfg]
    parts.append(struct.pack("<I", len(backend.params)))
    for name, arr in backend.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(write_array_record(arr.reshape(1, arr.shape[0], -1)))
    with open(os.fspath(path), "wb") as fh:
        fh.write(b"".join(parts))


def load_weights(path) -> ToyUNet:
    from .errors import CacheFormatError

    with open(os.fspath(path), "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4, "magic") != WEIGHTS_MAGIC:
        raise CacheFormatError("not a toy weight file", 0)
    _version, n = struct.unpack("<II", reader.take(8, "header"))
    backend = ToyUNet(ToyUNetConfig(**json.loads(reader.take(n, "config"))))
    (count,) = struct.unpack("<I", reader.take(4, "count"))
    for _ in range(count):
        (n,) = struct.unpack("<I", reader.take(4, "name length"))
        name = reader.take(n, "name").decode("utf-8")
        arr = read_array_record(reader)
        if name not in backend.params:
            raise CacheFormatError(f"unexpected parameter {name!r}", reader.pos)
        backend.params[name][...] = arr.reshape(backend.params[name].shape)
    return backend
