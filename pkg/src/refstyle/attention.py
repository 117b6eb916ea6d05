"""Self-attention primitives and the feature-fusion attention kernel.

Feature maps are ``(tokens, channels)`` arrays. Projected queries, keys and
values are head-split to ``(heads, tokens, head_dim)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import CacheMissError, ConstraintError, ShapeError


class QKV(NamedTuple):
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray


@dataclass(frozen=True, eq=False)
class ProjectionWeights:
    """Query/key/value projections of one self-attention block.

    ``norm_eps`` enables the block's pre-attention per-token layer norm
    (no affine); ``None`` projects the raw features.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    num_heads: int = 1
    norm_eps: Optional[float] = None

    def __post_init__(self):
        shapes = {np.shape(self.w_q), np.shape(self.w_k), np.shape(self.w_v)}
        if len(shapes) != 1 or np.ndim(self.w_q) != 2:
            raise ShapeError(f"W_Q/W_K/W_V must be equal-shape matrices, got {shapes}")
        if self.num_heads < 1 or self.inner_dim % self.num_heads:
            raise ShapeError(
                f"inner dim {self.inner_dim} not divisible by {self.num_heads} heads"
            )

    @property
    def in_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def inner_dim(self) -> int:
        return self.w_q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.inner_dim // self.num_heads


def split_heads(x, num_heads):
    tokens, inner = x.shape
    return x.reshape(tokens, num_heads, inner // num_heads).transpose(1, 0, 2)


def merge_heads(x):
    heads, tokens, hd = x.shape
    return x.transpose(1, 0, 2).reshape(tokens, heads * hd)


def layer_norm(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _prepare(phi, weights):
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim != 2 or phi.shape[1] != weights.in_dim:
        raise ShapeError(
            f"features {phi.shape} do not match projection input dim {weights.in_dim}"
        )
    if weights.norm_eps is not None:
        phi = layer_norm(phi, weights.norm_eps)
    return phi


def project_query(phi, weights: ProjectionWeights):
    """The block's native query for ``phi`` (normalization included)."""
    h = _prepare(phi, weights)
    return split_heads(h @ weights.w_q, weights.num_heads)


def project_qkv(phi, weights: ProjectionWeights) -> QKV:
    h = _prepare(phi, weights)
    n = weights.num_heads
    return QKV(
        split_heads(h @ weights.w_q, n),
        split_heads(h @ weights.w_k, n),
        split_heads(h @ weights.w_v, n),
    )


def attention_probs(q, k):
    """Row-stochastic ``softmax(q k^T / sqrt(d))`` per head."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    logits = q @ k.transpose(0, 2, 1) / np.sqrt(q.shape[-1])
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def scaled_dot_attention(qkv: QKV):
    q, k, v = qkv
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError("q, k, v must be (heads, tokens, head_dim)")
    if k.shape[1] != v.shape[1]:
        raise ShapeError(f"key tokens {k.shape[1]} != value tokens {v.shape[1]}")
    if not (q.shape[0] == k.shape[0] == v.shape[0]) or q.shape[2] != k.shape[2]:
        raise ShapeError(f"incompatible q/k/v shapes {q.shape}, {k.shape}, {v.shape}")
    return merge_heads(attention_probs(q, k) @ np.asarray(v, dtype=np.float64))


def guarded_std(sd, eps_guard, guard="floor"):
    """Denominator for AdaIN normalization.

    ``"floor"`` uses ``max(sd, eps_guard)``: exact for non-degenerate
    channels, finite for constant ones. ``"additive"`` uses
    ``sd + eps_guard`` and shrinks every output by ``sd / (sd + eps_guard)``.
    """
    if guard == "floor":
        return np.maximum(sd, eps_guard)
    if guard == "additive":
        return sd + eps_guard
    raise ValueError(f"unknown guard mode {guard!r}")


def adain(content, style, eps_guard=1e-5, guard="floor"):
    """Give each channel of ``content`` the token-axis mean/std of ``style``."""
    content = np.asarray(content, dtype=np.float64)
    style = np.asarray(style, dtype=np.float64)
    if content.ndim != 2 or style.ndim != 2 or content.shape[1] != style.shape[1]:
        raise ShapeError(f"channel mismatch: {content.shape} vs {style.shape}")
    mu_c = content.mean(axis=0)
    sd_c = content.std(axis=0)
    mu_s = style.mean(axis=0)
    sd_s = style.std(axis=0)
    return sd_s * (content - mu_c) / guarded_std(sd_c, eps_guard, guard) + mu_s


def blend_queries(q_content, q_current, alpha, beta):
    if abs(alpha + beta - 1.0) > 1e-9:
        raise ConstraintError(f"alpha + beta must equal 1, got {alpha} + {beta}")
    if np.shape(q_content) != np.shape(q_current):
        raise ShapeError(
            f"query shapes differ: {np.shape(q_content)} vs {np.shape(q_current)}"
        )
    return alpha * np.asarray(q_content, dtype=np.float64) + beta * np.asarray(
        q_current, dtype=np.float64
    )


def fuse_values(v_content, v_style, eps_guard=1e-5, stats="channel"):
    """AdaIN over head-split values.

    ``stats="channel"`` normalizes every (head, head_dim) channel over tokens,
    i.e. the pre-split layout; ``stats="head"`` pools each head's
    tokens x head_dim block into one statistic.
    """
    v_content = np.asarray(v_content, dtype=np.float64)
    v_style = np.asarray(v_style, dtype=np.float64)
    if stats == "channel":
        fused = adain(merge_heads(v_content), merge_heads(v_style), eps_guard)
        return split_heads(fused, v_content.shape[0])
    if stats == "head":
        mu_c = v_content.mean(axis=(1, 2), keepdims=True)
        sd_c = v_content.std(axis=(1, 2), keepdims=True)
        mu_s = v_style.mean(axis=(1, 2), keepdims=True)
        sd_s = v_style.std(axis=(1, 2), keepdims=True)
        return sd_s * (v_content - mu_c) / guarded_std(sd_c, eps_guard) + mu_s
    raise ValueError(f"unknown value statistics mode {stats!r}")


def ffa(
    f_res,
    content,
    style,
    alpha,
    beta,
    weights: ProjectionWeights,
    eps_guard=1e-5,
    value_stats="channel",
):
    """Feature fusion attention for one self-attention block.

    Args:
        f_res: current block input features, ``(tokens, channels)``.
        content: cached content features; needs ``q``, ``k`` and ``v``.
        style: cached style features; needs ``k`` and ``v``.
        alpha, beta: weights of the cached content query and of the query
            recomputed from ``f_res``; must sum to 1.
        weights: the block's projections, used for the recomputed query.

    Returns:
        Attention over concatenated content/style keys and AdaIN-fused
        values, plus the ``f_res`` residual.
    """
    if content is None or content.q is None:
        raise CacheMissError("content query/key/value features are missing")
    if style is None:
        raise CacheMissError("style key/value features are missing")
    if abs(alpha + beta - 1.0) > 1e-9:
        raise ConstraintError(f"alpha + beta must equal 1, got {alpha} + {beta}")
    f_res = np.asarray(f_res, dtype=np.float64)
    q_current = project_query(f_res, weights)
    q = blend_queries(content.q, q_current, alpha, beta)
    k = np.concatenate([content.k, style.k], axis=1)
    v_fused = fuse_values(content.v, style.v, eps_guard, value_stats)
    v = np.concatenate([v_fused, np.asarray(style.v, dtype=np.float64)], axis=1)
    out = scaled_dot_attention(QKV(q, k, v))
    if out.shape != f_res.shape:
        raise ShapeError(f"attention output {out.shape} cannot add to {f_res.shape}")
    return out + f_res
