"""Noise schedule tables and deterministic (eta = 0) DDIM step algebra.

Timesteps are 1-based indices into the training schedule. Index 0 is a
virtual "clean" timestep whose cumulative alpha is exactly 1, so the last
denoising step lands on the x0 estimate and the first inversion step starts
from the clean latent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError

SD_BETA_START = 0.00085
SD_BETA_END = 0.012
SD_TRAIN_STEPS = 1000


def _frozen(a):
    a = np.asarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def num_train_steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative alpha at timestep ``t``; ``t == 0`` gives exactly 1."""
        t = int(t)
        if t == 0:
            return 1.0
        if not 1 <= t <= self.num_train_steps:
            raise ParameterError(f"timestep {t} outside [0, {self.num_train_steps}]")
        return float(self.alpha_bars[t - 1])


@dataclass(frozen=True)
class TimestepPlan:
    steps: tuple[int, ...]
    schedule: NoiseSchedule = field(repr=False, compare=False)

    @property
    def num_inference_steps(self) -> int:
        return len(self.steps)

    def descending(self) -> list[tuple[int, int]]:
        """(t, t_prev) pairs in sampling order; the last t_prev is 0."""
        nxt = list(self.steps[1:]) + [0]
        return list(zip(self.steps, nxt))

    def ascending(self) -> list[tuple[int, int]]:
        """(t, t_next) pairs in inversion order; the first t is 0."""
        up = list(reversed(self.steps))
        return list(zip([0] + up[:-1], up))


def build_schedule(
    n_train: int = SD_TRAIN_STEPS,
    beta_start: float = SD_BETA_START,
    beta_end: float = SD_BETA_END,
) -> NoiseSchedule:
    """Scaled-linear schedule: sqrt(beta) is linear in t."""
    if int(n_train) != n_train or n_train < 1:
        raise ParameterError(f"n_train must be a positive integer, got {n_train!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), int(n_train)) ** 2
    # squaring a square root is not exact; pin the endpoints
    betas[0], betas[-1] = beta_start, beta_end
    alphas = 1.0 - betas
    return NoiseSchedule(_frozen(betas), _frozen(alphas), _frozen(np.cumprod(alphas)))


def plan_timesteps(schedule: NoiseSchedule, s: int) -> TimestepPlan:
    """Leading-spacing plan: ``s`` indices with stride ``N // s``, offset by 1."""
    n = schedule.num_train_steps
    if int(s) != s or s < 1:
        raise ParameterError(f"step count must be a positive integer, got {s!r}")
    if s > n:
        raise ParameterError(f"cannot plan {s} steps over a {n}-step schedule")
    stride = n // s
    steps = tuple(int(k * stride + 1) for k in reversed(range(s)))
    return TimestepPlan(steps, schedule)


def _check_shapes(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def marginal_noise(x0, t, eps, schedule: NoiseSchedule):
    _check_shapes(x0, eps)
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def predict_x0(x_t, eps_pred, t, schedule: NoiseSchedule):
    _check_shapes(x_t, eps_pred)
    ab = schedule.alpha_bar(t)
    return (np.asarray(x_t) - np.sqrt(1.0 - ab) * np.asarray(eps_pred)) / np.sqrt(ab)


def _reproject(x_t, eps_pred, t, t_target, schedule):
    x0 = predict_x0(x_t, eps_pred, t, schedule)
    ab = schedule.alpha_bar(t_target)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps_pred)


def ddim_denoise_step(x_t, eps_pred, t, t_prev, schedule: NoiseSchedule):
    """One deterministic DDIM step from ``t`` down to ``t_prev`` (0 = clean)."""
    if t_prev >= t:
        raise ParameterError(f"denoising needs t_prev < t, got t_prev={t_prev}, t={t}")
    return _reproject(x_t, eps_pred, t, t_prev, schedule)


def ddim_invert_step(x_t, eps_pred, t, t_next, schedule: NoiseSchedule):
    """Reverse DDIM step from ``t`` (0 = clean) up to ``t_next``."""
    if t_next <= t:
        raise ParameterError(f"inversion needs t_next > t, got t={t}, t_next={t_next}")
    return _reproject(x_t, eps_pred, t, t_next, schedule)
