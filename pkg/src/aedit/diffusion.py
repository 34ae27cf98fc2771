"""Noise schedules, deterministic DDIM steps, inversion and guidance.

Every function here accepts either plain arrays or :class:`~aedit.tensor.Tensor`
inputs; tensor inputs keep the result on their tape so the update can be
differentiated (null-text optimization needs that).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .tensor import Tensor

__all__ = [
    "NoiseSchedule", "GuidanceConfig", "build_schedule", "inference_schedule",
    "cfg_predict", "ddim_step", "ddim_invert_step", "transition_coeffs",
    "invert_trajectory", "denoise", "DEFAULT_FIXED_POINT_ITERS", "write_trajectory", "read_trajectory",
]

DEFAULT_GUIDANCE = 7.5
INVERSION_GUIDANCE = 1.0


@dataclass(frozen=True)
class NoiseSchedule:
    """``alpha_bar[i]`` is the cumulative signal level after ``i`` steps.

    ``timesteps[i]`` is the training-time step label the denoiser sees at
    index ``i``; it is ``i`` itself unless the schedule was sub-sampled.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    timesteps: np.ndarray

    def __post_init__(self):
        if len(self.beta) != self.T or len(self.alpha_bar) != self.T + 1:
            raise ValueError("schedule arrays do not match T")
        if not ((self.beta > 0) & (self.beta < 1)).all():
            raise ValueError("beta must lie in (0, 1)")
        if self.alpha_bar[0] != 1.0 or not (np.diff(self.alpha_bar) < 0).all():
            raise ValueError("alpha_bar must start at 1 and strictly decrease")

    def params(self) -> dict:
        return {"T": self.T, "timesteps": [int(t) for t in self.timesteps]}


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = DEFAULT_GUIDANCE

    def __post_init__(self):
        if self.w < 0:
            raise ValueError("guidance scale must be nonnegative")


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear-beta schedule over ``T`` steps."""
    if T < 2:
        raise ValueError("T must be at least 2")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"invalid beta range ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return NoiseSchedule(T, beta, alpha_bar, np.arange(T + 1))


def inference_schedule(T: int = 50, T_train: int = 1000, beta_start: float = 1e-4,
                       beta_end: float = 0.02) -> NoiseSchedule:
    """``T``-step schedule taken with a fixed stride from a ``T_train`` one."""
    if T_train % T:
        raise ValueError("T must divide T_train")
    full = build_schedule(T_train, beta_start, beta_end)
    idx = np.arange(0, T_train + 1, T_train // T)
    ab = full.alpha_bar[idx]
    return NoiseSchedule(T, 1.0 - ab[1:] / ab[:-1], ab, idx)


def cfg_predict(eps_cond, eps_uncond, w: float):
    """Guided noise ``w * eps_cond + (1 - w) * eps_uncond``.

    At ``w == 1`` the conditional prediction is returned untouched, so the
    unconditional branch cannot leak in (not even as ``-0.0 + 0.0``).
    """
    if np.shape(_data(eps_cond)) != np.shape(_data(eps_uncond)):
        raise ValueError(f"cfg_predict: shape mismatch {np.shape(_data(eps_cond))} "
                         f"vs {np.shape(_data(eps_uncond))}")
    if w == 1.0:
        return eps_cond
    if isinstance(eps_cond, Tensor) or isinstance(eps_uncond, Tensor):
        return tn.add(tn.scale(eps_cond, w), tn.scale(eps_uncond, 1.0 - w))
    return w * np.asarray(eps_cond) + (1.0 - w) * np.asarray(eps_uncond)


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def transition_coeffs(sched: NoiseSchedule, src: int, dst: int, as_printed: bool = False):
    """``(a, b)`` with ``z_dst = a * z_src + b * eps`` for the DDIM ODE step.

    ``as_printed`` drops the ``sqrt(alpha_bar[dst])`` factor on ``b``; that
    variant is not the inverse of the forward step and exists only for
    comparison.
    """
    ab_s, ab_d = sched.alpha_bar[src], sched.alpha_bar[dst]
    a = np.sqrt(ab_d / ab_s)
    gap = np.sqrt((1 - ab_d) / ab_d) - np.sqrt((1 - ab_s) / ab_s)
    b = gap if as_printed else np.sqrt(ab_d) * gap
    return float(a), float(b)


def _affine(z, a, eps, b):
    if isinstance(z, Tensor) or isinstance(eps, Tensor):
        return tn.add(tn.scale(z, a), tn.scale(eps, b))
    return a * np.asarray(z, dtype=np.float64) + b * np.asarray(eps, dtype=np.float64)


def ddim_step(z_t, t: int, eps, sched: NoiseSchedule):
    """Deterministic DDIM update from index ``t`` to ``t - 1``."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"ddim_step: t={t} outside [1, {sched.T}]")
    a, b = transition_coeffs(sched, t, t - 1)
    return _affine(z_t, a, eps, b)


def ddim_invert_step(z_t, t: int, eps, sched: NoiseSchedule, as_printed: bool = False):
    """Inverse DDIM update from index ``t`` to ``t + 1`` (frozen ``eps``)."""
    if not 0 <= t <= sched.T - 1:
        raise ValueError(f"ddim_invert_step: t={t} outside [0, {sched.T - 1}]")
    a, b = transition_coeffs(sched, t, t + 1, as_printed=as_printed)
    return _affine(z_t, a, eps, b)


EpsFn = Callable[[np.ndarray, int, np.ndarray], np.ndarray]


DEFAULT_FIXED_POINT_ITERS = 2


def invert_trajectory(z0, cond, sched: NoiseSchedule, eps_fn: EpsFn, w: float = INVERSION_GUIDANCE,
                      null=None, as_printed: bool = False,
                      fixed_point_iters: int = DEFAULT_FIXED_POINT_ITERS) -> list[np.ndarray]:
    """Pivotal trajectory ``[z_0, z_1, ..., z_T]`` by DDIM inversion.

    ``eps_fn(z, label, cond)`` is the noise predictor.  Inverting out of
    index ``i`` queries it at the destination label ``timesteps[i + 1]``
    because index 0 (the clean latent) has no valid label of its own.

    The plain inverse step freezes ``eps`` at the source latent, while the
    forward step that must undo it evaluates ``eps`` at the destination.
    ``fixed_point_iters`` re-solves ``z' = a z + b eps(z')`` that many extra
    times, which shrinks the round-trip error by orders of magnitude on
    the high-noise steps.  ``0`` gives the textbook inversion.
    """
    if fixed_point_iters < 0:
        raise ValueError("fixed_point_iters must be nonnegative")

    def guided(z, label):
        eps = eps_fn(z, label, cond)
        if w != 1.0:
            if null is None:
                raise ValueError("guided inversion needs a null embedding")
            eps = cfg_predict(eps, eps_fn(z, label, null), w)
        return eps

    z = np.array(z0, dtype=np.float64)
    states = [z.copy()]
    for i in range(sched.T):
        label = int(sched.timesteps[i + 1])
        nxt = ddim_invert_step(z, i, guided(z, label), sched, as_printed=as_printed)
        for _ in range(fixed_point_iters):
            nxt = ddim_invert_step(z, i, guided(nxt, label), sched, as_printed=as_printed)
        z = nxt
        states.append(z.copy())
    return states


def denoise(z_T, cond, sched: NoiseSchedule, eps_fn: EpsFn, w: float = 1.0, nulls=None,
            return_states: bool = False):
    """Plain guided DDIM sampling from index ``T`` down to 0.

    ``nulls`` is one null embedding shared by every step, or a sequence
    indexed so that ``nulls[T - t]`` serves step ``t``.  Ignored at ``w == 1``.
    """
    z = np.array(z_T, dtype=np.float64)
    states = [z.copy()]
    for t in range(sched.T, 0, -1):
        label = int(sched.timesteps[t])
        eps = eps_fn(z, label, cond)
        if w != 1.0:
            null = nulls if not isinstance(nulls, (list, tuple)) else nulls[sched.T - t]
            if null is None:
                raise ValueError("guided denoising needs a null embedding")
            eps = cfg_predict(eps, eps_fn(z, label, null), w)
        z = ddim_step(z, t, eps, sched)
        states.append(z.copy())
    return states if return_states else z


def write_trajectory(stem, states, meta: dict) -> None:
    """``<stem>.bin`` with one tensor record per state plus ``<stem>.json``."""
    tn.write_tensors(f"{stem}.bin", states)
    with open(f"{stem}.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def read_trajectory(stem):
    with open(f"{stem}.json") as f:
        meta = json.load(f)
    return tn.read_tensors(f"{stem}.bin"), meta
