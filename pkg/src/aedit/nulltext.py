"""Per-step null-text optimization against a pivotal inversion trajectory.

Everything is batched over samples: latents are ``(B, 32, 32)``, prompt
matrices ``(B, L, d)`` and the optimized nulls ``(B, T, L, d)`` with
index ``k`` serving denoising step ``t = T - k``.  Each sample's loss only
touches its own null embedding, so summing losses across the batch yields
exactly the per-sample gradients.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .diffusion import NoiseSchedule, cfg_predict, ddim_step, transition_coeffs

DEFAULT_ETA = 5e-4
DEFAULT_INNER_ITERS = 10
MAX_HALVINGS = 3


@dataclass
class NullTextSet:
    """Optimized null embeddings for one sample, ordered ``t = T .. 1``."""

    embeddings: np.ndarray
    eta: float = DEFAULT_ETA
    inner_iters: int = DEFAULT_INNER_ITERS
    w: float = 7.5

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 3:
            raise ValueError("embeddings must be (T, L, d)")
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be at least 1")
        if not np.isfinite(self.embeddings).all():
            raise ValueError("null embeddings must be finite")

    @property
    def T(self) -> int:
        return len(self.embeddings)

    def for_step(self, t: int) -> np.ndarray:
        return self.embeddings[self.T - t]


@dataclass
class NullOptResult:
    nulls: np.ndarray                 # (B, T, L, d)
    loss_initial: np.ndarray          # (B, T) inner-loop loss before the first update
    loss_final: np.ndarray            # (B, T) after the last accepted update
    halvings: np.ndarray              # (B, T)
    states: list = field(default_factory=list)   # z-bar_t, index T - t

    def sets(self, eta, inner_iters, w) -> list[NullTextSet]:
        return [NullTextSet(n, eta, inner_iters, w) for n in self.nulls]


def _step_loss(model, z_bar, t, label, eps_cond, null, target, sched, w, scale=1.0):
    """Per-sample reconstruction loss, its gradient w.r.t. ``null``, and z_{t-1}.

    ``scale`` multiplies the loss (and so the gradient); it never moves the
    minimizer.
    """
    tape = tn.Tape()
    phi = tape.watch(null)
    eps_null, _ = model.predict_noise(z_bar, label, phi)
    eps = cfg_predict(eps_cond, eps_null, w)
    z_prev = ddim_step(z_bar, t, eps, sched)
    diff = tn.sub(z_prev, target)
    per_sample = scale * np.einsum("bij,bij->b", diff.data, diff.data)
    if not diff.tracked:  # w == 1: the null branch is cut out entirely
        return per_sample, np.zeros_like(null), np.array(tn.as_tensor(z_prev).data)
    (grad,) = tn.backward(tn.scale(tn.squared_frobenius_norm(diff), scale), [phi])
    return per_sample, grad, z_prev.data


def loss_scale(sched: NoiseSchedule, t: int, units: str) -> float:
    """Factor turning ``|z_{t-1} - z*_{t-1}|^2`` into the requested units.

    ``"noise"`` divides by the squared eps coefficient of the DDIM step, so
    the loss reads ``|eps_guided - eps_needed|^2`` and one learning rate
    suits every step; ``"latent"`` leaves it as is.
    """
    if units == "latent":
        return 1.0
    if units == "noise":
        return 1.0 / transition_coeffs(sched, t, t - 1)[1] ** 2
    raise ValueError(f"unknown loss units {units!r}")


def optimize_null_texts(model, trajectory, cond, sched: NoiseSchedule, null_init, w: float = 7.5,
                        eta: float = DEFAULT_ETA, inner_iters: int = DEFAULT_INNER_ITERS,
                        max_halvings: int = MAX_HALVINGS, units: str = "noise") -> NullOptResult:
    """Fit one null embedding per denoising step so guided DDIM tracks the pivot.

    ``trajectory[t]`` is the batch of pivotal latents at index ``t``.  At each
    step the null gets ``inner_iters`` gradient steps of size ``eta``; a step
    that raises a sample's loss halves that sample's rate (at most
    ``max_halvings`` times per diffusion step) and is retried, and a step
    that still raises the loss is rejected.  The accepted null then drives
    the update of z-bar and seeds the next step.  Losses are measured in
    ``units`` (see :func:`loss_scale`).
    """
    if trajectory is None or len(trajectory) != sched.T + 1:
        raise ValueError(f"trajectory must hold T+1={sched.T + 1} states")
    if inner_iters < 1:
        raise ValueError("inner_iters must be at least 1")
    z_bar = np.array(trajectory[sched.T], dtype=np.float64)
    B = len(z_bar)
    cond = np.broadcast_to(np.asarray(cond, dtype=np.float64), (B,) + np.shape(cond)[-2:])
    null = np.array(np.broadcast_to(null_init, cond.shape), dtype=np.float64)

    T = sched.T
    nulls = np.zeros((B, T) + cond.shape[1:])
    loss0, loss1, halv = np.zeros((B, T)), np.zeros((B, T)), np.zeros((B, T), dtype=int)
    states = [z_bar.copy()]
    for t in range(T, 0, -1):
        k = T - t
        label = int(sched.timesteps[t])
        target = np.asarray(trajectory[t - 1], dtype=np.float64)
        eps_cond = model.eps(z_bar, label, cond)
        sc = loss_scale(sched, t, units)
        loss, grad, z_prev = _step_loss(model, z_bar, t, label, eps_cond, null, target, sched, w, sc)
        loss0[:, k] = loss
        rate = np.full(B, float(eta))
        used = np.zeros(B, dtype=int)
        if w != 1.0:
            for _ in range(inner_iters):
                cand = null - rate[:, None, None] * grad
                c_loss, c_grad, c_prev = _step_loss(model, z_bar, t, label, eps_cond, cand, target, sched, w, sc)
                worse = c_loss > loss
                while worse.any() and (used[worse] < max_halvings).any():
                    retry = worse & (used < max_halvings)
                    rate[retry] *= 0.5
                    used[retry] += 1
                    cand[retry] = null[retry] - rate[retry, None, None] * grad[retry]
                    c_loss, c_grad, c_prev = _step_loss(model, z_bar, t, label, eps_cond, cand, target, sched, w, sc)
                    worse = c_loss > loss
                keep = ~worse
                null[keep], loss[keep], grad[keep], z_prev[keep] = cand[keep], c_loss[keep], c_grad[keep], c_prev[keep]
        if not np.isfinite(null).all():
            raise FloatingPointError(f"null-text optimization diverged at step {t}")
        nulls[:, k] = null
        loss1[:, k] = loss
        halv[:, k] = used
        z_bar = z_prev
        states.append(z_bar.copy())
    return NullOptResult(nulls, loss0, loss1, halv, states)


def reconstruct(model, z_T, cond, nulls, sched: NoiseSchedule, w: float = 7.5, return_states: bool = False):
    """Guided DDIM from ``z_T`` using a per-step null embedding.

    ``nulls`` is ``(B, T, L, d)`` (or ``(T, L, d)`` / a :class:`NullTextSet`
    for a single sample).  At ``w == 1`` the nulls are never evaluated.
    """
    single = np.ndim(z_T) == 2
    z = np.array(z_T, dtype=np.float64)[None] if single else np.array(z_T, dtype=np.float64)
    if isinstance(nulls, NullTextSet):
        nulls = nulls.embeddings
    nulls = np.asarray(nulls, dtype=np.float64)
    if nulls.ndim == 3:
        nulls = nulls[None]
    if nulls.shape[1] != sched.T:
        raise ValueError(f"need {sched.T} null embeddings, got {nulls.shape[1]}")
    B = len(z)
    cond = np.broadcast_to(np.asarray(cond, dtype=np.float64), (B,) + np.shape(cond)[-2:])
    nulls = np.broadcast_to(nulls, (B,) + nulls.shape[1:])
    states = [z.copy()]
    for t in range(sched.T, 0, -1):
        label = int(sched.timesteps[t])
        eps = model.eps(z, label, cond)
        if w != 1.0:
            eps = cfg_predict(eps, model.eps(z, label, nulls[:, sched.T - t]), w)
        z = ddim_step(z, t, eps, sched)
        states.append(z.copy())
    out = z[0] if single else z
    if return_states:
        return out, [s[0] for s in states] if single else states
    return out


def save_null_set(path, nulls: NullTextSet) -> None:
    header = json.dumps({"T": nulls.T, "eta": nulls.eta, "inner_iters": nulls.inner_iters,
                         "w": nulls.w}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for e in nulls.embeddings:
            tn.write_tensor(f, e)


def load_null_set(path) -> NullTextSet:
    with open(path, "rb") as f:
        (n,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(n))
        emb = [tn.read_tensor(f) for _ in range(header["T"])]
    return NullTextSet(np.stack(emb), header["eta"], header["inner_iters"], header["w"])
