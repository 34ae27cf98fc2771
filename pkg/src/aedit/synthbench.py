"""Synthetic event-composition benchmark and its toy metrics.

Each of the 16 event tokens owns an oriented grating with its own
(frequency, angle) pair, windowed to its own region of the 32x32 latent:
the tokens sit on a 4x4 grid of centres 8 cells apart and a separable
Hann window 12 cells wide confines each grating, so neighbours overlap at
the window edges (a spectrogram analogue: events occupy time-frequency
regions).  Neighbouring tokens alternate frequency and orientation, which
keeps the pairwise cosine far below the 0.2 bound.  A sample latent is a
gain-weighted sum of 1-3 patterns plus white noise.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .linalg import psd_sqrt

__all__ = [
    "EventPattern", "BenchSample", "gen_event_pattern", "pattern_bank", "make_dataset",
    "alignment_score", "preservation_error", "frechet_distance", "save_dataset",
    "load_dataset", "GROUPS",
]

SIZE = 32
VOCAB_SIZE = 16
NOISE_STD = 0.05
EVENT_GAIN = float(SIZE)  # unit per-cell RMS for a unit-Frobenius pattern
GAIN_RANGE = (0.8, 1.2)
GROUPS = ("add", "delete", "replace")

GRID = 4                  # token centres on a GRID x GRID lattice
SPACING = SIZE // GRID
WINDOW = 12               # Hann window support in cells
_CYCLES = (6, 9)          # grating cycles across the full width, alternating
_ANGLES = (0.0, 0.25 * np.pi, 0.5 * np.pi, 0.75 * np.pi)


@dataclass(frozen=True)
class EventPattern:
    token: int
    pattern: np.ndarray


def _hann(coord, centre):
    u = (coord - centre) / WINDOW
    return np.where(np.abs(u) < 0.5, np.cos(np.pi * u) ** 2, 0.0)


def gen_event_pattern(token: int) -> EventPattern:
    if not 0 <= token < VOCAB_SIZE:
        raise ValueError(f"token id {token} outside [0, {VOCAB_SIZE})")
    r, c = divmod(token, GRID)
    cycles = _CYCLES[(r + c) % 2]
    angle = _ANGLES[(2 * r + c) % len(_ANGLES)]
    y, x = np.mgrid[0:SIZE, 0:SIZE].astype(float)
    centre_y, centre_x = SPACING * r + SPACING / 2 - 0.5, SPACING * c + SPACING / 2 - 0.5
    window = _hann(y, centre_y) * _hann(x, centre_x)
    phase = 0.3 * token
    g = window * np.cos(2 * np.pi * cycles * (np.cos(angle) * x + np.sin(angle) * y) / SIZE + phase)
    return EventPattern(token, g / np.linalg.norm(g))


_BANK = None


def pattern_bank() -> np.ndarray:
    """All patterns stacked, shape ``(VOCAB_SIZE, 32, 32)``."""
    global _BANK
    if _BANK is None:
        _BANK = np.stack([gen_event_pattern(k).pattern for k in range(VOCAB_SIZE)])
        _BANK.setflags(write=False)
    return _BANK


@dataclass
class BenchSample:
    """A latent with its caption and one curated edit.

    ``target_caption``/``negative_positions`` are what the editor receives;
    for deletions the removed token stays in the caption, marked negative.
    ``desired_caption`` lists the events present in ``target_latent``.
    """

    sample_id: int
    group: str
    caption: list[int]
    gains: list[float]
    latent: np.ndarray
    mode: str
    target_caption: list[int]
    negative_positions: list[int]
    desired_caption: list[int]
    target_latent: np.ndarray
    preserved: list[int] = field(default_factory=list)

    def components(self) -> np.ndarray:
        """The noise-free event parts of ``latent``, one per caption token."""
        bank = pattern_bank()
        return np.stack([EVENT_GAIN * g * bank[k] for g, k in zip(self.gains, self.caption)])

    def edit_spec_dict(self) -> dict:
        return {"mode": self.mode, "target_caption": list(self.target_caption),
                "negative_positions": list(self.negative_positions)}


def _group_counts(n: int, group_mix) -> dict:
    if group_mix is None:
        group_mix = {g: 1.0 for g in GROUPS}
    if isinstance(group_mix, dict):
        weights = np.array([float(group_mix.get(g, 0.0)) for g in GROUPS])
    else:
        weights = np.asarray(group_mix, dtype=float)
    if weights.sum() <= 0 or (weights < 0).any():
        raise ValueError("group_mix needs nonnegative weights with a positive sum")
    if np.all(weights == np.round(weights)) and weights.sum() == n:
        counts = weights.astype(int)
    else:
        raw = weights / weights.sum() * n
        counts = np.floor(raw).astype(int)
        for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
            counts[i] += 1
    return dict(zip(GROUPS, (int(c) for c in counts)))


def make_dataset(n: int = 300, seed: int = 0, group_mix=None) -> list[BenchSample]:
    """Deterministic benchmark of ``n`` samples.

    Add-edits go to single-event samples; delete and replace edits to
    samples with two or three events.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    counts = _group_counts(n, group_mix)
    rng = np.random.default_rng(seed)
    groups = np.array([g for g in GROUPS for _ in range(counts[g])])
    groups = groups[rng.permutation(n)]
    bank = pattern_bank()
    samples = []
    for sid, group in enumerate(groups):
        n_events = 1 if group == "add" else int(rng.integers(2, 4))
        tokens = [int(k) for k in rng.choice(VOCAB_SIZE, size=n_events + 1, replace=False)]
        caption, spare = tokens[:n_events], tokens[n_events]
        gains = [float(g) for g in rng.uniform(*GAIN_RANGE, size=n_events)]
        noise = NOISE_STD * rng.standard_normal((SIZE, SIZE))
        clean = EVENT_GAIN * np.tensordot(gains, bank[caption], axes=1)
        latent = clean + noise

        if group == "add":
            g_new = float(rng.uniform(*GAIN_RANGE))
            target_caption = caption + [spare]
            neg = [n_events]
            desired = list(target_caption)
            target = latent + EVENT_GAIN * g_new * bank[spare]
            preserved = list(caption)
        else:
            j = int(rng.integers(n_events))
            removed = caption[j]
            base = latent - EVENT_GAIN * gains[j] * bank[removed]
            if group == "delete":
                target_caption = list(caption)
                desired = caption[:j] + caption[j + 1:]
                target = base
            else:
                target_caption = caption[:j] + [spare] + caption[j + 1:]
                desired = list(target_caption)
                target = base + EVENT_GAIN * gains[j] * bank[spare]
            neg = [j]
            preserved = caption[:j] + caption[j + 1:]
        samples.append(BenchSample(
            sample_id=sid, group=str(group), caption=caption, gains=gains, latent=latent,
            mode=str(group), target_caption=target_caption, negative_positions=neg,
            desired_caption=desired, target_latent=target, preserved=preserved,
        ))
    return samples


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.vdot(a, b) / (na * nb))


def alignment_score(latent, caption) -> float:
    """Mean cosine between the latent and each caption token's pattern."""
    caption = list(caption)
    if not caption:
        raise ValueError("alignment_score needs a nonempty caption")
    z = np.asarray(latent.data if isinstance(latent, tn.Tensor) else latent, dtype=float)
    bank = pattern_bank()
    return float(np.mean([_cosine(z, bank[k]) for k in caption]))


def preservation_error(edited, original, preserved) -> float:
    """Mean squared difference restricted to the preserved patterns' span."""
    edited = np.asarray(edited, dtype=float)
    original = np.asarray(original, dtype=float)
    if edited.shape != original.shape:
        raise ValueError(f"shape mismatch {edited.shape} vs {original.shape}")
    preserved = list(preserved)
    if not preserved:
        return 0.0
    basis = pattern_bank()[preserved].reshape(len(preserved), -1).T
    q, _ = np.linalg.qr(basis)
    diff = (edited - original).reshape(-1)
    proj = q @ (q.T @ diff)
    return float(proj @ proj / diff.size)


def frechet_distance(feats_a, feats_b) -> float:
    """Fréchet distance between Gaussians fitted to two feature sets.

    Uses ``tr sqrt(Ca Cb) = tr sqrt(Ca^1/2 Cb Ca^1/2)`` so that only
    symmetric PSD square roots are needed.
    """
    a = np.asarray(feats_a, dtype=float)
    b = np.asarray(feats_b, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("feature sets must be (n, dim) with equal dim")
    dim = a.shape[1]
    if len(a) < dim + 1 or len(b) < dim + 1:
        raise ValueError(f"need at least {dim + 1} samples per set for dim {dim}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False).reshape(dim, dim)
    cov_b = np.cov(b, rowvar=False).reshape(dim, dim)
    root_a = psd_sqrt(cov_a)
    middle = root_a @ cov_b @ root_a
    cross = psd_sqrt(0.5 * (middle + middle.T))
    diff = mu_a - mu_b
    fd = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross)
    return float(max(fd, 0.0))


# -- persistence --------------------------------------------------------------

_INDEX_KEYS = ("sample_id", "group", "caption", "gains", "mode", "target_caption",
               "negative_positions", "desired_caption", "preserved")


def save_dataset(path, samples: list[BenchSample], meta: dict | None = None) -> None:
    """``index.json`` plus ``latents.bin`` and ``targets.bin`` (one record each)."""
    os.makedirs(path, exist_ok=True)
    index = {"meta": meta or {}, "samples": [{k: getattr(s, k) for k in _INDEX_KEYS} for s in samples]}
    with open(os.path.join(path, "index.json"), "w") as f:
        json.dump(index, f, indent=1, sort_keys=True)
    tn.write_tensors(os.path.join(path, "latents.bin"), [np.stack([s.latent for s in samples])])
    tn.write_tensors(os.path.join(path, "targets.bin"), [np.stack([s.target_latent for s in samples])])


def load_dataset(path) -> tuple[list[BenchSample], dict]:
    with open(os.path.join(path, "index.json")) as f:
        index = json.load(f)
    (latents,) = tn.read_tensors(os.path.join(path, "latents.bin"))
    (targets,) = tn.read_tensors(os.path.join(path, "targets.bin"))
    samples = [BenchSample(latent=latents[i], target_latent=targets[i], **rec)
               for i, rec in enumerate(index["samples"])]
    return samples, index["meta"]
