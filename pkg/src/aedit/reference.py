"""The reference model: package defaults trained on the training split, cached on disk."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .denoiser import Denoiser, DenoiserConfig, TrainConfig, load_checkpoint, save_checkpoint, train
from .synthbench import make_dataset

log = logging.getLogger(__name__)

TRAIN_N, TRAIN_SEED = 2000, 1


def reference_key(cfg: DenoiserConfig, tcfg: TrainConfig, n: int = TRAIN_N, data_seed: int = TRAIN_SEED) -> str:
    blob = json.dumps({"model": asdict(cfg), "train": asdict(tcfg), "n": n, "data_seed": data_seed},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def reference_model(cache_dir=None, cfg: DenoiserConfig | None = None, tcfg: TrainConfig | None = None,
                    progress=None) -> Denoiser:
    """Train (or load from ``cache_dir``) the denoiser used by the benchmarks.

    The cache file name carries a hash of every setting that affects the
    weights, so a changed default retrains instead of reusing stale weights.
    ``cache_dir=None`` falls back to ``$AEDIT_CACHE`` or ``~/.cache/aedit``.
    """
    cfg, tcfg = cfg or DenoiserConfig(), tcfg or TrainConfig()
    if cache_dir is None:
        cache_dir = os.environ.get("AEDIT_CACHE") or Path.home() / ".cache" / "aedit"
    path = Path(cache_dir) / f"reference-{reference_key(cfg, tcfg)}.aedn"
    if path.exists():
        return load_checkpoint(path)
    log.info("training reference model into %s", path)
    samples = make_dataset(TRAIN_N, seed=TRAIN_SEED)
    res = train(np.stack([s.latent for s in samples]), [s.caption for s in samples], cfg, tcfg,
                progress=progress, components=[s.components() for s in samples])
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_checkpoint(tmp, res.model, {"losses": res.losses, "initial_loss": res.initial_loss})
    os.replace(tmp, path)
    return res.model
