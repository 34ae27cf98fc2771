"""Reconstruction fidelity: plain inversion at w=1, then guided denoising with and without fitted nulls.

Usage: python3 demos/reconstruction.py [n_samples]
"""
import sys

import numpy as np

from aedit.pipeline import reconstruct_only
from aedit.reference import reference_model
from aedit.synthbench import make_dataset

n = int(sys.argv[1]) if len(sys.argv) > 1 else 8
model = reference_model()
ds = make_dataset(300, seed=0)[:n]
z0, caps = np.stack([s.latent for s in ds]), [s.caption for s in ds]

for label, kw in (("w=1, no guidance", dict(w=1.0, null_opt=False)),
                  ("w=7.5, constant null", dict(null_opt=False)),
                  ("w=7.5, fitted nulls", {})):
    _, rep = reconstruct_only(model, z0, caps, **kw)
    rel = rep["relative_mse"]
    print(f"{label:22s} median relative MSE {np.median(rel):.2e}  worst {rel.max():.2e}")
