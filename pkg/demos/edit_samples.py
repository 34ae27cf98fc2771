"""Edit one benchmark sample per group and show which events are present before and after.

Usage: python3 demos/edit_samples.py [out_dir]
The first run trains the reference model (about 10 minutes) and caches it.
"""
import sys
from pathlib import Path

import numpy as np

from aedit.pipeline import edit, write_pgm
from aedit.promptedit import EditSpec
from aedit.reference import reference_model
from aedit.synthbench import EVENT_GAIN, alignment_score, make_dataset, pattern_bank

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-edits")
out.mkdir(parents=True, exist_ok=True)
model = reference_model(progress=lambda e, loss: print(f"  epoch {e} loss {loss:.4f}", flush=True))
bank = pattern_bank()

samples = make_dataset(300, seed=0)
picked = [next(s for s in samples if s.group == g) for g in ("add", "delete", "replace")]
results = edit(model, np.stack([s.latent for s in picked]),
               [EditSpec.from_dict(s.edit_spec_dict()) for s in picked])


def events(z, keys):
    coef = np.tensordot(bank, z, axes=([1, 2], [0, 1])) / EVENT_GAIN
    return "  ".join(f"{k}:{coef[k]:+.2f}" for k in keys)


for s, r in zip(picked, results):
    keys = sorted(set(s.caption) | set(s.desired_caption))
    print(f"{s.group}: {s.caption} -> {s.desired_caption}")
    print(f"  before  {events(s.latent, keys)}   alignment {alignment_score(s.latent, s.desired_caption):.3f}")
    print(f"  after   {events(r.edited, keys)}   alignment {alignment_score(r.edited, s.desired_caption):.3f}")
    write_pgm(out / f"{s.group}-before.pgm", s.latent)
    write_pgm(out / f"{s.group}-after.pgm", r.edited)
print(f"images in {out}/")
