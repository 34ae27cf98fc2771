"""How the singular-value reweighting acts on the negative and EOT rows of one prompt.

Usage: python3 demos/suppression.py
"""
import numpy as np

from aedit.denoiser import Denoiser
from aedit.linalg import svd
from aedit.promptedit import EditSpec, build_suppression_matrix, classify_tokens, eot_suppress

model = Denoiser()
caption = [3, 7, 12]
for mode in ("delete", "add", "replace"):
    spec = EditSpec(mode, caption, [1])
    P = classify_tokens(model.embed_prompt(caption), spec)
    X, _ = build_suppression_matrix(P)
    Q = eot_suppress(P, spec)
    Y, _ = build_suppression_matrix(classify_tokens(Q, spec))
    print(f"{mode:8s} singular values {np.round(svd(X)[1], 3)} -> {np.round(svd(Y)[1], 3)}")
    untouched = [i for i in range(len(P.roles)) if i != 2 and i not in P.eot_rows]  # row 2 is the negative token
    print(f"         rows other than the negative token and EOT unchanged: "
          f"{np.array_equal(P.matrix[untouched], Q.matrix[untouched])}")
