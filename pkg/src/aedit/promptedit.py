"""Prompt-side editing: token roles, EOT suppression and the attention loss."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tn
from .denoiser import NEGATIVE, NONE, POSITIVE, WORD, AttentionRecord, PromptEmbedding
from .linalg import svd

MODES = ("delete", "add", "replace", "reconstruct")


@dataclass(frozen=True)
class SuppressionConfig:
    """Singular-value reweighting ``s -> beta * exp(sign * alpha * s) * s``.

    ``sign=+1`` enhances the large singular values, ``sign=-1`` damps them.
    """

    beta: float
    alpha: float
    sign: int = 1

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")


# Deletion damps the dominant directions of the negative/EOT block, addition
# and replacement enhance them.  Flipping a mode's sign gives the other rule
# with the same constants (for deletion: exp(+alpha * s)).
DELETE_SUPPRESSION = SuppressionConfig(beta=1.0, alpha=1.0, sign=-1)
ADD_REPLACE_SUPPRESSION = SuppressionConfig(beta=1.2, alpha=0.001, sign=1)
IDENTITY_SUPPRESSION = SuppressionConfig(beta=1.0, alpha=0.0)


def suppression_for_mode(mode: str, flip: bool = False) -> SuppressionConfig:
    if mode == "delete":
        base = DELETE_SUPPRESSION
    elif mode in ("add", "replace"):
        base = ADD_REPLACE_SUPPRESSION
    elif mode == "reconstruct":
        base = IDENTITY_SUPPRESSION
    else:
        raise ValueError(f"unknown edit mode {mode!r}")
    return replace(base, sign=-base.sign) if flip else base


@dataclass(frozen=True)
class AttnLossConfig:
    lambda_pos: float = 1.0
    lambda_neg: float = 0.5
    embed_lr: float = 0.01

    def __post_init__(self):
        if self.lambda_pos < 0 or self.lambda_neg < 0:
            raise ValueError("attention-loss weights must be nonnegative")


@dataclass(frozen=True)
class EditSpec:
    """What to edit: target caption plus the word positions to change.

    ``negative_positions`` index the caption's words (0 = first word).
    """

    mode: str
    target_caption: tuple
    negative_positions: tuple = ()
    overrides: dict = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown edit mode {self.mode!r}")
        object.__setattr__(self, "target_caption", tuple(int(c) for c in self.target_caption))
        object.__setattr__(self, "negative_positions", tuple(int(i) for i in self.negative_positions))
        if self.mode != "reconstruct" and not self.negative_positions:
            raise ValueError(f"{self.mode} edit needs at least one negative position")
        n = len(self.target_caption)
        for i in self.negative_positions:
            if not 0 <= i < n:
                raise IndexError(f"negative position {i} outside caption of {n} words")
        unknown = set(self.overrides) - {"beta", "alpha", "lambda_pos", "lambda_neg", "embed_lr", "sign"}
        if unknown:
            raise ValueError(f"unknown override keys: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "EditSpec":
        missing = {"mode", "target_caption"} - set(d)
        if missing:
            raise KeyError(f"edit spec missing {sorted(missing)}")
        extra = set(d) - {"mode", "target_caption", "negative_positions", "overrides"}
        if extra:
            raise KeyError(f"edit spec has unknown keys {sorted(extra)}")
        return cls(d["mode"], d["target_caption"], d.get("negative_positions", ()), dict(d.get("overrides", {})))

    @classmethod
    def from_json(cls, path) -> "EditSpec":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return {"mode": self.mode, "target_caption": list(self.target_caption),
                "negative_positions": list(self.negative_positions), "overrides": dict(self.overrides)}

    def suppression(self, flip: bool = False) -> SuppressionConfig:
        base = suppression_for_mode(self.mode, flip)
        return replace(base, **{k: self.overrides[k] for k in ("beta", "alpha", "sign") if k in self.overrides})

    def attn_loss(self, base: AttnLossConfig | None = None) -> AttnLossConfig:
        base = base or AttnLossConfig()
        keys = ("lambda_pos", "lambda_neg", "embed_lr")
        return replace(base, **{k: self.overrides[k] for k in keys if k in self.overrides})


def classify_tokens(P: PromptEmbedding, spec: EditSpec) -> PromptEmbedding:
    """Tag word rows at ``spec.negative_positions`` negative, the rest positive."""
    words = P.word_rows
    neg = set()
    for i in spec.negative_positions:
        if not 0 <= i < len(words):
            raise IndexError(f"negative position {i} outside {len(words)} word rows")
        neg.add(words[i])
    mask = tuple(NONE if r != WORD else (NEGATIVE if i in neg else POSITIVE)
                 for i, r in enumerate(P.roles))
    return replace(P, mask=mask)


def build_suppression_matrix(P: PromptEmbedding):
    """Stack negative word rows (caption order) then EOT rows.

    Returns ``(X, rows)`` where ``rows[i]`` is the prompt row ``X[i]`` came from.
    """
    rows = P.rows_tagged(NEGATIVE) + P.eot_rows
    if not rows:
        raise ValueError("prompt has neither negative nor EOT rows")
    return P.matrix[rows].copy(), rows


def splice_rows(P: PromptEmbedding, X: np.ndarray, rows) -> PromptEmbedding:
    m = P.matrix.copy()
    m[list(rows)] = X
    return P.with_matrix(m)


def regularize_singular_values(sigma, cfg: SuppressionConfig) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    return cfg.beta * np.exp(cfg.sign * cfg.alpha * sigma) * sigma


def eot_suppress(P: PromptEmbedding, spec: EditSpec, cfg: SuppressionConfig | None = None) -> PromptEmbedding:
    """Reweight the singular values of the negative+EOT block and splice it back.

    Positive and SOT rows are copied through untouched.
    """
    P1 = classify_tokens(P, spec)
    cfg = cfg or spec.suppression()
    X, rows = build_suppression_matrix(P1)
    U, s, V = svd(X)
    X_hat = (U * regularize_singular_values(s, cfg)) @ V.T
    return splice_rows(P1, X_hat, rows)


# -- attention maps ----------------------------------------------------------------

def _mean_map(attn):
    if isinstance(attn, AttentionRecord):
        attn = attn.mean_map()
    return tn.as_tensor(attn)


def split_attention(attn, P: PromptEmbedding):
    """Column groups of the head/block-averaged map for positive and negative words.

    ``attn`` is an :class:`AttentionRecord` or an already averaged map whose
    last axis indexes prompt rows.  SOT and EOT columns belong to neither.
    """
    m = _mean_map(attn)
    if m.shape[-1] != len(P.roles):
        raise ValueError(f"map has {m.shape[-1]} columns, prompt has {len(P.roles)} rows")
    groups = []
    for tag in (POSITIVE, NEGATIVE):
        cols = P.rows_tagged(tag)
        if cols:
            parts = [tn.slice(m, (Ellipsis, slice(c, c + 1))) for c in cols]
            groups.append(tn.concat(parts, axis=-1))
        else:
            groups.append(tn.Tensor(np.zeros(m.shape[:-1] + (0,))))
    return groups[0], groups[1]


def attention_loss(a_hat_pos, a_pos, a_hat_neg, a_neg, cfg: AttnLossConfig | None = None):
    """``lambda_pos * |dA_pos|^2 - lambda_neg * |dA_neg|^2`` as a scalar tensor."""
    cfg = cfg or AttnLossConfig()
    a_hat_pos, a_pos = tn.as_tensor(a_hat_pos), tn.as_tensor(a_pos)
    a_hat_neg, a_neg = tn.as_tensor(a_hat_neg), tn.as_tensor(a_neg)
    if a_hat_pos.shape != a_pos.shape or a_hat_neg.shape != a_neg.shape:
        raise ValueError("attention groups must match in shape")
    pos = tn.squared_frobenius_norm(tn.sub(a_hat_pos, a_pos))
    neg = tn.squared_frobenius_norm(tn.sub(a_hat_neg, a_neg))
    return tn.sub(tn.scale(pos, cfg.lambda_pos), tn.scale(neg, cfg.lambda_neg))


def role_masks(prompts) -> tuple[np.ndarray, np.ndarray]:
    """0/1 column masks ``(B, L)`` for positive and negative words."""
    pos = np.array([[m == POSITIVE for m in p.mask] for p in prompts], dtype=float)
    neg = np.array([[m == NEGATIVE for m in p.mask] for p in prompts], dtype=float)
    return pos, neg


def batched_attention_loss(map_hat, map_ref, pos_mask, neg_mask, cfg: AttnLossConfig):
    """Sum over a batch of per-sample attention losses, using column masks.

    Per-sample values (array) are returned alongside the scalar tensor.
    """
    diff = tn.sub(map_hat, map_ref)
    pos = tn.mul(diff, pos_mask[:, None, :])
    neg = tn.mul(diff, neg_mask[:, None, :])
    total = tn.sub(tn.scale(tn.squared_frobenius_norm(pos), cfg.lambda_pos),
                   tn.scale(tn.squared_frobenius_norm(neg), cfg.lambda_neg))
    per = (cfg.lambda_pos * np.einsum("bij,bij->b", pos.data, pos.data)
           - cfg.lambda_neg * np.einsum("bij,bij->b", neg.data, neg.data))
    return total, per


def update_prompt_embedding(matrix, grad, embed_lr: float, frozen_rows=(0,)) -> np.ndarray:
    """One gradient step on the prompt rows; SOT (row 0) stays fixed."""
    matrix = np.asarray(matrix, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if matrix.shape != grad.shape:
        raise ValueError(f"gradient shape {grad.shape} != embedding shape {matrix.shape}")
    step = embed_lr * grad
    step[..., list(frozen_rows), :] = 0.0
    return matrix - step


__all__ = [
    "SuppressionConfig", "AttnLossConfig", "EditSpec", "MODES", "suppression_for_mode",
    "classify_tokens", "build_suppression_matrix", "splice_rows", "regularize_singular_values",
    "eot_suppress", "split_attention", "attention_loss", "role_masks", "batched_attention_loss",
    "update_prompt_embedding", "SOT", "EOT",
]
