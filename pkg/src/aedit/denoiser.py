"""Toy conditional noise predictor with exposed cross-attention maps.

The 32x32 latent is cut into 64 patches of 4x4 cells.  Each patch becomes a
token; two blocks of (cross-attention to the prompt rows, feed-forward)
refine them, with the attention output added back to the patch tokens so
each region reads the prompt rows it attends to.  A linear read of the
whole latent is added to every token, since a patch-local stack has no
cheap way to see patterns that span several patches.

Each patch token is decoded back to its own cells.  On top of that local
path sits a sum over learned directions in latent space: one presence gate
per direction is fed by the attention read-outs pooled over cells and
blocks and by the latent's own coefficient along that direction, so at low noise the latent rather than the prompt decides what
is present.  Present directions get a time-dependent mean and are pulled
off the white-noise prior, which a time-dependent scalar skip (started at
the Wiener gain for data of variance ``skip_var``) supplies.  Every output
path starts at zero.  All math goes through :mod:`aedit.tensor`, so any
input (prompt matrix, latent, weights) can be differentiated.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as tn
from .diffusion import NoiseSchedule, build_schedule
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"AEDN"

SOT, WORD, EOT = "sot", "word", "eot"
POSITIVE, NEGATIVE, NONE = "positive", "negative", "none"


@dataclass(frozen=True)
class DenoiserConfig:
    vocab_size: int = 16
    prompt_len: int = 8
    d: int = 32
    hidden: int = 64
    heads: int = 4
    ff: int = 128
    d_time: int = 32
    latent_size: int = 32
    patch: int = 4
    n_blocks: int = 2
    T_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    embed_std: float = 1.0
    time_knots: int = 17
    skip_var: float = 0.0025  # per-cell variance of the latent off the pattern span
    prior_skip: bool = True
    text_residual: bool = True  # add the cross-attention output to the patch tokens

    @property
    def sot_id(self) -> int:
        return self.vocab_size

    @property
    def eot_id(self) -> int:
        return self.vocab_size + 1

    @property
    def n_cells(self) -> int:
        return (self.latent_size // self.patch) ** 2

    @property
    def d_z(self) -> int:
        return self.patch * self.patch

    def train_schedule(self) -> NoiseSchedule:
        return build_schedule(self.T_train, self.beta_start, self.beta_end)


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple]:
    """Parameter names and shapes, in checkpoint order."""
    h, d = cfg.hidden, cfg.d
    shapes = {
        "token_table": (cfg.vocab_size + 2, d),
        "time_knots": (cfg.time_knots, cfg.d_time),
        "w_time": (cfg.d_time, h), "b_time": (h,),
        "w_in": (cfg.d_z, h), "b_in": (h,), "pos": (cfg.n_cells, h),
        "w_read": (cfg.latent_size ** 2, h),
    }
    for i in range(cfg.n_blocks):
        shapes.update({
            f"b{i}.q": (h, h), f"b{i}.k": (d, h), f"b{i}.v": (d, h),
            f"b{i}.w1": (h, cfg.ff), f"b{i}.c1": (cfg.ff,),
            f"b{i}.w2": (cfg.ff, h), f"b{i}.c2": (h,),
        })
        if cfg.text_residual:
            shapes[f"b{i}.o"] = (h, h)
    shapes.update({
        "w_out": (h, cfg.d_z), "b_out": (cfg.d_z,),
        "w_g": (h, h), "c_g": (h,), "w_s": (h, h),
        "w_mod": (h, 5 * h), "c_mod": (5 * h,),
        "w_lin": (h, cfg.latent_size ** 2), "w_dec": (h, cfg.latent_size ** 2),
        "w_skip": (h, 1), "b_skip": (1,),
    })
    return shapes


def init_params(cfg: DenoiserConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "token_table":
            p = rng.standard_normal(shape) * cfg.embed_std / np.sqrt(cfg.d)
        elif name == "time_knots":
            p = rng.standard_normal(shape)
        elif name == "pos":
            p = 0.5 * rng.standard_normal(shape)
        elif name in ("w_out", "b_out", "w_dec", "w_lin", "w_skip") or len(shape) == 1:
            p = np.zeros(shape)
        else:
            p = rng.standard_normal(shape) / np.sqrt(shape[0])
            if name.endswith((".o", ".w2")):
                p *= 0.5  # residual branches start small
        params[name] = p
    return params


# -- prompt embeddings ---------------------------------------------------------

@dataclass(frozen=True)
class PromptEmbedding:
    """``L x d`` prompt matrix laid out as SOT, caption words, EOT padding."""

    matrix: np.ndarray
    roles: tuple
    mask: tuple
    tokens: tuple = ()

    def __post_init__(self):
        L = len(self.roles)
        if self.matrix.shape[0] != L or len(self.mask) != L:
            raise ValueError("roles/mask length must equal the number of rows")
        if self.roles[0] != SOT or self.roles[-1] != EOT:
            raise ValueError("prompt must start with SOT and end with EOT")
        n_words = self.roles.count(WORD)
        expected = (SOT,) + (WORD,) * n_words + (EOT,) * (L - 1 - n_words)
        if tuple(self.roles) != expected:
            raise ValueError("word rows must be contiguous after SOT, EOT rows trailing")
        for role, tag in zip(self.roles, self.mask):
            if role != WORD and tag != NONE:
                raise ValueError("only word rows may be tagged positive/negative")

    @property
    def word_rows(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == WORD]

    @property
    def eot_rows(self) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r == EOT]

    def rows_tagged(self, tag: str) -> list[int]:
        return [i for i, m in enumerate(self.mask) if m == tag]

    def with_matrix(self, matrix: np.ndarray) -> "PromptEmbedding":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != self.matrix.shape:
            raise ValueError(f"matrix shape {matrix.shape} != {self.matrix.shape}")
        return replace(self, matrix=matrix)


def embed_prompt(token_table: np.ndarray, caption, cfg: DenoiserConfig) -> PromptEmbedding:
    caption = [int(c) for c in caption]
    L = cfg.prompt_len
    if len(caption) > L - 2:
        raise ValueError(f"caption of {len(caption)} tokens exceeds {L - 2}")
    for c in caption:
        if not 0 <= c < cfg.vocab_size:
            raise ValueError(f"unknown token id {c}")
    ids = [cfg.sot_id] + caption + [cfg.eot_id] * (L - 1 - len(caption))
    roles = (SOT,) + (WORD,) * len(caption) + (EOT,) * (L - 1 - len(caption))
    mask = (NONE,) + (POSITIVE,) * len(caption) + (NONE,) * (L - 1 - len(caption))
    return PromptEmbedding(np.array(token_table[ids], dtype=np.float64), roles, mask, tuple(caption))


# -- forward pass --------------------------------------------------------------

@dataclass
class AttentionRecord:
    """Cross-attention maps, one ``(B, heads, cells, L)`` tensor per block."""

    maps: list
    step: int | None = None

    def mean_map(self):
        """Head- and block-averaged map, shape ``(B, cells, L)``; stays on the tape."""
        total = None
        for m in self.maps:
            s = tn.sum(m, axis=1)
            total = s if total is None else tn.add(total, s)
        n = len(self.maps) * self.maps[0].shape[1]
        return tn.scale(total, 1.0 / n)


def patchify(z, cfg: DenoiserConfig):
    n, p = cfg.latent_size // cfg.patch, cfg.patch
    B = z.shape[0]
    x = tn.reshape(z, (B, n, p, n, p))
    x = tn.transpose(x, (0, 1, 3, 2, 4))
    return tn.reshape(x, (B, n * n, p * p))


def unpatchify(x, cfg: DenoiserConfig):
    n, p = cfg.latent_size // cfg.patch, cfg.patch
    B = x.shape[0]
    x = tn.reshape(x, (B, n, n, p, p))
    x = tn.transpose(x, (0, 1, 3, 2, 4))
    return tn.reshape(x, (B, n * p, n * p))


def _heads(x, H):
    B, N, h = x.shape
    return tn.transpose(tn.reshape(x, (B, N, H, h // H)), (0, 2, 1, 3))


def _merge(x):
    B, H, N, dh = x.shape
    return tn.reshape(tn.transpose(x, (0, 2, 1, 3)), (B, N, H * dh))


def _attend(q, k, v, H):
    """Multi-head attention; returns (output, probabilities)."""
    qh, kh, vh = _heads(q, H), _heads(k, H), _heads(v, H)
    dh = qh.shape[-1]
    scores = tn.scale(tn.matmul(qh, tn.transpose(kh)), 1.0 / np.sqrt(dh))
    probs = tn.row_softmax(scores)
    return _merge(tn.matmul(probs, vh)), probs


def wiener_gain(t, cfg: DenoiserConfig) -> np.ndarray:
    """``E[eps | z_t] / z_t`` when the clean latent is white with variance ``skip_var``."""
    ab = cfg.train_schedule().alpha_bar[np.asarray(t)]
    return np.sqrt(1.0 - ab) / (1.0 - ab + ab * cfg.skip_var)


def time_basis(cfg: DenoiserConfig) -> np.ndarray:
    """``(T_train, time_knots)`` hat functions; row ``t-1`` interpolates label ``t``.

    The time embedding table is ``time_basis @ time_knots``: piecewise linear
    in log signal-to-noise ratio, so every training step also teaches its
    neighbours and the fast-changing low-noise end gets as many knots as
    the rest.
    """
    key = (cfg.T_train, cfg.time_knots, cfg.beta_start, cfg.beta_end)
    if key not in _BASIS:
        ab = cfg.train_schedule().alpha_bar[1:]
        lsnr = np.log(ab / (1.0 - ab))
        pos = (lsnr[0] - lsnr) / (lsnr[0] - lsnr[-1]) * (cfg.time_knots - 1)
        lo = np.minimum(pos.astype(int), cfg.time_knots - 2)
        frac = pos - lo
        basis = np.zeros((cfg.T_train, cfg.time_knots))
        basis[np.arange(cfg.T_train), lo] = 1 - frac
        basis[np.arange(cfg.T_train), lo + 1] = frac
        basis.setflags(write=False)
        _BASIS[key] = basis
    return _BASIS[key]


_BASIS: dict = {}


def forward(params: dict, z, t, cond, cfg: DenoiserConfig):
    """Batched forward pass.

    ``z`` is ``(B, 32, 32)``, ``t`` an int or ``(B,)`` labels in
    ``[1, T_train]``, ``cond`` a ``(B, L, d)`` prompt matrix.  Returns
    ``(eps, AttentionRecord, mid)`` where ``mid`` is the ``(B, cells, hidden)``
    activation after the first block.
    """
    z, cond = tn.as_tensor(z), tn.as_tensor(cond)
    B = z.shape[0]
    if z.shape[1:] != (cfg.latent_size, cfg.latent_size):
        raise ValueError(f"latent shape {z.shape[1:]} != {(cfg.latent_size,) * 2}")
    if cond.shape != (B, cfg.prompt_len, cfg.d):
        raise ValueError(f"condition shape {cond.shape} != {(B, cfg.prompt_len, cfg.d)}")
    t = np.broadcast_to(np.asarray(t, dtype=int), (B,))
    if (t < 1).any() or (t > cfg.T_train).any():
        raise ValueError(f"timestep labels must lie in [1, {cfg.T_train}]")
    P, H = params, cfg.heads

    S = cfg.latent_size
    x = patchify(z, cfg)
    h = tn.add(tn.add(tn.matmul(x, P["w_in"]), P["b_in"]), P["pos"])
    temb = tn.matmul(tn.matmul(time_basis(cfg)[t - 1], P["time_knots"]), P["w_time"])
    temb = tn.relu(tn.add(temb, P["b_time"]))
    glob = tn.matmul(tn.reshape(z, (B, S * S)), P["w_read"])
    h = tn.add(h, tn.reshape(tn.add(temb, glob), (B, 1, cfg.hidden)))

    maps, mid, pooled = [], None, None
    for i in range(cfg.n_blocks):
        b = f"b{i}."
        ca, probs = _attend(tn.matmul(h, P[b + "q"]), tn.matmul(cond, P[b + "k"]),
                            tn.matmul(cond, P[b + "v"]), H)
        maps.append(probs)
        m = tn.mean(ca, axis=1)
        pooled = m if pooled is None else tn.add(pooled, m)
        if cfg.text_residual:
            h = tn.add(h, tn.matmul(ca, P[b + "o"]))
        f = tn.relu(tn.add(tn.matmul(h, P[b + "w1"]), P[b + "c1"]))
        h = tn.add(h, tn.add(tn.matmul(f, P[b + "w2"]), P[b + "c2"]))
        if i == 0:
            mid = h
    local = unpatchify(tn.add(tn.matmul(h, P["w_out"]), P["b_out"]), cfg)
    # Each read-out direction j gets a presence gate s_j in (0, 1) fed by
    # the prompt summary (seen only through the attention maps) and by a
    # quadratic in the latent's own coefficient, with time-dependent weights.
    # Present directions are pulled off the white-noise prior (slope) and
    # given a mean (offset); saturation makes the cancellation exact.
    g = tn.relu(tn.add(tn.matmul(pooled, P["w_g"]), P["c_g"]))
    gates = tn.add(tn.matmul(temb, P["w_mod"]), P["c_mod"])
    hd = cfg.hidden
    q2, q1, bias, slope, off = (tn.slice(gates, (slice(None), slice(k * hd, (k + 1) * hd)))
                                for k in range(5))
    logit = tn.add(tn.add(tn.matmul(g, P["w_s"]), bias),
                   tn.mul(glob, tn.add(tn.mul(glob, q2), q1)))
    present = tn.sigmoid(logit)
    prior = wiener_gain(t, cfg) if cfg.prior_skip else np.ones(B)
    lin = tn.matmul(tn.mul(tn.mul(glob, present), slope), P["w_lin"])
    lin = tn.mul(lin, prior[:, None])
    dec = tn.add(tn.matmul(tn.mul(present, off), P["w_dec"]), lin)
    dec = tn.reshape(dec, (B, S, S))
    skip = tn.add(tn.matmul(temb, P["w_skip"]), P["b_skip"])
    if cfg.prior_skip:
        skip = tn.add(skip, prior[:, None])
    skip = tn.reshape(skip, (B, 1, 1))
    eps = tn.add(tn.add(local, dec), tn.mul(skip, z))
    return eps, AttentionRecord(maps), mid


class Denoiser:
    """A parameter set plus the calls the editing pipeline needs."""

    def __init__(self, cfg: DenoiserConfig | None = None, params: dict | None = None, seed: int = 0):
        self.cfg = cfg or DenoiserConfig()
        self.params = params if params is not None else init_params(self.cfg, seed)
        self.seed = seed

    # prompts
    def embed_prompt(self, caption) -> PromptEmbedding:
        return embed_prompt(self.params["token_table"], caption, self.cfg)

    def null_embedding(self) -> PromptEmbedding:
        return self.embed_prompt([])

    # inference
    def predict_noise(self, z, t, cond):
        """``(eps, AttentionRecord)``; accepts a single latent or a batch.

        ``cond`` may be a :class:`PromptEmbedding`, an array or a tape tensor.
        """
        if isinstance(cond, PromptEmbedding):
            cond = cond.matrix
        single = np.ndim(_raw(z)) == 2
        if single:
            z = tn.reshape(z, (1,) + tuple(np.shape(_raw(z)))) if isinstance(z, Tensor) else np.asarray(z)[None]
            cond = tn.reshape(cond, (1,) + cond.shape) if isinstance(cond, Tensor) else np.asarray(cond)[None]
        elif np.ndim(_raw(cond)) == 2:
            cond = np.broadcast_to(cond, (np.shape(_raw(z))[0],) + np.shape(cond))
        eps, attn, _ = forward(self.params, z, t, cond, self.cfg)
        if single:
            eps = tn.reshape(eps, eps.shape[1:])
        attn.step = int(np.max(t))
        return eps, attn

    def eps(self, z, t, cond) -> np.ndarray:
        """Noise prediction as a plain array (no tape)."""
        e, _ = self.predict_noise(z, t, cond)
        return e.data

    def features(self, z, t: int = 1) -> np.ndarray:
        """Cell-pooled first-block activations under the null prompt, ``(B, hidden)``."""
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 2:
            z = z[None]
        null = np.broadcast_to(self.null_embedding().matrix, (len(z), self.cfg.prompt_len, self.cfg.d))
        _, _, mid = forward(self.params, z, t, null, self.cfg)
        return mid.data.mean(axis=1)

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name in param_shapes(self.cfg):
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()


def _raw(x):
    return x.data if isinstance(x, Tensor) else x


# -- training --------------------------------------------------------------------

class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, msg: str = "loss became non-finite"):
        super().__init__(f"epoch {epoch}: {msg}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 160
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 16
    cond_dropout: float = 0.1
    seed: int = 0
    optimizer: str = "adam"       # "adam" or "sgd" (momentum)
    beta2: float = 0.999
    lr_end: float | None = 1e-4   # geometric decay from lr to lr_end over the run
    row_drop: float = 0.25        # P(one word row shrunk and its event removed); needs components
    row_drop_max: float = 0.3     # shrunk rows keep a factor in [0, row_drop_max)
    eot_jitter: float = 0.25      # P(EOT rows rescaled by a log-uniform factor in eot_range)
    eot_range: tuple = (0.03, 3.0)

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or (self.lr_end is not None and self.lr_end <= 0):
            raise ValueError("epochs, batch_size and lr must be positive")
        for name in ("cond_dropout", "row_drop", "eot_jitter"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        lo, hi = self.eot_range
        if not 0 < lo <= hi or not 0 <= self.row_drop_max < 1:
            raise ValueError("eot_range must be positive and ordered, row_drop_max in [0, 1)")


@dataclass
class TrainResult:
    model: Denoiser
    losses: list = field(default_factory=list)
    initial_loss: float = float("nan")


def _caption_ids(captions, cfg: DenoiserConfig) -> np.ndarray:
    ids = np.full((len(captions), cfg.prompt_len), cfg.eot_id)
    ids[:, 0] = cfg.sot_id
    for i, cap in enumerate(captions):
        ids[i, 1:1 + len(cap)] = cap
    return ids


def loss_and_grads(params: dict, z0, ids, t, noise, cfg: DenoiserConfig, sched: NoiseSchedule,
                   row_scale=None):
    """Per-element epsilon MSE and its gradient for every parameter.

    ``row_scale`` (``(B, L)``, default ones) multiplies the prompt rows.
    """
    tape = Tape()
    leaves = {k: tape.watch(v) for k, v in params.items()}
    ab = sched.alpha_bar[t][:, None, None]
    zt = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * noise
    onehot = np.eye(cfg.vocab_size + 2)[ids]
    if row_scale is not None:
        onehot = onehot * row_scale[..., None]
    cond = tn.matmul(onehot, leaves["token_table"])
    eps, _, _ = forward(leaves, zt, t, cond, cfg)
    loss = tn.scale(tn.squared_frobenius_norm(tn.sub(eps, noise)), 1.0 / noise.size)
    grads = tn.backward(loss, list(leaves.values()))
    return loss.item(), dict(zip(leaves, grads))


def train(latents, captions, cfg: DenoiserConfig | None = None, tcfg: TrainConfig | None = None,
          init: Denoiser | None = None, progress=None, components=None) -> TrainResult:
    """DDPM epsilon-prediction training with Adam (or SGD + momentum).

    A fraction ``cond_dropout`` of each batch is trained against the null
    prompt so the model also serves as the unconditional branch.

    Two prompt-row augmentations teach the model what a rescaled row means.
    With probability ``eot_jitter`` the EOT rows are rescaled and the target
    is unchanged.  When ``components`` is given (per sample, an array of the
    latent's additive parts aligned with the caption), then with probability
    ``row_drop`` one word row is shrunk towards zero and its part is removed
    from the training latent.
    """
    cfg = cfg or (init.cfg if init else DenoiserConfig())
    tcfg = tcfg or TrainConfig()
    latents = np.asarray(latents, dtype=np.float64)
    if len(latents) == 0:
        raise ValueError("empty dataset")
    model = init or Denoiser(cfg, seed=tcfg.seed)
    params = {k: v.copy() for k, v in model.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    second = {k: np.zeros_like(v) for k, v in params.items()}
    step = 0
    sched = cfg.train_schedule()
    rng = np.random.default_rng(tcfg.seed)
    aug = np.random.default_rng([tcfg.seed, 1])
    ids_all = _caption_ids(captions, cfg)
    null_ids = _caption_ids([[]], cfg)[0]
    if components is not None and len(components) != len(latents):
        raise ValueError("components must align with latents")
    log_lo, log_hi = np.log(tcfg.eot_range)

    losses, initial = [], None
    n = len(latents)
    total_steps = tcfg.epochs * -(-n // tcfg.batch_size)
    decay = (tcfg.lr_end / tcfg.lr) ** (1.0 / max(total_steps - 1, 1)) if tcfg.lr_end else 1.0
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            B = len(idx)
            t = rng.integers(1, cfg.T_train + 1, size=B)
            noise = rng.standard_normal((B, cfg.latent_size, cfg.latent_size))
            ids = ids_all[idx].copy()
            dropped = rng.random(B) < tcfg.cond_dropout
            ids[dropped] = null_ids
            z0 = latents[idx]
            scale = np.ones(ids.shape)
            jitter = aug.random(B) < tcfg.eot_jitter
            scale[jitter] = np.where(ids[jitter] == cfg.eot_id,
                                     np.exp(aug.uniform(log_lo, log_hi, (int(jitter.sum()), 1))), 1.0)
            if components is not None:
                z0 = z0.copy()
                for b in np.flatnonzero((aug.random(B) < tcfg.row_drop) & ~dropped):
                    parts = components[idx[b]]
                    if len(parts) == 0:
                        continue
                    j = int(aug.integers(len(parts)))
                    scale[b, 1 + j] = aug.uniform(0.0, tcfg.row_drop_max)
                    z0[b] = z0[b] - parts[j]
            try:
                loss, grads = loss_and_grads(params, z0, ids, t, noise, cfg, sched, scale)
            except tn.NonFiniteError as err:
                raise TrainingDivergence(epoch, str(err)) from err
            if not np.isfinite(loss):
                raise TrainingDivergence(epoch)
            if initial is None:
                initial = loss
            lr = tcfg.lr * decay ** step
            step += 1
            for k in params:
                if tcfg.optimizer == "sgd":
                    velocity[k] = tcfg.momentum * velocity[k] - lr * grads[k]
                    params[k] = params[k] + velocity[k]
                else:
                    velocity[k] = tcfg.momentum * velocity[k] + (1 - tcfg.momentum) * grads[k]
                    second[k] = tcfg.beta2 * second[k] + (1 - tcfg.beta2) * grads[k] ** 2
                    m_hat = velocity[k] / (1 - tcfg.momentum ** step)
                    v_hat = second[k] / (1 - tcfg.beta2 ** step)
                    params[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
            bad = [k for k in params if not np.isfinite(params[k]).all()]
            if bad:
                raise TrainingDivergence(epoch, f"non-finite weights in {bad[0]}")
            total += loss * B
            count += B
        losses.append(total / count)
        log.info("epoch %d loss %.5f", epoch, losses[-1])
        if progress:
            progress(epoch, losses[-1])
    return TrainResult(Denoiser(cfg, params, seed=tcfg.seed), losses, initial)


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, model: Denoiser, extra: dict | None = None) -> None:
    header = {"config": asdict(model.cfg), "seed": model.seed, "params": list(param_shapes(model.cfg))}
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in param_shapes(model.cfg):
            tn.write_tensor(f, model.params[name])


def load_checkpoint(path) -> Denoiser:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a denoiser checkpoint")
        (n,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(n))
        cfg = DenoiserConfig(**header["config"])
        params = {}
        for name, shape in param_shapes(cfg).items():
            arr = tn.read_tensor(f)
            if arr.shape != shape:
                raise ValueError(f"{path}: {name} has shape {arr.shape}, expected {shape}")
            params[name] = arr
    return Denoiser(cfg, params, seed=header.get("seed", 0))
