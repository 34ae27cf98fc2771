"""End-to-end editing: inversion, null-text fitting, suppression, guided denoising.

The work is batched: ``z0`` is ``(B, 32, 32)`` and ``specs`` holds one
:class:`EditSpec` per sample.  Stages are split so callers (the ablation
harness in particular) can reuse the expensive upstream results when only a
downstream toggle changes.
"""
from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as tn
from .diffusion import (DEFAULT_FIXED_POINT_ITERS, NoiseSchedule, cfg_predict, ddim_step,
                        inference_schedule, invert_trajectory, write_trajectory)
from .nulltext import DEFAULT_ETA, DEFAULT_INNER_ITERS, NullOptResult, optimize_null_texts, reconstruct
from .promptedit import (AttnLossConfig, EditSpec, batched_attention_loss, classify_tokens,
                         eot_suppress, role_masks, update_prompt_embedding)

__all__ = [
    "EditRunConfig", "EditResult", "Prepared", "PipelineError", "prepare", "run_edit", "edit",
    "edit_one", "reconstruct_only", "regenerate", "relative_mse", "write_run_dir", "write_pgm",
]


class PipelineError(RuntimeError):
    """A stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class EditRunConfig:
    T: int = 50
    w_invert: float = 1.0
    w_denoise: float = 7.5
    eta: float = DEFAULT_ETA
    inner_iters: int = DEFAULT_INNER_ITERS
    fixed_point_iters: int = DEFAULT_FIXED_POINT_ITERS
    suppression_flip: bool = False
    attn: AttnLossConfig = field(default_factory=AttnLossConfig)
    seed: int = 0
    null_opt_enabled: bool = True
    eot_sup_enabled: bool = True
    attn_loss_enabled: bool = True

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be positive")
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be at least 1")
        if self.eta <= 0:
            raise ValueError("eta must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EditRunConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown edit config keys {sorted(unknown)}")
        if "attn" in d and isinstance(d["attn"], dict):
            d["attn"] = AttnLossConfig(**d["attn"])
        return cls(**d)


@dataclass
class EditResult:
    edited: np.ndarray                  # z-bar_0 after editing
    reconstruction: np.ndarray          # z-bar_0 from P and the same nulls, no edit
    null_loss: np.ndarray               # (T,) null-opt loss per step, t = T .. 1
    attn_loss: np.ndarray               # (T,) attention loss per step
    prompt_before: np.ndarray           # P
    prompt_after: np.ndarray            # P-hat after the last update
    diagnostics: dict = field(default_factory=dict)
    wall_clock: float = 0.0


@dataclass
class Prepared:
    """Upstream stages shared by every downstream variant of an edit batch."""

    specs: list
    prompts: list                       # classified PromptEmbedding per sample
    trajectory: list                    # T+1 arrays (B, 32, 32)
    nulls: np.ndarray                   # (B, T, L, d)
    null_result: NullOptResult | None
    null_opt: bool


def _schedule(model, cfg: EditRunConfig) -> NoiseSchedule:
    mc = model.cfg
    return inference_schedule(cfg.T, mc.T_train, mc.beta_start, mc.beta_end)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise PipelineError(name, exc) from exc


def prepare(model, z0, specs, cfg: EditRunConfig, null_opt: bool | None = None) -> Prepared:
    """Embed target prompts, invert at ``w_invert`` and fit (or skip) the nulls."""
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.ndim != 3 or len(z0) != len(specs):
        raise ValueError("z0 must be (B, H, W) with one spec per sample")
    null_opt = cfg.null_opt_enabled if null_opt is None else null_opt
    sched = _schedule(model, cfg)

    def embed():
        return [classify_tokens(model.embed_prompt(s.target_caption), s) for s in specs]
    prompts = _stage("embed", embed)
    P = np.stack([p.matrix for p in prompts])
    null = model.null_embedding().matrix
    traj = _stage("invert", invert_trajectory, z0, P, sched, model.eps, w=cfg.w_invert, null=null,
                  fixed_point_iters=cfg.fixed_point_iters)
    if null_opt:
        res = _stage("null-opt", optimize_null_texts, model, traj, P, sched, null,
                     w=cfg.w_denoise, eta=cfg.eta, inner_iters=cfg.inner_iters)
        nulls = res.nulls
    else:
        res = None
        nulls = np.broadcast_to(null, (len(z0), cfg.T) + null.shape)
    return Prepared(list(specs), prompts, traj, nulls, res, null_opt)


def run_edit(model, prep: Prepared, cfg: EditRunConfig, with_reconstruction: bool = True) -> list[EditResult]:
    """Suppression and guided denoising with the attention-loss refinement."""
    t0 = time.perf_counter()
    sched = _schedule(model, cfg)
    specs, prompts = prep.specs, prep.prompts
    B = len(specs)

    def suppress():
        if not cfg.eot_sup_enabled:
            return prompts
        return [eot_suppress(p, s, s.suppression(cfg.suppression_flip)) if s.mode != "reconstruct" else p
                for p, s in zip(prompts, specs)]
    hats = _stage("eot-sup", suppress)
    P = np.stack([p.matrix for p in prompts])
    P_hat = np.stack([p.matrix for p in hats])
    pos_mask, neg_mask = role_masks(prompts)
    attn_cfgs = [s.attn_loss(cfg.attn) for s in specs]
    lam = np.array([[a.lambda_pos, a.lambda_neg, a.embed_lr] for a in attn_cfgs])
    # per-sample lambdas fold into the masks: lambda * |m * d|^2 = |sqrt(lambda) m * d|^2
    pos_w = pos_mask * np.sqrt(lam[:, :1])
    neg_w = neg_mask * np.sqrt(lam[:, 1:2])
    unit = AttnLossConfig(1.0, 1.0, 1.0)
    use_attn = cfg.attn_loss_enabled and any(s.mode != "reconstruct" for s in specs)

    def denoise():
        nonlocal P_hat
        z = np.array(prep.trajectory[sched.T], dtype=np.float64)
        attn_loss = np.zeros((B, sched.T))
        for t in range(sched.T, 0, -1):
            k = sched.T - t
            label = int(sched.timesteps[t])
            null_t = prep.nulls[:, k]
            if use_attn:
                _, ref = model.predict_noise(z, label, P)
                ref_map = ref.mean_map().data
                tape = tn.Tape()
                phat = tape.watch(P_hat)
                _, rec = model.predict_noise(z, label, phat)
                total, per = batched_attention_loss(rec.mean_map(), ref_map, pos_w, neg_w, unit)
                attn_loss[:, k] = per
                (grad,) = tn.backward(total, [phat])
                P_hat = update_prompt_embedding(P_hat, grad * lam[:, 2, None, None], 1.0)
            eps = model.eps(z, label, P_hat)
            if cfg.w_denoise != 1.0:
                eps = cfg_predict(eps, model.eps(z, label, null_t), cfg.w_denoise)
            z = ddim_step(z, t, eps, sched)
        return z, attn_loss
    edited, attn_loss = _stage("denoise", denoise)

    if with_reconstruction:
        recon = _stage("reconstruct", reconstruct, model, prep.trajectory[sched.T], P, prep.nulls,
                       sched, w=cfg.w_denoise)
    else:
        recon = np.full_like(edited, np.nan)
    if prep.null_result is not None:
        null_loss = prep.null_result.loss_final
    else:
        null_loss = np.zeros((B, sched.T))
    wall = time.perf_counter() - t0
    out = []
    for i in range(B):
        diag = {"mode": specs[i].mode, "null_opt": prep.null_opt, "eot_sup": cfg.eot_sup_enabled,
                "attn_loss": use_attn}
        if prep.null_result is not None:
            diag["null_loss_initial"] = prep.null_result.loss_initial[i]
            diag["halvings"] = prep.null_result.halvings[i]
        out.append(EditResult(edited[i], recon[i], null_loss[i], attn_loss[i], P[i], P_hat[i],
                              diag, wall / B))
    return out


def edit(model, z0, specs, cfg: EditRunConfig | None = None, prep: Prepared | None = None) -> list[EditResult]:
    cfg = cfg or EditRunConfig()
    specs = [s if isinstance(s, EditSpec) else EditSpec.from_dict(s) for s in specs]
    t0 = time.perf_counter()
    prep = prep or prepare(model, z0, specs, cfg)
    up = (time.perf_counter() - t0) / len(specs)
    results = run_edit(model, prep, cfg)
    for r in results:
        r.wall_clock += up
    return results


def edit_one(model, z0, spec, cfg: EditRunConfig | None = None) -> EditResult:
    return edit(model, np.asarray(z0)[None], [spec], cfg)[0]


def relative_mse(x, ref) -> np.ndarray:
    x, ref = np.asarray(x, dtype=float), np.asarray(ref, dtype=float)
    axes = tuple(range(x.ndim - 2, x.ndim))
    return ((x - ref) ** 2).mean(axis=axes) / (ref ** 2).mean(axis=axes)


def reconstruct_only(model, z0, captions, cfg: EditRunConfig | None = None,
                     null_opt: bool | None = None, w: float | None = None):
    """Invert, fit nulls (optional) and denoise with the unmodified prompt.

    Returns ``(latents, report)`` where ``report`` carries the relative MSE
    to ``z0`` per sample.
    """
    cfg = cfg or EditRunConfig()
    if w is not None:
        cfg = replace(cfg, w_denoise=w)
    z0 = np.asarray(z0, dtype=np.float64)
    single = z0.ndim == 2
    if single:
        z0, captions = z0[None], [captions]
    specs = [EditSpec("reconstruct", c) for c in captions]
    prep = prepare(model, z0, specs, cfg, null_opt=null_opt)
    P = np.stack([p.matrix for p in prep.prompts])
    out = _stage("reconstruct", reconstruct, model, prep.trajectory[cfg.T], P, prep.nulls,
                 _schedule(model, cfg), w=cfg.w_denoise)
    rel = relative_mse(out, z0)
    report = {"relative_mse": rel, "null_opt": prep.null_opt, "w": cfg.w_denoise}
    if prep.null_result is not None:
        report["null_loss_initial"] = prep.null_result.loss_initial
        report["null_loss_final"] = prep.null_result.loss_final
    return (out[0] if single else out), report


def regenerate(model, captions, seeds, cfg: EditRunConfig | None = None) -> np.ndarray:
    """Sample from noise with the target caption and a constant null prompt."""
    cfg = cfg or EditRunConfig()
    sched = _schedule(model, cfg)
    size = model.cfg.latent_size
    z = np.stack([np.random.default_rng(s).standard_normal((size, size)) for s in seeds])
    P = np.stack([model.embed_prompt(c).matrix for c in captions])
    null = np.broadcast_to(model.null_embedding().matrix, P.shape)
    for t in range(sched.T, 0, -1):
        label = int(sched.timesteps[t])
        eps = cfg_predict(model.eps(z, label, P), model.eps(z, label, null), cfg.w_denoise)
        z = ddim_step(z, t, eps, sched)
    return z


# -- run directories -------------------------------------------------------------

def write_pgm(path, img) -> None:
    """Binary 8-bit graymap, min-max normalised."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    data = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(data.tobytes())


def write_run_dir(path, result: EditResult, prep: Prepared, index: int, config: dict,
                  dump_pgm: bool = True, schedule_params: dict | None = None) -> list:
    """Persist one sample's artifacts; returns the file names written."""
    os.makedirs(path, exist_ok=True)
    files = []

    def p(name):
        files.append(name)
        return os.path.join(path, name)

    with open(p("config.json"), "w") as f:
        json.dump(config, f, indent=2, sort_keys=True)
    T = len(prep.trajectory) - 1
    edit_cfg = config.get("edit", {})
    write_trajectory(os.path.join(path, "trajectory"), [s[index] for s in prep.trajectory],
                     {"T": T, "w": edit_cfg.get("w_invert", 1.0), "schedule": schedule_params,
                      "seed": edit_cfg.get("seed", 0), "order": "z_0 .. z_T"})
    files += ["trajectory.bin", "trajectory.json"]
    tn.write_tensors(p("nulls.bin"), list(np.asarray(prep.nulls[index])))
    tn.write_tensors(p("prompt_before.bin"), [result.prompt_before])
    tn.write_tensors(p("prompt_after.bin"), [result.prompt_after])
    tn.write_tensors(p("output.bin"), [result.edited])
    if dump_pgm:
        write_pgm(p("output.pgm"), result.edited)
    with open(p("diagnostics.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "null_loss", "attn_loss"])
        for k in range(T):
            w.writerow([T - k, repr(float(result.null_loss[k])), repr(float(result.attn_loss[k]))])
    return files
