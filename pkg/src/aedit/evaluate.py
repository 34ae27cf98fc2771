"""Benchmark harness: per-sample metrics, summary tables and the ablation."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .pipeline import EditRunConfig, Prepared, prepare, regenerate, run_edit
from .promptedit import EditSpec
from .synthbench import BenchSample, alignment_score, frechet_distance, preservation_error

__all__ = [
    "sample_seed", "EvalReport", "AblationReport", "evaluate", "ablate", "row_metrics",
    "write_metrics_csv", "ABLATION_ROWS", "MetricError",
]

CSV_COLUMNS = ("sample_id", "group", "clap_like", "preservation", "fd_contrib")
ABLATION_ROWS = ("full", "w/o null-opt", "w/o eot-sup")


class MetricError(RuntimeError):
    """A metric could not be computed (non-finite input, eigensolver failure, ...)."""


def sample_seed(base_seed: int, sample_id: int) -> int:
    """Independent per-sample seed derived from ``(base_seed, sample_id)``."""
    return int(np.random.SeedSequence([int(base_seed), int(sample_id)]).generate_state(1)[0])


def _chunks(n, size):
    return [range(i, min(i + size, n)) for i in range(0, n, size)]


def _map_chunks(fn, n, batch_size, jobs):
    """Apply ``fn(range)`` over fixed chunks; results come back in chunk order."""
    chunks = _chunks(n, batch_size)
    if jobs <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, chunks))


def row_metrics(latents, samples, features, orig_features) -> dict:
    """Per-sample toy metrics of one row of the tables, plus set-level FD.

    FD is ``None`` when there are too few samples for a covariance of the
    feature dimension; any other failure raises :class:`MetricError`.
    """
    try:
        clap = np.array([alignment_score(x, s.desired_caption) for x, s in zip(latents, samples)])
        pres = np.array([preservation_error(x, s.latent, s.preserved) for x, s in zip(latents, samples)])
        contrib = ((features - orig_features) ** 2).sum(axis=1)
        enough = min(len(features), len(orig_features)) > np.shape(features)[1]
        fd = frechet_distance(features, orig_features) if enough else None
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        raise MetricError(f"{type(exc).__name__}: {exc}") from exc
    for name, v in (("clap_like", clap), ("preservation", pres), ("fd_contrib", contrib)):
        if not np.isfinite(v).all():
            raise MetricError(f"non-finite {name}")
    return {"clap_like": clap, "preservation": pres, "fd_contrib": contrib, "fd": fd}


def _summary(m: dict) -> dict:
    return {"clap_like": float(np.median(m["clap_like"])),
            "preservation": float(np.median(m["preservation"])),
            "fd": None if m["fd"] is None else float(m["fd"])}


@dataclass
class EvalReport:
    samples: list
    edited: np.ndarray
    regenerated: np.ndarray
    metrics: dict                      # row name -> per-sample metric dict
    summary: dict = field(default_factory=dict)

    def csv_rows(self) -> list[dict]:
        m = self.metrics["edited"]
        return [{"sample_id": s.sample_id, "group": s.group, "clap_like": m["clap_like"][i],
                 "preservation": m["preservation"][i], "fd_contrib": m["fd_contrib"][i]}
                for i, s in enumerate(self.samples)]


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r["sample_id"], r["group"]] + [repr(float(r[k])) for k in CSV_COLUMNS[2:]])


def _specs(samples):
    return [EditSpec.from_dict(s.edit_spec_dict()) for s in samples]


def _group_summary(samples, metrics) -> dict:
    groups = np.array([s.group for s in samples])
    out = {}
    for g in sorted(set(groups)):
        sel = groups == g
        out[g] = {row: {"clap_like": float(np.median(m["clap_like"][sel])),
                        "preservation": float(np.median(m["preservation"][sel]))}
                  for row, m in metrics.items()}
    return out


def evaluate(model, samples: list[BenchSample], cfg: EditRunConfig | None = None,
             batch_size: int = 50, jobs: int = 1) -> EvalReport:
    """Edit every sample and score original, regenerated and edited rows."""
    cfg = cfg or EditRunConfig()
    if not samples:
        raise ValueError("no samples to evaluate")
    z0 = np.stack([s.latent for s in samples])
    specs = _specs(samples)

    def work(idx):
        idx = list(idx)
        prep = prepare(model, z0[idx], [specs[i] for i in idx], cfg)
        res = run_edit(model, prep, cfg, with_reconstruction=False)
        regen = regenerate(model, [samples[i].desired_caption for i in idx],
                           [sample_seed(cfg.seed, samples[i].sample_id) for i in idx], cfg)
        return np.stack([r.edited for r in res]), regen

    parts = _map_chunks(work, len(samples), batch_size, jobs)
    edited = np.concatenate([p[0] for p in parts])
    regen = np.concatenate([p[1] for p in parts])
    f_orig = model.features(z0)
    metrics = {name: row_metrics(x, samples, model.features(x), f_orig)
               for name, x in (("original", z0), ("regenerated", regen), ("edited", edited))}
    summary = {
        "rows": [dict(row=name, **_summary(m)) for name, m in metrics.items()],
        "groups": _group_summary(samples, metrics),
        "n": len(samples),
        "config": cfg.to_dict(),
    }
    return EvalReport(list(samples), edited, regen, metrics, summary)


@dataclass
class AblationReport:
    rows: list                         # one dict per ABLATION_ROWS entry
    checks: dict                       # direction name -> bool
    variants: dict = field(default_factory=dict)
    edited: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {"rows": self.rows, "checks": self.checks, "variants": self.variants}


def _without_nulls(model, prep: Prepared, cfg: EditRunConfig) -> Prepared:
    null = model.null_embedding().matrix
    nulls = np.broadcast_to(null, (len(prep.specs), cfg.T) + null.shape)
    return replace(prep, nulls=nulls, null_result=None, null_opt=False)


def ablate(model, samples: list[BenchSample], cfg: EditRunConfig | None = None,
           batch_size: int = 50, jobs: int = 1, flipped_variant: bool = True) -> AblationReport:
    """Full method against "w/o null-opt" and "w/o eot-sup".

    The inversion and null fits are shared across rows (disabling a stage
    never changes what runs before it).  The sign-flipped suppression rule
    is reported as an extra variant, outside the three rows.
    """
    cfg = cfg or EditRunConfig()
    full = replace(cfg, null_opt_enabled=True, eot_sup_enabled=True)
    variants = {"full": full,
                "w/o null-opt": replace(full, null_opt_enabled=False),
                "w/o eot-sup": replace(full, eot_sup_enabled=False)}
    if flipped_variant:
        variants["flipped suppression"] = replace(full, suppression_flip=not full.suppression_flip)
    z0 = np.stack([s.latent for s in samples])
    specs = _specs(samples)

    def work(idx):
        idx = list(idx)
        prep = prepare(model, z0[idx], [specs[i] for i in idx], full)
        bare = _without_nulls(model, prep, full)
        out = {}
        for name, c in variants.items():
            res = run_edit(model, bare if not c.null_opt_enabled else prep, c, with_reconstruction=False)
            out[name] = np.stack([r.edited for r in res])
        return out

    parts = _map_chunks(work, len(samples), batch_size, jobs)
    edited = {name: np.concatenate([p[name] for p in parts]) for name in variants}
    f_orig = model.features(z0)
    metrics = {name: row_metrics(x, samples, model.features(x), f_orig) for name, x in edited.items()}
    rows = [dict(row=name, **_summary(metrics[name])) for name in ABLATION_ROWS]
    by = {r["row"]: r for r in rows}
    checks = {
        "w/o null-opt degrades preservation":
            by["w/o null-opt"]["preservation"] > by["full"]["preservation"],
        "w/o null-opt increases FD": (by["full"]["fd"] is not None
                                      and by["w/o null-opt"]["fd"] > by["full"]["fd"]),
        "w/o eot-sup lowers alignment": by["w/o eot-sup"]["clap_like"] < by["full"]["clap_like"],
    }
    extra = {name: _summary(metrics[name]) for name in variants if name not in ABLATION_ROWS}
    return AblationReport(rows, checks, extra, edited)


def dump_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
