"""Command-line entry point: ``aedit <command> ...``.

Every command takes ``--out DIR`` and writes ``DIR/manifest.json`` before
doing any work.  The manifest records the resolved configuration and the
argument vector (with the output directory abstracted), so
``aedit replay DIR/manifest.json`` reruns the command into the same place.

Exit codes: 0 ok, 2 configuration, 3 training, 4 pipeline, 5 evaluation.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace

import numpy as np

from . import __version__
from . import tensor as tn
from .denoiser import (DenoiserConfig, TrainConfig, TrainingDivergence, load_checkpoint, save_checkpoint,
                       train)
from .evaluate import MetricError, ablate, dump_json, evaluate, write_metrics_csv
from .pipeline import (EditRunConfig, PipelineError, prepare, relative_mse, run_edit,
                       write_pgm, write_run_dir)
from .promptedit import EditSpec
from .synthbench import load_dataset, make_dataset, save_dataset

log = logging.getLogger("aedit")

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN, EXIT_PIPELINE, EXIT_EVAL = 0, 2, 3, 4, 5
SECTIONS = ("seed", "model", "train", "edit", "data")
OUT_PLACEHOLDER = "{out}"


class ConfigError(ValueError):
    pass


class EvalError(RuntimeError):
    pass


# -- configuration ---------------------------------------------------------------

def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"'{name}' must be an object")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key '{name}.{key}'")
    try:
        if cls is EditRunConfig:
            return EditRunConfig.from_dict(raw)
        return cls(**raw)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def load_config(path) -> dict:
    """Parse a config file into a plain dict (``None`` gives the defaults)."""
    if path is None:
        return {}
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(f"unknown key '{key}' (expected one of {', '.join(SECTIONS)})")
    return raw


def resolve(raw: dict, args) -> dict:
    """Apply the seed override and command-line flags; flags win."""
    seed = raw.get("seed", 0)
    if os.environ.get("AEDIT_SEED") not in (None, ""):
        try:
            seed = int(os.environ["AEDIT_SEED"])
        except ValueError as exc:
            raise ConfigError(f"AEDIT_SEED must be an integer, got {os.environ['AEDIT_SEED']!r}") from exc
    if not isinstance(seed, int):
        raise ConfigError("'seed' must be an integer")
    model = _section(DenoiserConfig, raw.get("model"), "model")
    tcfg = _section(TrainConfig, raw.get("train"), "train")
    ecfg = _section(EditRunConfig, raw.get("edit"), "edit")
    data = dict({"n_train": 2000, "seed": 1}, **(raw.get("data") or {}))
    for key in data:
        if key not in ("n_train", "seed"):
            raise ConfigError(f"unknown key 'data.{key}'")
    tcfg = replace(tcfg, seed=seed)
    ecfg = replace(ecfg, seed=seed)
    if getattr(args, "epochs", None) is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    if getattr(args, "no_null_opt", False):
        ecfg = replace(ecfg, null_opt_enabled=False)
    if getattr(args, "no_eot_sup", False):
        ecfg = replace(ecfg, eot_sup_enabled=False)
    if getattr(args, "no_attn_loss", False):
        ecfg = replace(ecfg, attn_loss_enabled=False)
    if getattr(args, "flip_suppression", False):
        ecfg = replace(ecfg, suppression_flip=not ecfg.suppression_flip)
    return {"seed": seed, "model": asdict(model), "train": asdict(tcfg), "edit": ecfg.to_dict(), "data": data}


def _train_cfg(c):
    return TrainConfig(**c["train"])


def _edit_cfg(c):
    return EditRunConfig.from_dict(c["edit"])


# -- manifest -------------------------------------------------------------------

def _abstract_argv(argv, out):
    res, i = [], 0
    while i < len(argv):
        a = argv[i]
        if a == "--out" and i + 1 < len(argv):
            res += ["--out", OUT_PLACEHOLDER]
            i += 2
            continue
        if a.startswith("--out="):
            a = "--out=" + OUT_PLACEHOLDER
        res.append(a)
        i += 1
    return res


def write_manifest(out, command, args, argv, config, artifacts) -> str:
    os.makedirs(out, exist_ok=True)
    manifest = {
        "command": command,
        "config_path": args.config,
        "config": config,
        "seed": config["seed"],
        "argv": _abstract_argv(list(argv), out),
        "artifacts": artifacts,
        "version": __version__,
    }
    path = os.path.join(out, "manifest.json")
    dump_json(path, manifest)
    return path


def _load_model(path):
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from exc


def _load_data(path):
    try:
        return load_dataset(path)[0]
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load dataset {path}: {exc}") from exc


def _subset(samples, n):
    if n is None:
        return samples
    if n < 1:
        raise ConfigError("--subset must be positive")
    return samples[:n]


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args, argv, config):
    n = args.n
    seed = config["seed"] if args.seed is None else args.seed
    write_manifest(args.out, "gen-data", args, argv, config,
                   {"index": "index.json", "latents": "latents.bin", "targets": "targets.bin"})
    samples = make_dataset(n, seed)
    save_dataset(args.out, samples, {"n": n, "seed": seed})
    print(f"wrote {n} samples to {args.out}")
    return EXIT_OK


def cmd_train(args, argv, config):
    write_manifest(args.out, "train", args, argv, config,
                   {"checkpoint": "checkpoint.aedn", "losses": "losses.csv"})
    if args.data:
        samples = _load_data(args.data)
    else:
        samples = make_dataset(config["data"]["n_train"], config["data"]["seed"])
    latents = np.stack([s.latent for s in samples])
    captions = [s.caption for s in samples]
    res = train(latents, captions, DenoiserConfig(**config["model"]), _train_cfg(config),
                progress=lambda e, l: log.info("epoch %d loss %.6f", e, l))
    save_checkpoint(os.path.join(args.out, "checkpoint.aedn"), res.model)
    with open(os.path.join(args.out, "losses.csv"), "w") as f:
        f.write("epoch,loss\n")
        for e, l in enumerate(res.losses, 1):
            f.write(f"{e},{l!r}\n")
    print(f"initial loss {res.initial_loss:.6f}  final loss {res.losses[-1]:.6f}")
    return EXIT_OK


def _sample_and_spec(args, samples):
    by_id = {s.sample_id: s for s in samples}
    if args.sample not in by_id:
        raise ConfigError(f"sample {args.sample} not in dataset")
    s = by_id[args.sample]
    try:
        spec = EditSpec.from_json(args.spec) if args.spec else EditSpec.from_dict(s.edit_spec_dict())
    except (OSError, json.JSONDecodeError, KeyError, ValueError, IndexError) as exc:
        raise ConfigError(f"invalid edit spec: {exc}") from exc
    return s, spec


def cmd_edit(args, argv, config):
    artifacts = {"config": "config.json", "trajectory": "trajectory.bin", "trajectory_meta": "trajectory.json",
                 "nulls": "nulls.bin", "prompt_before": "prompt_before.bin", "prompt_after": "prompt_after.bin",
                 "output": "output.bin", "diagnostics": "diagnostics.csv"}
    if args.dump_pgm:
        artifacts["pgm"] = "output.pgm"
    write_manifest(args.out, "edit", args, argv, config, artifacts)
    model = _load_model(args.checkpoint)
    sample, spec = _sample_and_spec(args, _load_data(args.dataset))
    cfg = _edit_cfg(config)
    prep = prepare(model, sample.latent[None], [spec], cfg)
    res = run_edit(model, prep, cfg)[0]
    run_config = {"edit": cfg.to_dict(), "spec": spec.to_dict(), "sample_id": sample.sample_id,
                  "checkpoint_sha256": model.checksum()}
    sched = {"T": cfg.T, "T_train": model.cfg.T_train, "beta_start": model.cfg.beta_start,
             "beta_end": model.cfg.beta_end}
    write_run_dir(args.out, res, prep, 0, run_config, dump_pgm=args.dump_pgm, schedule_params=sched)
    if spec.mode == "reconstruct":
        rel = float(relative_mse(res.edited, sample.latent))
        print(json.dumps({"sample_id": sample.sample_id, "relative_mse": rel,
                          "null_opt": cfg.null_opt_enabled}, sort_keys=True))
    else:
        print(f"edited sample {sample.sample_id} ({spec.mode}) -> {args.out}")
    return EXIT_OK


def cmd_reconstruct(args, argv, config):
    write_manifest(args.out, "reconstruct", args, argv, config,
                   {"output": "output.bin", "report": "report.json"})
    model = _load_model(args.checkpoint)
    sample, _ = _sample_and_spec(args, _load_data(args.dataset))
    cfg = replace(_edit_cfg(config), eot_sup_enabled=False, attn_loss_enabled=False)
    spec = EditSpec("reconstruct", sample.target_caption)
    prep = prepare(model, sample.latent[None], [spec], cfg)
    res = run_edit(model, prep, cfg, with_reconstruction=False)[0]
    tn.write_tensors(os.path.join(args.out, "output.bin"), [res.edited])
    if args.dump_pgm:
        write_pgm(os.path.join(args.out, "output.pgm"), res.edited)
    report = {"sample_id": sample.sample_id, "relative_mse": float(relative_mse(res.edited, sample.latent)),
              "null_opt": cfg.null_opt_enabled, "w": cfg.w_denoise}
    dump_json(os.path.join(args.out, "report.json"), report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_eval(args, argv, config):
    write_manifest(args.out, "eval", args, argv, config,
                   {"metrics": "metrics.csv", "summary": "summary.json"})
    model = _load_model(args.checkpoint)
    samples = _subset(_load_data(args.dataset), args.subset)
    report = evaluate(model, samples, _edit_cfg(config), batch_size=args.batch_size, jobs=args.jobs)
    try:
        write_metrics_csv(os.path.join(args.out, "metrics.csv"), report.csv_rows())
        dump_json(os.path.join(args.out, "summary.json"), report.summary)
    except (ValueError, TypeError) as exc:
        raise EvalError(str(exc)) from exc
    for row in report.summary["rows"]:
        fd = "n/a" if row["fd"] is None else f"{row['fd']:.4f}"
        print(f"{row['row']:<12} clap_like={row['clap_like']:.4f} preservation={row['preservation']:.4f} fd={fd}")
    return EXIT_OK


def cmd_ablate(args, argv, config):
    write_manifest(args.out, "ablate", args, argv, config, {"ablation": "ablation.json"})
    model = _load_model(args.checkpoint)
    samples = _subset(_load_data(args.dataset), args.subset)
    rep = ablate(model, samples, _edit_cfg(config), batch_size=args.batch_size, jobs=args.jobs)
    dump_json(os.path.join(args.out, "ablation.json"), rep.to_dict())
    for row in rep.rows:
        fd = "n/a" if row["fd"] is None else f"{row['fd']:.4f}"
        print(f"{row['row']:<14} clap_like={row['clap_like']:.4f} preservation={row['preservation']:.4f} fd={fd}")
    for name, ok in rep.checks.items():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aedit", description="Toy diffusion editing with null-text inversion.")
    p.add_argument("--version", action="version", version=f"aedit {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ckpt=True, data=True):
        sp.add_argument("--config", help="JSON config with seed/model/train/edit/data sections")
        sp.add_argument("--out", required=True, help="output directory")
        if ckpt:
            sp.add_argument("--checkpoint", required=True)
        if data:
            sp.add_argument("--dataset", required=True, help="directory written by gen-data")

    def toggles(sp):
        sp.add_argument("--no-null-opt", action="store_true")
        sp.add_argument("--no-eot-sup", action="store_true")
        sp.add_argument("--no-attn-loss", action="store_true")
        sp.add_argument("--flip-suppression", action="store_true", help="reverse the sign of the singular-value reweighting")

    sp = sub.add_parser("gen-data", help="write the synthetic benchmark")
    common(sp, ckpt=False, data=False)
    sp.add_argument("--n", type=int, default=300)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train the toy denoiser")
    common(sp, ckpt=False, data=False)
    sp.add_argument("--data", help="train on this dataset instead of a generated one")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train)

    for name, fn in (("edit", cmd_edit), ("reconstruct", cmd_reconstruct)):
        sp = sub.add_parser(name, help=f"{name} one benchmark sample")
        common(sp)
        sp.add_argument("--sample", type=int, required=True)
        sp.add_argument("--spec", help="edit spec JSON (defaults to the sample's curated edit)")
        sp.add_argument("--dump-pgm", action="store_true")
        toggles(sp)
        sp.set_defaults(func=fn)

    for name, fn, what in (("eval", cmd_eval, "score original, regenerated and edited rows"),
                           ("ablate", cmd_ablate, "compare the full method with single stages disabled")):
        sp = sub.add_parser(name, help=what)
        common(sp)
        sp.add_argument("--subset", type=int)
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--batch-size", type=int, default=50)
        toggles(sp)
        sp.set_defaults(func=fn)

    sp = sub.add_parser("replay", help="rerun a command from its manifest")
    sp.add_argument("manifest")
    sp.set_defaults(func=None)
    return p


def _replay_argv(path):
    with open(path) as f:
        m = json.load(f)
    out = os.path.dirname(os.path.abspath(path))
    argv = [out if a == OUT_PLACEHOLDER else a.replace("--out=" + OUT_PLACEHOLDER, "--out=" + out)
            for a in m["argv"]]
    return argv, m["config"]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    snapshot = None
    if args.command == "replay":
        try:
            argv, snapshot = _replay_argv(args.manifest)
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            print(f"error: cannot replay {args.manifest}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        args = parser.parse_args(argv)
    try:
        config = snapshot if snapshot is not None else resolve(load_config(args.config), args)
        if snapshot is not None:
            resolve(snapshot, argparse.Namespace())  # validates the snapshot
        return args.func(args, argv, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergence, tn.NonFiniteError) as exc:
        if args.command == "train":
            print(f"training failed: {exc}", file=sys.stderr)
            return EXIT_TRAIN
        print(f"pipeline failed: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except PipelineError as exc:
        print(f"pipeline failed in stage '{exc.stage}': {exc.cause}", file=sys.stderr)
        return EXIT_PIPELINE
    except (EvalError, MetricError) as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return EXIT_EVAL


if __name__ == "__main__":
    sys.exit(main())
