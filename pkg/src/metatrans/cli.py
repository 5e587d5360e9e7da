"""Command-line driver: generate, train, verify, sweep, rgra.

Exit codes: 0 success, 1 a mandatory verification check failed, 2 usage or
config error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as mdl
from . import synthbench as sb
from . import training
from . import verify as V
from .config import VARIANTS, ConfigError, ModelConfig, load_json, train_config_from_dict
from .data import SOURCE, TARGET
from .tensor import ContractError, DimensionError, NumericError

log = logging.getLogger("metatrans")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
FEATURE_FILES = {("source", "train"): "source_train.mtf", ("source", "eval"): "source_eval.mtf",
                 ("target", "train"): "target_train.mtf", ("target", "eval"): "target_eval.mtf"}
STATICS_FILE = "statics.npz"


class UsageError(Exception):
    pass


# -- manifest ----------------------------------------------------------------

def git_blob_hash(content: bytes) -> str:
    """Content hash in the same form git uses for a blob."""
    return hashlib.sha1(b"blob %d\0" % len(content) + content).hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    config_path: str | None
    seed: int
    out_dir: str
    config_hash: str
    started: str

    def write(self) -> Path:
        out = Path(self.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n")
        return path


def _manifest(args, conf: dict, raw_config: bytes) -> RunManifest:
    seed = args.seed
    if seed is None:
        seed = conf.get("train", {}).get("seed", conf.get("generator", {}).get("seed", 0))
    return RunManifest(args.command, args.config, seed, str(args.out),
                       git_blob_hash(raw_config),
                       time.strftime("%Y-%m-%dT%H:%M:%S%z"))


# -- config ------------------------------------------------------------------

def _read_config(args) -> tuple[dict, bytes]:
    if args.config is None:
        return {}, b""
    path = Path(args.config)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    raw = path.read_bytes()
    data = load_json(path)
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be an object")
    unknown = set(data) - {"generator", "train", "sweep", "verify", "data_dir"}
    if unknown:
        raise ConfigError(f"config: unknown sections {sorted(unknown)}")
    return data, raw


def _generator_spec(conf: dict, args) -> sb.GeneratorSpec:
    gen = dict(conf.get("generator", {}))
    if args.seed is not None:
        gen["seed"] = args.seed
    return sb.GeneratorSpec.from_dict(gen)


def _train_config(conf: dict, args):
    data = dict(conf.get("train", {}))
    if args.seed is not None:
        data["seed"] = args.seed
    if args.variant is not None:
        data["variant"] = args.variant
    if getattr(args, "lambda1", None) is not None:
        data["lambda1"] = args.lambda1
    if getattr(args, "epochs", None) is not None:
        data["epochs"] = args.epochs
        data["pseudo_start_epoch"] = min(data.get("pseudo_start_epoch", 20), args.epochs)
    return train_config_from_dict(data, args.preset)


# -- data --------------------------------------------------------------------

def _load_split(data_dir: Path, domain: str, split: str):
    path = data_dir / FEATURE_FILES[(domain, split)]
    if not path.exists():
        raise UsageError(f"missing feature file: {path}")
    return sb.read_feature_file(path)


def _datasets(conf: dict, args) -> dict:
    """Feature files from ``--data`` / ``data_dir`` when given, else generated in memory."""
    data_dir = args.data or conf.get("data_dir")
    if data_dir is None:
        pair = sb.generate_domain_pair(_generator_spec(conf, args))
        out = {}
        for domain, group in (("source", pair.source), ("target", pair.target)):
            for split, ds in group.items():
                out[(domain, split)] = (ds.batch, ds.statics)
        return out
    data_dir = Path(data_dir)
    statics = {}
    spath = data_dir / STATICS_FILE
    if spath.exists():
        with np.load(spath) as z:
            statics = {k: z[k] for k in z.files}
    return {key: (_load_split(data_dir, *key), statics.get(f"{key[0]}_{key[1]}"))
            for key in FEATURE_FILES}


# -- subcommands -------------------------------------------------------------

def cmd_generate(args, conf: dict) -> int:
    spec = _generator_spec(conf, args)
    pair = sb.generate_domain_pair(spec)
    out = Path(args.out)
    statics = {}
    for domain, group, code in (("source", pair.source, SOURCE), ("target", pair.target, TARGET)):
        for split, ds in group.items():
            sb.write_feature_file(ds.batch, out / FEATURE_FILES[(domain, split)], domain=code)
            statics[f"{domain}_{split}"] = ds.statics
            print(f"{domain}/{split}: n={len(ds.batch)} T={spec.T} d={spec.d} "
                  f"classes={np.bincount(ds.batch.class_label, minlength=spec.K).tolist()}")
    np.savez(out / STATICS_FILE, **statics)
    shift = float(np.linalg.norm(pair.resolved.target_mean - pair.resolved.source_mean))
    print(f"static mean shift |mu_T - mu_S| = {shift:.4f}")
    return EXIT_OK


def _write_report(report: training.ExperimentReport, out: Path) -> None:
    (out / "report.json").write_text(report.to_json() + "\n")
    with open(out / "epochs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "loss_cls", "loss_adv", "source_acc",
                                           "target_acc"], lineterminator="\n")
        w.writeheader()
        for rec in report.epochs:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})


def cmd_train(args, conf: dict) -> int:
    cfg = _train_config(conf, args)
    data = _datasets(conf, args)
    out = Path(args.out)
    model, report = training.train(data[("source", "train")][0], data[("target", "train")][0],
                                   cfg, data[("source", "eval")][0], data[("target", "eval")][0],
                                   on_epoch=lambda r: log.info("epoch %d: %s", r["epoch"], r))
    mdl.save_checkpoint(model, out / "checkpoint.mtck")
    (out / "model_config.json").write_text(
        json.dumps(dataclasses.asdict(cfg.model), indent=2) + "\n")
    (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    _write_report(report, out)
    print(f"variant={cfg.variant} lambda1={report.lambda1} target_acc={report.target_acc:.2f} "
          f"source_acc={report.source_acc:.2f}")
    return EXIT_OK


def _load_model(path: str, model_config: str | None) -> mdl.MetaTransModel:
    ckpt = Path(path)
    cfg_path = Path(model_config) if model_config else ckpt.parent / "model_config.json"
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    if not cfg_path.exists():
        raise UsageError(f"model config not found: {cfg_path}")
    mc = load_json(cfg_path)
    unknown = set(mc) - set(ModelConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"model config: unknown fields {sorted(unknown)}")
    model = mdl.MetaTransModel(ModelConfig(**mc), np.random.default_rng(0))
    return mdl.load_checkpoint(ckpt, model)


def cmd_verify(args, conf: dict) -> int:
    vconf = dict(conf.get("verify", {}))
    seed = args.seed if args.seed is not None else 0
    model = None
    if args.checkpoint:
        model = _load_model(args.checkpoint, args.model_config)
    theorems = ["1", "3", "4", "rgra"] if args.theorem == "all" else [args.theorem]
    reports = []
    for th in theorems:
        if th == "1":
            m = model or mdl.init_model(ModelConfig(), seed)
            reports.append(V.check_permutation_invariance(
                m, vconf.get("n_inputs", 20), vconf.get("n_perms", 20), vconf.get("tol", 1e-9),
                seed=seed))
        elif th == "3":
            data = _datasets(conf, args)
            streams = []
            for domain in ("source", "target"):
                batch, statics = data[(domain, "eval")]
                if statics is None:
                    raise UsageError("theorem 3 needs ground-truth statics (statics.npz)")
                if args.oracle == "mean" or model is None:
                    streams.append(V.oracle_streams(batch.x, statics))
                else:
                    streams.append(V.model_streams(batch.x, statics, model))
            reports.append(V.verify_theorem3(*streams, n_projections=vconf.get("n_projections", 64),
                                             seed=seed, per_t=args.per_t))
        elif th == "4":
            if args.oracle == "model" and model is not None:
                grid = [t for t in (4, 8, 16, 32, 64) if t <= model.config.t_max]
                scale = _generator_spec(conf, args).static_scale
                reports.append(V.verify_theorem4(grid, seed=seed, model=model,
                                                 n_samples=vconf.get("n_samples", 200),
                                                 static_scale=scale))
            else:
                reports.append(V.verify_theorem4(vconf.get("T_grid", (8, 16, 32, 64, 128, 256, 512)),
                                                 vconf.get("sigma", 1.0), vconf.get("d", 16),
                                                 vconf.get("n_samples", 500),
                                                 vconf.get("delta", 0.05), seed=seed))
        elif th == "rgra":
            reports.append(V.verify_rgra_table(mode=args.mode))
    out = Path(args.out)
    (out / "verify.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
    (out / "verify.csv").write_text(V.reports_csv(reports))
    for r in reports:
        print(f"theorem {r.theorem}: {'PASS' if r.passed else 'FAIL'} "
              f"max_violation={r.max_violation:.3g} trials={r.trials}")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK_FAILED


def _parse_grid(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--grid: {exc}") from exc


def cmd_sweep(args, conf: dict) -> int:
    cfg = _train_config(conf, args)
    grid = (_parse_grid(args.grid) if args.grid
            else conf.get("sweep", {}).get("grid", list(training.DEFAULT_GRID)))
    data = _datasets(conf, args)
    best, rows = training.grid_search_lambda(data[("source", "train")][0],
                                             data[("target", "train")][0], cfg, grid,
                                             target_val=data[("target", "eval")][0])
    with open(Path(args.out) / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["lambda1", "target_val_acc", "source_val_acc",
                                           "selected"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({"lambda1": repr(r["lambda1"]), "target_val_acc": repr(r["target_val_acc"]),
                        "source_val_acc": repr(r["source_val_acc"]),
                        "selected": int(r["lambda1"] == best)})
    print(f"best lambda1={best}")
    for r in rows:
        print(f"  lambda1={r['lambda1']:<6g} target_val_acc={r['target_val_acc']:.2f}")
    return EXIT_OK


def cmd_rgra(args, conf: dict) -> int:
    rows = V.rgra_table(args.mode)
    out = Path(args.out)
    with open(out / "rgra.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "benchmark", "task", "mode", "rgra"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['method']:<10} {r['benchmark']:<9} {r['task']:<9} {r['rgra']:6.2f}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "verify": cmd_verify,
            "sweep": cmd_sweep, "rgra": cmd_rgra}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="runs/latest", help="output directory")
    common.add_argument("--preset", choices=("desk", "paper"))
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--data", help="directory with feature files from `generate`")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="metatrans", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write synthetic feature files")
    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--lambda1", type=float)
    t.add_argument("--epochs", type=int)
    v = sub.add_parser("verify", parents=[common], help="run theorem checks")
    v.add_argument("--theorem", choices=("1", "3", "4", "rgra", "all"), default="all")
    v.add_argument("--oracle", choices=("mean", "model"), default="mean")
    v.add_argument("--checkpoint")
    v.add_argument("--model-config")
    v.add_argument("--table", choices=("paper",), default="paper")
    v.add_argument("--mode", choices=(V.FIXED_OTHERS, V.GREEDY), default=V.FIXED_OTHERS)
    v.add_argument("--per-t", action="store_true", help="check the bound at every frame index")
    s = sub.add_parser("sweep", parents=[common], help="lambda1 grid search")
    s.add_argument("--grid", help="comma-separated lambda1 values")
    s.add_argument("--epochs", type=int)
    r = sub.add_parser("rgra", parents=[common], help="emit the RGRA table")
    r.add_argument("--mode", choices=(V.FIXED_OTHERS, V.GREEDY), default=V.FIXED_OTHERS)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        conf, raw = _read_config(args)
        _manifest(args, conf, raw).write()
        return COMMANDS[args.command](args, conf)
    except (UsageError, ConfigError, sb.GeneratorError, sb.FeatureFormatError,
            mdl.CheckpointError, DimensionError, ContractError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
