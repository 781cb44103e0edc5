"""Command line: generate, train, eval, verify-theorem, sweep, table."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import yaml

from . import graph, sde
from .model import PulseConfig, PulseModel, load_checkpoint
from .probe import embed, format_table, linear_probe, semi_supervised
from .sde import ConfigurationError, config_hash
from .train import TrainConfig, Variant, cross_label_fraction, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ACCEPTANCE = 0, 1, 2, 3
RUNS_ENV = "PULSELAB_RUNS"
RESULT_FIELDS = ["variant", "sigma", "seed", "kind", "accuracy", "auroc", "auprc",
                 "config_hash", "run_hash"]

log = logging.getLogger("pulselab")


class AcceptanceFailure(RuntimeError):
    pass


def runs_root(override=None):
    return Path(override or os.environ.get(RUNS_ENV, "runs"))


def load_config(path):
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return data


def _prepare_dir(root, kind, cfg, force, reuse=False):
    """``root/<hash>``; refuses to overwrite a finished run unless ``force``."""
    h = config_hash(cfg)
    out = Path(root) / h
    done = out / "config.json"
    if done.exists():
        if reuse and not force:
            return out, h, True
        if not force:
            raise ConfigurationError(f"{out} already holds a {kind} run; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out, h, False


def _finish(out, cfg, summary):
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def dataset_config(section):
    keys = {"family": "lorenz", "sigma": 0.0, "n_classes": 5, "W": 100,
            "trials_per_class": 5, "steps_per_trial": 20_000, "seed": 0}
    unknown = set(section) - set(keys) - {"csv"}
    if unknown:
        raise ConfigurationError(f"unknown dataset keys: {sorted(unknown)}")
    cfg = {**keys, **{k: v for k, v in section.items() if k != "csv"}}
    try:
        sde.Family(cfg["family"])
    except ValueError as exc:
        raise ConfigurationError(f"unknown family {cfg['family']!r}") from exc
    cfg["sigma"] = float(cfg["sigma"])
    if cfg["sigma"] < 0:
        raise ConfigurationError(f"noise level must be >= 0, got {cfg['sigma']}")
    return cfg


def run_generate(section, root=None, force=False, reuse=False):
    cfg = dataset_config(section)
    full = {"command": "generate", **cfg}
    out, h, cached = _prepare_dir(runs_root(root), "generate", full, force, reuse)
    if cached:
        return out
    ds = sde.build_dataset(cfg["family"], cfg["sigma"], cfg["n_classes"], cfg["W"],
                           cfg["trials_per_class"], cfg["steps_per_trial"], cfg["seed"])
    sde.save_dataset(ds, out / "dataset.bin")
    if section.get("csv"):
        sde.export_csv(ds, out / "csv")
    counts = {s: int((ds.split == s).sum()) for s in sde.SPLITS}
    summary = {"config_hash": h, "dataset_hash": ds.config_hash, "family": cfg["family"],
               "sigma": cfg["sigma"], "n_classes": ds.n_classes, "class_params": ds.class_params,
               "noise_scales": ds.noise_scales, "windows": counts, "window": cfg["W"]}
    _finish(out, full, summary)
    return out


def run_train(dataset_path, model_section, train_section, root=None, force=False,
              reuse=False, resume=False, progress=None):
    dataset_path = Path(dataset_path)
    if dataset_path.is_dir():
        dataset_path = dataset_path / "dataset.bin"
    if not dataset_path.exists():
        raise ConfigurationError(f"dataset not found: {dataset_path}")
    ds = sde.load_dataset(dataset_path)
    try:
        mcfg = PulseConfig.from_dict({"channels": ds.windows.shape[2], "window": ds.window,
                                      **model_section})
        tcfg = TrainConfig.from_dict(dict(train_section))
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc
    full = {"command": "train", "dataset_hash": ds.config_hash, "model": asdict(mcfg),
            "train": asdict(tcfg)}
    h = config_hash(full)
    out = runs_root(root) / h
    if resume:
        if not (out / "last" / "manifest.json").exists():
            raise ConfigurationError(f"no resumable run under {out}")
        if (out / "config.json").exists():
            stored = json.loads((out / "config.json").read_text())
            if stored != full:
                raise ConfigurationError("config hash mismatch; refusing to resume")
            (out / "config.json").unlink()
    else:
        out, h, cached = _prepare_dir(runs_root(root), "train", full, force, reuse)
        if cached:
            return out
        (out / "dataset.ref").write_text(str(dataset_path.resolve()) + "\n")
    state = train(ds, mcfg, tcfg, out_dir=out, resume=resume, progress=progress)
    summary = {"config_hash": h, "dataset_hash": ds.config_hash, "variant": tcfg.variant,
               "seed": tcfg.seed, "sigma": ds.config.get("sigma"), "epochs": state.epoch,
               "steps": state.step, "best_val": state.best_val, "best_epoch": state.best_epoch,
               "decoder_input_dim": state.model.decoder_input_dim, "width": mcfg.width,
               "history": state.history, "events": state.events}
    if tcfg.variant == Variant.RANDOM_PAIRS.value:
        frac, n = cross_label_fraction(state.history)
        summary["cross_label_fraction"], summary["pairs"] = frac, n
    _finish(out, full, summary)
    return out


def run_eval(run_dir=None, dataset_path=None, semi=(), n_subsets=5, C=1.0, untrained=None,
             root=None, force=False, reuse=False):
    """Probe a trained run (``run_dir``) or an untrained encoder (``untrained`` model dict)."""
    if run_dir is not None:
        run_dir = Path(run_dir)
        if not (run_dir / "best" / "manifest.json").exists():
            raise ConfigurationError(f"no trained checkpoint under {run_dir}")
        model, manifest = load_checkpoint(run_dir / "best")
        run_summary = json.loads((run_dir / "summary.json").read_text())
        if dataset_path is None:
            dataset_path = (run_dir / "dataset.ref").read_text().strip()
        variant, seed, run_hash = run_summary["variant"], run_summary["seed"], run_summary["config_hash"]
    if dataset_path is None:
        raise ConfigurationError("eval needs --run or --dataset")
    dataset_path = Path(dataset_path)
    if dataset_path.is_dir():
        dataset_path = dataset_path / "dataset.bin"
    if not dataset_path.exists():
        raise ConfigurationError(f"dataset not found: {dataset_path}")
    ds = sde.load_dataset(dataset_path)
    if run_dir is None:
        from .train import channel_stats

        seed = int((untrained or {}).get("seed", 0))
        mcfg = PulseConfig.from_dict({"channels": ds.windows.shape[2], "window": ds.window,
                                      **{k: v for k, v in (untrained or {}).items() if k != "seed"}})
        model = PulseModel(mcfg, seed=seed)
        model.input_mean, model.input_std = channel_stats(ds.subset("train")[0])
        variant, run_hash = "untrained", None
    full = {"command": "eval", "run_hash": run_hash, "dataset_hash": ds.config_hash,
            "semi": sorted(float(s) for s in semi), "n_subsets": n_subsets, "C": C,
            "variant": variant, "seed": seed,
            "model": asdict(model.config) if run_dir is None else None}
    out, h, cached = _prepare_dir(runs_root(root), "eval", full, force, reuse)
    if cached:
        return out
    emb = embed(model, ds, config_hash=h, seed=seed)
    sigma = ds.config.get("sigma")
    rep = linear_probe(emb, C=C)
    rep.extra.update({"variant": variant, "sigma": sigma})
    (out / "report.json").write_text(rep.to_json() + "\n")
    rows = [{"variant": variant, "sigma": sigma, "seed": seed, "kind": "full",
             "accuracy": rep.accuracy, "auroc": rep.auroc, "auprc": rep.auprc,
             "config_hash": h, "run_hash": run_hash}]
    for frac in sorted(semi):
        srep = semi_supervised(emb, frac, n_subsets=n_subsets, seed=seed)
        (out / f"semi-{frac:g}.json").write_text(srep.to_json() + "\n")
        for rec in srep.extra["records"]:
            rows.append({"variant": variant, "sigma": sigma, "seed": seed, "kind": f"semi-{frac:g}",
                         "accuracy": rec["accuracy"], "auroc": rec["auroc"],
                         "auprc": rec["auprc"], "config_hash": h, "run_hash": run_hash})
    with (out / "results.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, RESULT_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _finish(out, full, {"config_hash": h, "accuracy": rep.accuracy, "auroc": rep.auroc,
                        "auprc": rep.auprc, "variant": variant, "sigma": sigma, "seed": seed})
    return out


def run_verify(w_max, w_min=2, root=None, force=False):
    if w_max < 2 or w_min < 2:
        raise ConfigurationError("theorem check needs W >= 2 (the W=1 graph is degenerate)")
    if w_min > w_max:
        raise ConfigurationError(f"--w-min {w_min} exceeds --w-max {w_max}")
    full = {"command": "verify-theorem", "w_min": w_min, "w_max": w_max}
    out, h, _ = _prepare_dir(runs_root(root), "verify-theorem", full, force)
    report = graph.verify_theorem1(w_min, w_max)
    (out / "theorem.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "theorem.txt").write_text(report.summary() + "\n")
    _finish(out, full, report.to_dict())
    return out, report


def collect_results(root):
    rows = []
    for path in sorted(Path(root).glob("*/results.csv")):
        with path.open() as fh:
            rows.extend(csv.DictReader(fh))
    return rows


def run_table(root=None, kind="full"):
    rows = [r for r in collect_results(runs_root(root)) if r["kind"] == kind]
    if not rows:
        raise ConfigurationError(f"no '{kind}' results under {runs_root(root)}")
    return format_table(rows)


# ---------------------------------------------------------------- sweep


def _sweep_job(job):
    root, ds_section, model, tr, semi, n_subsets, variant, seed = job
    ds_dir = run_generate(ds_section, root=root, reuse=True)
    run = run_train(ds_dir, model, {**tr, "variant": variant, "seed": seed}, root=root, reuse=True)
    ev = run_eval(run, semi=semi, n_subsets=n_subsets, root=root, reuse=True)
    return str(ev)


def sweep_jobs(config, root):
    sw = config.get("sweep", {})
    seeds = sw.get("seeds", [0])
    sigmas = sw.get("sigmas", [config.get("dataset", {}).get("sigma", 0.0)])
    variants = sw.get("variants", ["pulse"])
    for v in variants:
        Variant(v)
    ev = config.get("eval", {})
    jobs = []
    for sigma in sigmas:
        for seed in seeds:
            ds_section = {**config.get("dataset", {}), "sigma": sigma, "seed": seed}
            for v in variants:
                jobs.append((str(root), ds_section, config.get("model", {}),
                             config.get("train", {}), tuple(ev.get("semi", ())),
                             ev.get("n_subsets", 5), v, seed))
    return jobs


def run_sweep(config, root=None, jobs=1):
    root = runs_root(root)
    todo = sweep_jobs(config, root)
    # datasets first, serially, so parallel workers never race on the same directory
    for job in todo:
        run_generate(job[1], root=root, reuse=True)
    if jobs <= 1:
        return [_sweep_job(j) for j in todo]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_sweep_job, todo))


# ---------------------------------------------------------------- argparse


def _overrides(args, names):
    return {k: getattr(args, k) for k in names if getattr(args, k, None) is not None}


def build_parser():
    p = argparse.ArgumentParser(prog="pulselab", description=__doc__)
    p.add_argument("--runs", help=f"output root (default ${RUNS_ENV} or ./runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a labelled window dataset")
    g.add_argument("--config")
    g.add_argument("--family", choices=[f.value for f in sde.Family])
    g.add_argument("--sigma", type=float)
    g.add_argument("--n-classes", dest="n_classes", type=int)
    g.add_argument("--window", dest="W", type=int)
    g.add_argument("--trials", dest="trials_per_class", type=int)
    g.add_argument("--steps", dest="steps_per_trial", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--csv", action="store_true", default=None)
    g.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="pretrain an encoder")
    t.add_argument("--config")
    t.add_argument("--dataset")
    t.add_argument("--variant", choices=[v.value for v in Variant])
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--width", type=int)
    t.add_argument("--depth", type=int)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--force", action="store_true")

    e = sub.add_parser("eval", help="linear-probe a trained encoder")
    e.add_argument("--config")
    e.add_argument("--run")
    e.add_argument("--dataset")
    e.add_argument("--semi", type=float, action="append", default=None)
    e.add_argument("--subsets", type=int)
    e.add_argument("--untrained", action="store_true", help="probe a randomly initialized encoder")
    e.add_argument("--seed", type=int)
    e.add_argument("--force", action="store_true")

    v = sub.add_parser("verify-theorem", help="exhaustive shared-set check")
    v.add_argument("--w-max", type=int, default=5)
    v.add_argument("--w-min", type=int, default=2)
    v.add_argument("--force", action="store_true")

    s = sub.add_parser("sweep", help="seeds x variants x noise levels")
    s.add_argument("--config", required=True)
    s.add_argument("--jobs", type=int, default=1)

    tb = sub.add_parser("table", help="mean ± std per variant from eval results")
    tb.add_argument("--kind", default="full")
    tb.add_argument("--output")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except (ConfigurationError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AcceptanceFailure as exc:
        print(f"acceptance check failed: {exc}", file=sys.stderr)
        return EXIT_ACCEPTANCE
    except Exception as exc:  # noqa: BLE001 - exit code contract
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _dispatch(args):
    root = args.runs
    if args.command == "generate":
        cfg = load_config(args.config)
        section = {**cfg.get("dataset", {}),
                   **_overrides(args, ["family", "sigma", "n_classes", "W", "trials_per_class",
                                       "steps_per_trial", "seed", "csv"])}
        out = run_generate(section, root=root, force=args.force)
        summary = json.loads((out / "summary.json").read_text())
        print(f"dataset: {out / 'dataset.bin'}")
        print(f"classes: {summary['n_classes']} {summary['class_params']}")
        return EXIT_OK

    if args.command == "train":
        cfg = load_config(args.config)
        dataset = args.dataset or cfg.get("dataset_path")
        if dataset is None:
            raise ConfigurationError("train needs --dataset")
        model = {**cfg.get("model", {}), **_overrides(args, ["width", "depth"])}
        tr = {**cfg.get("train", {}),
              **_overrides(args, ["variant", "seed", "epochs", "lr", "weight_decay", "batch_size"])}
        start = time.perf_counter()

        def progress(r):
            log.info("epoch %d train %.4f val %.4f", r["epoch"], r["train_loss"], r["val_loss"])

        out = run_train(dataset, model, tr, root=root, force=args.force, resume=args.resume,
                        progress=progress)
        summary = json.loads((out / "summary.json").read_text())
        print(f"run: {out}")
        print(f"best val loss {summary['best_val']:.6f} at epoch {summary['best_epoch']} "
              f"({time.perf_counter() - start:.1f}s)")
        return EXIT_OK

    if args.command == "eval":
        cfg = load_config(args.config)
        ev = cfg.get("eval", {})
        semi = args.semi if args.semi is not None else ev.get("semi", [])
        untrained = None
        if args.untrained:
            untrained = {**cfg.get("model", {}), "seed": args.seed or 0}
        out = run_eval(args.run, args.dataset, semi=semi,
                       n_subsets=args.subsets or ev.get("n_subsets", 5),
                       C=ev.get("C", 1.0), untrained=untrained, root=root, force=args.force)
        rep = json.loads((out / "report.json").read_text())
        print(f"report: {out}")
        print(f"accuracy {rep['accuracy']:.4f}  auroc {rep['auroc']:.4f}  auprc {rep['auprc']:.4f}")
        return EXIT_OK

    if args.command == "verify-theorem":
        out, report = run_verify(args.w_max, args.w_min, root=root, force=args.force)
        print(report.summary())
        print(f"report: {out}")
        if not report.ok:
            raise AcceptanceFailure(f"{len(report.counterexamples)} counterexamples")
        return EXIT_OK

    if args.command == "sweep":
        outs = run_sweep(load_config(args.config), root=root, jobs=args.jobs)
        print(f"{len(outs)} evaluations under {runs_root(root)}")
        return EXIT_OK

    if args.command == "table":
        text, _ = run_table(root, args.kind)
        if args.output:
            Path(args.output).write_text(text)
        print(text, end="")
        return EXIT_OK
    raise ConfigurationError(f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
