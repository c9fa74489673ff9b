"""Command-line entry point: ``prompt-impute <subcommand> ...``.

Exit codes: 0 success, 1 config error, 2 report contains failed runs,
3 I/O error.
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .data import GenConfig, apply_normalization, NormStats, load_dataset, read_dataset, save_dataset, \
    synthesize, write_csv
from .experiments import ExperimentConfig, emit_report, load_report, prepare_splits, run_compare_protocols, \
    run_sweep
from .gradcheck import gradient_suite
from .models import ArchConfig, head_for_task
from .training import TrainConfig, evaluate, load_run, predict, save_run, train

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("prompt_impute")


class ConfigError(Exception):
    pass


def _load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _experiment_config(args):
    if not args.config:
        raise ConfigError("--config is required")
    doc = _load_json(args.config)
    if args.seed:
        doc["seeds"] = list(args.seed)
    if args.out:
        doc["out"] = args.out
    try:
        return ExperimentConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _out_dir(args, cfg=None):
    out = args.out or (cfg.out if cfg is not None else None)
    if not out:
        raise ConfigError("--out is required")
    return out


def cmd_synthesize(args):
    doc = _load_json(args.config) if args.config else {}
    doc = doc.get("dataset", {}).get("synthetic", doc)
    try:
        gen = GenConfig(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args)
    seeds = args.seed or [gen.seed]
    os.makedirs(out, exist_ok=True)
    for s in seeds:
        ds = synthesize(gen, seed=s)
        stem = os.path.join(out, f"synthetic_seed{s}")
        save_dataset(ds, stem + ".json")
        write_csv(ds, stem + "_data.csv", stem + "_labels.csv")
        print(f"{stem}.json: {len(ds)} records, missing rate {ds.missing_rate():.4f}")
    return EXIT_OK


def cmd_train(args):
    cfg = _experiment_config(args)
    out = _out_dir(args, cfg)
    seed = cfg.seeds[0]
    backbone, protocol = cfg.backbones[0], cfg.protocols[0]
    sweep_value = cfg.sweep["values"][0] if cfg.sweep else None
    tr, va, te, stats, hashes = prepare_splits(cfg, seed, sweep_value)
    arch_kw = {"hidden_dim": 32, "layers": 1}
    arch_kw.update(cfg.arch)
    arch = ArchConfig(backbone=backbone, input_dim=tr.feature_count, head=head_for_task(cfg.task), **arch_kw)
    tcfg = TrainConfig(**{**cfg.train, "protocol": protocol, "seed": seed})
    run = train(tr, va, arch, tcfg)
    test_metrics = evaluate(run, te, cfg.task)
    save_run(run, out, extra={"norm_stats": stats.to_dict(), "split_hashes": hashes,
                              "test_metrics": test_metrics, "task": cfg.task,
                              "experiment_config_hash": cfg.config_hash()})
    print(json.dumps({"run_dir": out, "best_epoch": run.best_epoch, "test": test_metrics}, sort_keys=True))
    return EXIT_OK


def cmd_predict(args):
    if not args.run:
        raise ConfigError("--run is required")
    run = load_run(args.run)
    if args.data.endswith(".json"):
        ds = read_dataset(args.data)
    else:
        if not args.labels:
            raise ConfigError("--labels is required with a CSV data file")
        ds = load_dataset(args.data, args.labels, task=run.manifest.get("task", "classification"))
    if not args.normalized and "norm_stats" in run.manifest:
        ds = apply_normalization(ds, NormStats.from_dict(run.manifest["norm_stats"]))
    scores = predict(run, ds)
    out = _out_dir(args)
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    tmp = out + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "score"])
        for r, s in zip(ds.records, scores):
            w.writerow([r.id, repr(float(s))])
    os.replace(tmp, out)
    print(f"{out}: {len(scores)} scores")
    return EXIT_OK


def _finish(report, out, formats):
    written = emit_report(report, out, formats or ["json", "csv", "figure-data"])
    for fmt, paths in sorted(written.items()):
        for p in paths:
            print(f"{fmt}: {p}")
    failed = report["manifest"]["failed_rows"]
    if failed:
        print(f"{failed} run(s) failed; see the error column", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_compare(args):
    cfg = _experiment_config(args)
    out = _out_dir(args, cfg)
    return _finish(run_compare_protocols(cfg, workers=args.workers), out, args.format)


def cmd_sweep(args):
    cfg = _experiment_config(args)
    if cfg.sweep is None:
        raise ConfigError("sweep subcommand needs a 'sweep' section in the config")
    out = _out_dir(args, cfg)
    return _finish(run_sweep(cfg, workers=args.workers), out, args.format)


def cmd_gradcheck(args):
    seed = args.seed[0] if args.seed else 0
    results = gradient_suite(instances=args.instances, seed=seed)
    worst = 0.0
    for r in results:
        ok = r["max_rel_error"] <= args.tol
        worst = max(worst, r["max_rel_error"])
        print(f"{'PASS' if ok else 'FAIL'} {r['backbone']:9s} {r['head']:17s} {r['protocol']:4s} "
              f"max_rel_error={r['max_rel_error']:.2e} ({r['instances']} instances, {r['seconds']:.1f}s)")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.json"), "w", encoding="utf-8") as fh:
            json.dump(results, fh, sort_keys=True, indent=2)
    return EXIT_OK if worst <= args.tol else EXIT_PARTIAL


def cmd_report(args):
    if not args.report:
        raise ConfigError("--report is required")
    report = load_report(args.report)
    return _finish(report, _out_dir(args), args.format)


def build_parser():
    parser = argparse.ArgumentParser(prog="prompt-impute", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory (or file for predict)")
        p.add_argument("--seed", type=int, action="append", help="seed; repeatable")
        p.add_argument("--workers", type=int, default=1, help="parallel grid jobs")
        p.add_argument("--format", action="append", choices=["json", "csv", "figure-data"],
                       help="report format; repeatable (default: all)")
        return p

    common(sub.add_parser("synthesize", help="generate a synthetic dataset")).set_defaults(func=cmd_synthesize)
    common(sub.add_parser("train", help="train one run and save it")).set_defaults(func=cmd_train)
    p = common(sub.add_parser("predict", help="score a dataset with a saved run"))
    p.add_argument("--run", help="run directory written by 'train'")
    p.add_argument("--data", required=True, help="dataset JSON or data CSV")
    p.add_argument("--labels", help="labels CSV (with a data CSV)")
    p.add_argument("--normalized", action="store_true", help="input is already normalized")
    p.set_defaults(func=cmd_predict)
    common(sub.add_parser("compare", help="compare protocols")).set_defaults(func=cmd_compare)
    common(sub.add_parser("sweep", help="run a robustness sweep")).set_defaults(func=cmd_sweep)
    p = common(sub.add_parser("gradcheck", help="finite-difference gradient suite"))
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    p = common(sub.add_parser("report", help="re-emit a saved report"))
    p.add_argument("--report", help="report.json to re-emit")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TypeError, KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
