"""Command-line driver.

Subcommands: verify, train, probe-variance, metrics, export-repr, summarize.
Exit status is 0 iff no check failed and no run diverged; usage errors
exit with 2.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from mian import experiment as X
from mian.config import load_config, parse_config
from mian.data import load_csv_domains
from mian.errors import DimensionError, DivergenceError, ParseError, SchemaError, UsageError
from mian.oracle import run_suite
from mian.train import TRAINERS, encode

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _emit(obj, out=None):
    line = json.dumps(obj, sort_keys=False)
    print(line, file=out or sys.stdout)
    return line


def cmd_verify(args):
    reports = run_suite(seed=args.seed, variance_resamples=args.resamples, inject_fault=args.inject_fault)
    for rep in reports:
        print(rep.to_json())
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def _selected(values, override):
    return tuple(override) if override else values


def cmd_train(args):
    cfg = load_config(args.config)
    status = EXIT_OK
    for arm in _selected(cfg.arms, args.arms):
        for seed in _selected(cfg.seeds, args.seeds):
            datasets = cfg.data.build(seed, Path(cfg.source_path).parent)
            tcfg = cfg.train_config(seed)
            run_dir = cfg.run_dir(arm, seed)
            try:
                bundle, records = TRAINERS[arm](tcfg, datasets)
            except DivergenceError as exc:
                print(f"error: {arm} seed {seed} diverged: {exc}", file=sys.stderr)
                status = EXIT_FAIL
                continue
            probes = X.run_probes(
                bundle, datasets, cfg.probes.probe_rows, cfg.probes.probe_steps, seed, _probe_names(cfg.probes)
            )
            X.write_run(run_dir, cfg.source_text, bundle, records, probes)
            last = records[-1]
            _emit({"arm": arm, "seed": seed, "dir": str(run_dir), "acc_source_avg": last.acc_source_avg,
                   "acc_target": last.acc_target})
    return status


def _probe_names(toggles):
    names = ("mutual_information", "proxy_a_distance", "hdiv_mixture", "svd_entropy")
    return [n for n in names if getattr(toggles, n)]


def cmd_probe_variance(args):
    cfg = load_config(args.config)
    step = cfg.probes.variance_step
    if step > cfg.train.total_steps:
        raise UsageError("probes.variance_step exceeds train.total_steps")
    lines = []
    wins = 0
    seeds = _selected(cfg.seeds, args.seeds)
    for seed in seeds:
        datasets = cfg.data.build(seed, Path(cfg.source_path).parent)
        row = {"seed": seed, "step": step}
        for arm in ("mian", "multi_d"):
            rep = X.variance_at_step(cfg.train_config(seed), datasets, arm, step, cfg.probes.variance_batches, seed)
            row[f"{arm}_log_variance"] = rep.auxiliary["log_variance"]
            row[f"{arm}_variance"] = rep.value
        wins += row["mian_log_variance"] < row["multi_d_log_variance"]
        lines.append(_emit(row))
    lines.append(_emit({"summary": True, "seeds": len(seeds), "mian_lower": int(wins)}))
    out_dir = Path(cfg.run_dir("probe_variance", 0)).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "probe_variance.jsonl").write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    return EXIT_OK


def _run_datasets(run_dir):
    text = (run_dir / X.CONFIG_FILE).read_text(encoding="utf-8")
    cfg = parse_config(text, source_path=str(run_dir / X.CONFIG_FILE))
    seed = int(run_dir.name.rsplit("seed", 1)[1])
    return cfg, seed


def cmd_metrics(args):
    """Recompute the probe battery of an existing run directory from its checkpoint."""
    run_dir = Path(args.run_dir)
    cfg, seed = _run_datasets(run_dir)
    datasets = cfg.data.build(seed, Path(args.data_base) if args.data_base else Path("."))
    bundle = X.load_bundle(run_dir / X.CHECKPOINT_FILE)
    for rep in X.run_probes(bundle, datasets, cfg.probes.probe_rows, cfg.probes.probe_steps, seed):
        print(rep.to_json())
    return EXIT_OK


def export_representations(bundle, datasets, path):
    d_in = bundle.encoder.input_dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"repr_{j}" for j in range(bundle.encoder.output_dim)] + ["label", "domain"])
        for ds in datasets:
            if ds.dim != d_in:
                raise DimensionError(f"dataset has {ds.dim} features, checkpoint encoder expects {d_in}")
            z = encode(bundle, ds.features).data
            labels = ds.class_labels if ds.class_labels is not None else np.full(ds.n, -1)
            for row, lab in zip(z, labels):
                w.writerow([repr(float(x)) for x in row] + [int(lab), ds.domain])


def cmd_export_repr(args):
    bundle = X.load_bundle(args.checkpoint)
    datasets = load_csv_domains(args.dataset)
    export_representations(bundle, datasets, args.out)
    return EXIT_OK


def summarize(experiment_dir, out_path):
    """Means over seeds of the final metrics row and the probe values, one CSV row per arm."""
    experiment_dir = Path(experiment_dir)
    per_arm = {}
    for run in sorted(p for p in experiment_dir.iterdir() if (p / X.METRICS_FILE).exists()):
        arm = run.name.rsplit("-seed", 1)[0]
        final = X.read_metrics_csv(run / X.METRICS_FILE)[-1]
        values = {k: v for k, v in final.items() if k != "step" and v is not None}
        if (run / X.PROBES_FILE).exists():
            values.update({f"probe_{r.name}": r.value for r in X.read_probes(run / X.PROBES_FILE)})
        per_arm.setdefault(arm, []).append(values)
    if not per_arm:
        raise UsageError(f"no run directories under {experiment_dir}")
    columns = sorted({k for runs in per_arm.values() for r in runs for k in r})
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", "n_seeds"] + columns)
        for arm in sorted(per_arm):
            runs = per_arm[arm]
            row = [arm, len(runs)]
            for c in columns:
                vals = [r[c] for r in runs if c in r]
                row.append(repr(float(np.mean(vals))) if vals else "")
            w.writerow(row)


def cmd_summarize(args):
    out = args.out or str(Path(args.experiment_dir) / "summary.csv")
    summarize(args.experiment_dir, out)
    print(out)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="mian", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run the exhaustive oracle suite")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--resamples", type=int, default=10_000)
    v.add_argument("--inject-fault", action="store_true", help="flip one inequality (negative control)")
    v.set_defaults(fn=cmd_verify)

    t = sub.add_parser("train", help="train every configured arm and seed")
    t.add_argument("config")
    t.add_argument("--arms", nargs="+", choices=sorted(TRAINERS))
    t.add_argument("--seeds", nargs="+", type=int)
    t.set_defaults(fn=cmd_train)

    pv = sub.add_parser("probe-variance", help="paired gradient-variance probe, unified vs per-source heads")
    pv.add_argument("config")
    pv.add_argument("--seeds", nargs="+", type=int)
    pv.set_defaults(fn=cmd_probe_variance)

    m = sub.add_parser("metrics", help="recompute probes for a run directory")
    m.add_argument("run_dir")
    m.add_argument("--data-base", help="directory that relative CSV paths in the echoed config refer to")
    m.set_defaults(fn=cmd_metrics)

    e = sub.add_parser("export-repr", help="write encoder outputs of a CSV dataset")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("out")
    e.set_defaults(fn=cmd_export_repr)

    s = sub.add_parser("summarize", help="average final metrics over seeds")
    s.add_argument("experiment_dir")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_summarize)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, SchemaError, ParseError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
