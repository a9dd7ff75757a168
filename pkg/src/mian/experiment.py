"""Run-level plumbing shared by the CLI, the scripts and the acceptance tests:
probe batteries on a trained bundle and the per-seed output directory layout.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from mian import nn
from mian.data import TEST
from mian.errors import UsageError
from mian.metrics import (
    ProbeConfig,
    ProbeReport,
    VarianceProbeConfig,
    empirical_hdiv_mixture,
    empirical_mutual_information,
    fit_probe,
    gradient_variance_probe,
    proxy_a_distance,
    svd_entropy,
)
from mian.train import RECORD_COLUMNS, TRAINERS, ModelBundle, encode

METRICS_FILE = "metrics.csv"
PROBES_FILE = "probes.jsonl"
CHECKPOINT_FILE = "checkpoint.bin"
CONFIG_FILE = "config.cfg"


def heldout_representations(bundle, datasets, rows_per_domain=None):
    """Encoder outputs of each domain's test rows, stacked, with 1-based domain labels."""
    zs, vs = [], []
    for ds in datasets:
        x = ds.feature_view(TEST)
        if rows_per_domain is not None:
            x = x[:rows_per_domain]
        zs.append(encode(bundle, x).data)
        vs.append(np.full(x.shape[0], ds.domain))
    return np.concatenate(zs), np.concatenate(vs)


def run_probes(bundle, datasets, probe_rows=400, probe_steps=400, seed=0, which=None):
    """Final-representation probes on test rows.

    The mixture H-divergence uses the trained unified discriminator when the
    bundle has one, and otherwise a fresh (N+1)-way probe fitted on a
    disjoint half of the rows.
    """
    which = set(which or ("mutual_information", "proxy_a_distance", "hdiv_mixture", "svd_entropy"))
    pcfg = ProbeConfig(steps=probe_steps, seed=seed)
    z, v = heldout_representations(bundle, datasets, probe_rows)
    n_dom = len(datasets)
    reports = []
    if "mutual_information" in which:
        reports.append(empirical_mutual_information(z, v, pcfg))
    if "proxy_a_distance" in which:
        reports.append(proxy_a_distance(z[v < n_dom], z[v == n_dom], pcfg))
    if "hdiv_mixture" in which:
        if bundle.arm == "mian":
            rep = empirical_hdiv_mixture(z, v, bundle.discriminators[0])
            rep.auxiliary["hypothesis"] = 0.0
        else:
            perm = np.random.default_rng(seed).permutation(len(v))
            fit, out = perm[: len(v) // 2], perm[len(v) // 2 :]
            probe = fit_probe(z[fit], v[fit] - 1, n_dom, pcfg)
            rep = empirical_hdiv_mixture(z[out], v[out], probe)
            rep.auxiliary["hypothesis"] = 1.0
        reports.append(rep)
    if "svd_entropy" in which:
        rep = svd_entropy(z[v == n_dom])
        rep.auxiliary["rows"] = int(np.sum(v == n_dom))
        reports.append(rep)
    return reports


def variance_at_step(cfg, datasets, arm, step, batches=64, seed=0):
    """Train ``arm`` up to ``step`` and probe the adversarial-gradient variance there."""
    bundle, _ = TRAINERS[arm](cfg, datasets, stop_after=step)
    vcfg = VarianceProbeConfig(
        batches=batches, m=cfg.m, beta=cfg.schedule.beta0, objective=cfg.disc_objective, seed=seed
    )
    return gradient_variance_probe(bundle, datasets, vcfg)


# ---------------------------------------------------------------------------
# output files


def write_metrics_csv(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for rec in records:
            w.writerow(rec.as_row())


def read_metrics_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (None if val == "" else float(val)) for k, val in row.items()} for row in rows]


def write_probes(reports, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rep in reports:
            fh.write(rep.to_json() + "\n")


def read_probes(path):
    with open(path, encoding="utf-8") as fh:
        return [ProbeReport.from_json(line) for line in fh if line.strip()]


def save_bundle(bundle, path):
    """Checkpoint every parameter group; the arm rides along as an empty ``meta.arm.*`` array."""
    arrays = {f"meta.arm.{bundle.arm}": np.zeros(0)}
    arrays.update(bundle.named_parameters())
    nn.save_checkpoint(path, arrays)


def load_bundle(path):
    arrays = nn.load_checkpoint(path)
    arms = [k[len("meta.arm."):] for k in arrays if k.startswith("meta.arm.")]
    if len(arms) != 1 or arms[0] not in TRAINERS:
        raise UsageError(f"{path}: checkpoint does not record a known arm")
    discs = []
    while f"disc{len(discs)}.0.weight" in arrays:
        discs.append(nn.mlp_from_arrays(arrays, f"disc{len(discs)}."))
    return ModelBundle(
        arms[0], nn.mlp_from_arrays(arrays, "encoder."), nn.mlp_from_arrays(arrays, "classifier."), discs
    )


def write_run(run_dir, config_text, bundle, records, probes):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / CONFIG_FILE).write_bytes(config_text.encode("utf-8"))
    write_metrics_csv(records, run_dir / METRICS_FILE)
    write_probes(probes, run_dir / PROBES_FILE)
    save_bundle(bundle, run_dir / CHECKPOINT_FILE)
