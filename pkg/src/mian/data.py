"""Synthetic multi-domain datasets, CSV ingestion and mini-batch assembly."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from mian.errors import ParseError, SchemaError, UsageError

TRAIN, TEST = "train", "test"


def _frozen(arr):
    arr = np.array(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DomainDataset:
    """Rows of one domain.

    ``class_labels`` uses -1 for unlabeled rows.  ``domain`` is 1-based; by
    convention the last domain of an experiment (N+1) is the target.
    """

    features: np.ndarray
    class_labels: np.ndarray | None
    domain: int
    split: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise UsageError("features must be a matrix")
        object.__setattr__(self, "features", _frozen(feats))
        if self.class_labels is not None:
            labels = np.asarray(self.class_labels, dtype=np.int64)
            if labels.shape != (feats.shape[0],):
                raise UsageError("one class label per row required")
            object.__setattr__(self, "class_labels", _frozen(labels))
        split = np.asarray(self.split)
        if split.shape != (feats.shape[0],) or not set(np.unique(split)) <= {TRAIN, TEST}:
            raise UsageError("split must tag every row with 'train' or 'test'")
        object.__setattr__(self, "split", _frozen(split))

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def rows(self, split=None, labeled=False):
        mask = np.ones(self.n, dtype=bool)
        if split is not None:
            mask &= self.split == split
        if labeled:
            if self.class_labels is None:
                return np.array([], dtype=np.int64)
            mask &= self.class_labels >= 0
        return np.flatnonzero(mask)

    def feature_view(self, split=None):
        return self.features[self.rows(split)]

    def labeled_view(self, split=None):
        idx = self.rows(split, labeled=True)
        return self.features[idx], self.class_labels[idx] if idx.size else np.array([], dtype=np.int64)


def _make_split(n, test_fraction, rng):
    split = np.full(n, TRAIN, dtype=object)
    n_test = int(round(test_fraction * n))
    if n_test:
        split[rng.permutation(n)[:n_test]] = TEST
    return split.astype(str)


# ---------------------------------------------------------------------------
# generators


def two_moons(n, noise_sd, rng):
    """Reference two-moons sampler: n//2 rows of class 0, the rest class 1."""
    n0 = n // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([upper, lower]) + noise_sd * rng.standard_normal((n, 2))
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    return x, y


MOONS_CENTER = np.array([0.5, 0.25])


def rotate(x, angle_deg, center=MOONS_CENTER):
    if angle_deg % 360.0 == 0.0:
        return np.array(x, dtype=np.float64)  # exact identity, no round-off through the centre shift
    theta = np.deg2rad(angle_deg)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    return (x - center) @ rot.T + center


def gen_rotated_moons(n_per_domain, angles_deg, noise_sd=0.1, seed=0, test_fraction=0.2, center=MOONS_CENTER):
    """Two-moons domains, one per angle, rotated about the moons' centre.

    The last angle is the target domain.  Each domain draws from its own
    child of ``SeedSequence(seed)``.
    """
    angles_deg = list(angles_deg)
    if len(angles_deg) < 2:
        raise UsageError("need at least one source angle and a target angle")
    if n_per_domain < 2:
        raise UsageError("n_per_domain must be at least 2")
    children = np.random.SeedSequence(seed).spawn(len(angles_deg))
    out = []
    for v, (angle, child) in enumerate(zip(angles_deg, children), start=1):
        rng = np.random.default_rng(child)
        x, y = two_moons(n_per_domain, noise_sd, rng)
        split = _make_split(n_per_domain, test_fraction, rng)
        out.append(DomainDataset(rotate(x, angle, np.asarray(center, dtype=np.float64)), y, v, split))
    return out


def gen_shifted_gaussians(
    n_per_domain, n_classes, domain_offsets, seed=0, class_spread=3.0, noise_sd=1.0, test_fraction=0.2
):
    """Isotropic Gaussian class clusters, translated by a per-domain offset.

    Class means are drawn once from ``seed`` and shared by every domain.
    """
    offsets = [np.atleast_1d(np.asarray(o, dtype=np.float64)) for o in domain_offsets]
    if len(offsets) < 2:
        raise UsageError("need at least two domains")
    dims = {o.shape for o in offsets}
    if len(dims) != 1 or offsets[0].ndim != 1:
        raise UsageError("all domain offsets must be vectors of the same length")
    if n_per_domain < 2 or n_classes < 1:
        raise UsageError("n_per_domain must be >= 2 and n_classes >= 1")
    d = offsets[0].size
    seq = np.random.SeedSequence(seed)
    mean_seq, *children = seq.spawn(len(offsets) + 1)
    class_means = class_spread * np.random.default_rng(mean_seq).standard_normal((n_classes, d))
    out = []
    for v, (offset, child) in enumerate(zip(offsets, children), start=1):
        rng = np.random.default_rng(child)
        y = np.arange(n_per_domain) % n_classes
        x = class_means[y] + offset + noise_sd * rng.standard_normal((n_per_domain, d))
        split = _make_split(n_per_domain, test_fraction, rng)
        out.append(DomainDataset(x, y, v, split))
    return out


def standardize_by_sources(datasets):
    """Centre and scale every domain with statistics of the source training rows."""
    src = np.concatenate([ds.feature_view(TRAIN) for ds in datasets[:-1]])
    mu = src.mean(axis=0)
    sd = src.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return [replace(ds, features=(ds.features - mu) / sd) for ds in datasets]


# ---------------------------------------------------------------------------
# CSV


def write_csv(datasets, path):
    """Write one or more domains to the ``feature_*,label,domain`` layout."""
    if isinstance(datasets, DomainDataset):
        datasets = [datasets]
    d = datasets[0].dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"feature_{j}" for j in range(d)] + ["label", "domain"])
        for ds in datasets:
            labels = ds.class_labels if ds.class_labels is not None else np.full(ds.n, -1)
            for row, lab in zip(ds.features, labels):
                w.writerow([repr(float(x)) for x in row] + [int(lab), ds.domain])


def _read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty CSV file") from None
        if len(header) < 3 or header[-2:] != ["label", "domain"]:
            raise SchemaError("header must be feature_0,...,feature_{d-1},label,domain")
        d = len(header) - 2
        if header[:d] != [f"feature_{j}" for j in range(d)]:
            raise SchemaError("feature columns must be named feature_0 .. feature_{d-1} in order")
        feats, labels, domains = [], [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != d + 2:
                raise SchemaError(f"line {line}: expected {d + 2} fields, got {len(row)}")
            try:
                feats.append([float(x) for x in row[:d]])
                lab, dom = int(row[d]), int(row[d + 1])
            except ValueError as exc:
                raise ParseError(str(exc), line=line) from None
            if lab < -1:
                raise ParseError(f"label must be >= 0 or -1, got {lab}", line=line)
            if dom < 1:
                raise ParseError(f"domain must be >= 1, got {dom}", line=line)
            labels.append(lab)
            domains.append(dom)
    if not feats:
        raise SchemaError("CSV file has no data rows")
    return np.array(feats), np.array(labels, dtype=np.int64), np.array(domains, dtype=np.int64)


def load_csv_domains(path, test_fraction=0.2, seed=0):
    """Load every domain present in a CSV file, ordered by domain label."""
    x, y, v = _read_rows(path)
    out = []
    for dom in np.unique(v):
        idx = np.flatnonzero(v == dom)
        rng = np.random.default_rng([seed, int(dom)])
        out.append(DomainDataset(x[idx], y[idx], int(dom), _make_split(idx.size, test_fraction, rng)))
    return out


def load_csv(path, test_fraction=0.2, seed=0):
    """Load a single-domain CSV file."""
    domains = load_csv_domains(path, test_fraction, seed)
    if len(domains) != 1:
        raise SchemaError(f"expected one domain in {path}, found {len(domains)}; use load_csv_domains")
    return domains[0]


# ---------------------------------------------------------------------------
# batches


@dataclass
class MultiDomainBatch:
    """``x`` holds m rows per domain, sources first, target last."""

    x: np.ndarray
    domains: np.ndarray
    class_labels: np.ndarray
    m: int

    @property
    def n_domains(self):
        return int(self.domains.max())

    def block(self, v):
        return np.flatnonzero(self.domains == v)


def check_experiment(datasets):
    if len(datasets) < 2:
        raise UsageError("need at least one source and one target domain")
    if [ds.domain for ds in datasets] != list(range(1, len(datasets) + 1)):
        raise UsageError("datasets must carry domain labels 1..N+1 in order")
    if len({ds.dim for ds in datasets}) != 1:
        raise UsageError("feature dimension differs between domains")


def make_batch(datasets, m, rng):
    """Sample m training rows per domain without replacement.

    Source rows come from the labeled training pool; target rows from the
    whole training pool, and their labels are never read.
    """
    check_experiment(datasets)
    if m < 1:
        raise UsageError("m must be positive")
    xs, vs, ys = [], [], []
    for ds in datasets[:-1]:
        pool = ds.rows(TRAIN, labeled=True)
        if pool.size < m:
            raise UsageError(f"domain {ds.domain} has {pool.size} labeled training rows, need {m}")
        pick = pool[rng.choice(pool.size, m, replace=False)]
        xs.append(ds.features[pick])
        ys.append(ds.class_labels[pick])
        vs.append(np.full(m, ds.domain))
    tgt = datasets[-1]
    pool = tgt.rows(TRAIN)
    if pool.size < m:
        raise UsageError(f"target domain has {pool.size} training rows, need {m}")
    xs.append(tgt.features[pool[rng.choice(pool.size, m, replace=False)]])
    vs.append(np.full(m, tgt.domain))
    return MultiDomainBatch(np.concatenate(xs), np.concatenate(vs), np.concatenate(ys), m)
