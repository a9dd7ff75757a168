"""Measurement probes for trained representations.

Each probe returns a :class:`ProbeReport`.  Probes that fit an auxiliary
classifier fit it on one split of the rows and report on the disjoint
remainder.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from mian import nn
from mian import tensor as T
from mian.data import TRAIN, make_batch
from mian.errors import UsageError
from mian.objectives import source_classification_loss


@dataclass
class ProbeReport:
    name: str
    value: float
    auxiliary: dict = field(default_factory=dict)

    def to_json(self):
        def clean(v):
            if isinstance(v, (bool, np.bool_)):
                return bool(v)
            if isinstance(v, (int, np.integer)):
                return int(v)
            v = float(v)
            return v if math.isfinite(v) else str(v)

        return json.dumps(
            {"name": self.name, "value": clean(self.value), "auxiliary": {k: clean(v) for k, v in self.auxiliary.items()}},
            sort_keys=False,
        )

    @classmethod
    def from_json(cls, line):
        obj = json.loads(line)
        return cls(obj["name"], float(obj["value"]), {k: v for k, v in obj["auxiliary"].items()})


@dataclass
class ProbeConfig:
    hidden: tuple = (32,)
    steps: int = 400
    lr: float = 0.01
    heldout_fraction: float = 0.3
    seed: int = 0


# ---------------------------------------------------------------------------
# auxiliary classifier


@dataclass
class ProbeModel:
    mlp: nn.Mlp
    mean: np.ndarray
    scale: np.ndarray

    def logits(self, x):
        x = (np.asarray(x, dtype=np.float64) - self.mean) / self.scale
        return nn.forward(self.mlp, x, frozen=True).data

    def log_proba(self, x):
        return T.log_softmax(self.logits(x)).data

    def predict(self, x):
        return np.argmax(self.logits(x), axis=1)


def fit_probe(x, y, n_classes, cfg=ProbeConfig()):
    """Full-batch Adam on softmax cross-entropy; inputs standardised on the fit rows."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    xs = T.Tensor((x - mu) / sd)
    mlp = nn.init_mlp([x.shape[1], *cfg.hidden, n_classes], seed=cfg.seed)
    params = mlp.parameters()
    opt = nn.make_optimizer("adam", params, cfg.lr, beta2=0.999)
    for _ in range(cfg.steps):
        loss = source_classification_loss(nn.forward(mlp, xs), y)
        T.backward(loss)
        nn.step(opt, params)
    return ProbeModel(mlp, mu, sd)


def _split(n, fraction, seed):
    perm = np.random.default_rng(seed).permutation(n)
    n_out = max(1, int(round(fraction * n)))
    if n_out >= n:
        raise UsageError("not enough rows to hold out a split")
    return perm[n_out:], perm[:n_out]


# ---------------------------------------------------------------------------
# probes


def empirical_mutual_information(representations, domains, probe_cfg=ProbeConfig()):
    """Heldout variational estimate of I(Z;V) with H(V) taken as log(N+1).

    ``domains`` are 1-based labels.  The auxiliary classifier is fresh, not
    the discriminator used during training.
    """
    z = np.asarray(representations, dtype=np.float64)
    v = np.asarray(domains, dtype=np.int64)
    labels = np.unique(v)
    if labels.size < 2:
        raise UsageError("mutual information probe needs at least two domains")
    k = int(labels.max())
    fit_idx, out_idx = _split(len(v), probe_cfg.heldout_fraction, probe_cfg.seed)
    probe = fit_probe(z[fit_idx], v[fit_idx] - 1, k, probe_cfg)
    logp = probe.log_proba(z[out_idx])[np.arange(out_idx.size), v[out_idx] - 1]
    raw = float(logp.mean() + math.log(k))
    return ProbeReport(
        "mutual_information",
        max(raw, 0.0),
        {"raw": raw, "entropy_v": math.log(k), "heldout_rows": int(out_idx.size)},
    )


def pad_from_error(eps):
    """2(1 - 2*eps), clamped to [0, 2]; returns (value, raw)."""
    raw = 2.0 * (1.0 - 2.0 * float(eps))
    return min(max(raw, 0.0), 2.0), raw


def proxy_a_distance(src_repr, tgt_repr, probe_cfg=ProbeConfig()):
    """2(1 - 2*eps) with eps the heldout error of a fresh source-vs-target classifier.

    Each arm is split with a generator seeded by ``probe_cfg.seed``.
    """
    src = np.asarray(src_repr, dtype=np.float64)
    tgt = np.asarray(tgt_repr, dtype=np.float64)
    if src.size == 0 or tgt.size == 0 or src.ndim != 2 or tgt.ndim != 2:
        raise UsageError("proxy A-distance needs two non-empty representation matrices")
    s_fit, s_out = _split(len(src), probe_cfg.heldout_fraction, probe_cfg.seed)
    t_fit, t_out = _split(len(tgt), probe_cfg.heldout_fraction, probe_cfg.seed)
    x_fit = np.concatenate([src[s_fit], tgt[t_fit]])
    y_fit = np.concatenate([np.zeros(s_fit.size, dtype=np.int64), np.ones(t_fit.size, dtype=np.int64)])
    probe = fit_probe(x_fit, y_fit, 2, probe_cfg)
    wrong = np.sum(probe.predict(src[s_out]) != 0) + np.sum(probe.predict(tgt[t_out]) != 1)
    eps = float(wrong / (s_out.size + t_out.size))
    value, raw = pad_from_error(eps)
    return ProbeReport("proxy_a_distance", value, {"raw": raw, "heldout_error": eps})


def _scores(h, z):
    if isinstance(h, nn.Mlp):
        return nn.forward(h, z, frozen=True).data
    if isinstance(h, ProbeModel):
        return h.logits(z)
    return np.asarray(h(z))


def empirical_hdiv_mixture(representations, domains, trained_h):
    """Average one-vs-rest empirical H-divergence of the argmax decisions of ``trained_h``.

    For each domain v the hypothesis is "argmax h(z) == v"; its error is the
    miss rate on domain v plus the false-alarm rate on the other domains.
    """
    z = np.asarray(representations, dtype=np.float64)
    v = np.asarray(domains, dtype=np.int64)
    scores = _scores(trained_h, z)
    k = scores.shape[1]
    pred = np.argmax(scores, axis=1) + 1
    terms = {}
    for dom in range(1, k + 1):
        own = v == dom
        if not own.any() or own.all():
            raise UsageError(f"domain {dom} has no samples (or no complement)")
        err = np.mean(pred[own] != dom) + np.mean(pred[~own] == dom)
        terms[f"d_{dom}"] = 2.0 * (1.0 - err)
    return ProbeReport("hdiv_mixture", float(np.mean(list(terms.values()))), terms)


# ---------------------------------------------------------------------------
# SVD-entropy


def _round_robin(n):
    """Pairings for n (even) columns so every pair meets once per sweep."""
    order = list(range(n))
    rounds = []
    for _ in range(n - 1):
        rounds.append((np.array(order[: n // 2]), np.array(order[::-1][: n // 2])))
        order = [order[0], order[-1], *order[1:-1]]
    return rounds


def jacobi_singular_values(a, tol=1e-15, max_sweeps=80):
    """Singular values by one-sided (Hestenes) Jacobi, largest first.

    Disjoint column pairs are rotated simultaneously in round-robin order.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2:
        raise UsageError("expected a matrix")
    if a.shape[0] < a.shape[1]:
        a = a.T
    n = a.shape[1]
    if n % 2:
        a = np.concatenate([a, np.zeros((a.shape[0], 1))], axis=1)
    if a.shape[1] > 1:
        rounds = _round_robin(a.shape[1])
        for _ in range(max_sweeps):
            rotated = False
            for p, q in rounds:
                ap, aq = a[:, p], a[:, q]
                alpha = np.einsum("ij,ij->j", ap, ap)
                beta = np.einsum("ij,ij->j", aq, aq)
                gamma = np.einsum("ij,ij->j", ap, aq)
                act = np.abs(gamma) > tol * np.sqrt(alpha * beta)
                if not act.any():
                    continue
                rotated = True
                g = np.where(act, gamma, 1.0)
                zeta = (beta - alpha) / (2.0 * g)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                t = np.where(act, t, 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
            if not rotated:
                break
    sv = np.sqrt(np.einsum("ij,ij->j", a, a))[:n]
    return np.sort(sv)[::-1]


def svd_entropy(representations):
    """Shannon entropy of the normalised squared singular-value spectrum."""
    sv = jacobi_singular_values(representations)
    energy = sv * sv
    total = energy.sum()
    if total == 0.0:
        return ProbeReport("svd_entropy", 0.0, {"zero_matrix": True})
    rho = energy[energy > 0] / total
    h = float(-np.sum(rho * np.log(rho)))
    return ProbeReport("svd_entropy", max(h, 0.0), {"zero_matrix": False, "rank_bound": math.log(min(np.shape(representations)))})


# ---------------------------------------------------------------------------
# gradient variance


@dataclass
class VarianceProbeConfig:
    batches: int = 64
    m: int = 16
    beta: float = 1.0
    objective: str = "multibinary"
    seed: int = 0
    full_batch: bool = False


def _full_batch(datasets):
    xs, vs = [], []
    for ds in datasets:
        idx = ds.rows(TRAIN)
        xs.append(ds.features[idx])
        vs.append(np.full(idx.size, ds.domain))
    return np.concatenate(xs), np.concatenate(vs)


def gradient_variance_probe(bundle, datasets, cfg=VarianceProbeConfig()):
    """Per-parameter variance of the encoder's adversarial gradient across mini-batches.

    Covers the weights and biases of the first and last encoder layers;
    returns their mean variance, with its natural log in the auxiliary map.
    """
    from mian.train import adversarial_loss

    if cfg.batches < 2:
        raise UsageError("gradient variance needs at least two batches")
    enc = bundle.encoder
    last = len(enc.layers) - 1
    probed = {"bottom": ["encoder.0.weight", "encoder.0.bias"], "top": [f"encoder.{last}.weight", f"encoder.{last}.bias"]}
    params = enc.parameters("encoder.")
    rng = np.random.default_rng(cfg.seed)
    samples = {"bottom": [], "top": []}
    for _ in range(cfg.batches):
        if cfg.full_batch:
            x, v = _full_batch(datasets)
        else:
            batch = make_batch(datasets, cfg.m, rng)
            x, v = batch.x, batch.domains
        nn.zero_grad(params)
        z = nn.forward(enc, T.Tensor(x))
        loss = T.scale(adversarial_loss(bundle, z, v, cfg.objective), cfg.beta)
        T.backward(loss)
        for where, names in probed.items():
            samples[where].append(np.concatenate([params[n].grad.ravel() for n in dict.fromkeys(names)]))
        nn.zero_grad(params)
    per_layer = {k: np.var(np.stack(s), axis=0, ddof=1) for k, s in samples.items()}
    if last == 0:
        per_layer.pop("top")
    all_vars = np.concatenate(list(per_layer.values()))
    value = float(all_vars.mean())
    aux = {f"variance_{k}": float(v.mean()) for k, v in per_layer.items()}
    aux["log_variance"] = math.log(value) if value > 0 else float("-inf")
    aux["batches"] = cfg.batches
    return ProbeReport("gradient_variance", value, aux)
