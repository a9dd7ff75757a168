"""Exact checks of the information-theoretic identities on finite supports.

Everything here works on explicit probability tables, so results are
deterministic up to float round-off.  The ``verify_*`` functions return an
:class:`OracleReport`; ``run_suite`` drives the randomized instances used
by ``mian verify``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from mian.errors import UsageError


@dataclass
class OracleReport:
    name: str
    passed: bool
    max_deviation: float
    details: dict = field(default_factory=dict)

    def to_json(self):
        def clean(v):
            if isinstance(v, (bool, np.bool_)):
                return bool(v)
            if isinstance(v, (int, np.integer)):
                return int(v)
            if isinstance(v, (float, np.floating)):
                return float(v) if math.isfinite(v) else str(v)
            return v

        return json.dumps(
            {
                "name": self.name,
                "passed": bool(self.passed),
                "max_deviation": clean(self.max_deviation),
                "details": {k: clean(v) for k, v in self.details.items()},
            }
        )


@dataclass
class DiscreteJoint:
    """Probability table with axes (Z, V) or (Z, X, V)."""

    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim not in (2, 3):
            raise UsageError("joint table must have axes (Z, V) or (Z, X, V)")
        if np.any(t < 0):
            raise UsageError("probabilities must be non-negative")
        if abs(t.sum() - 1.0) > 1e-12:
            raise UsageError(f"joint table sums to {t.sum()!r}, not 1")
        self.table = t

    @property
    def p_zv(self):
        return self.table if self.table.ndim == 2 else self.table.sum(axis=1)

    @property
    def p_z(self):
        return self.p_zv.sum(axis=1)

    @property
    def p_v(self):
        return self.p_zv.sum(axis=0)

    def posterior(self):
        """P(v | z); rows with p(z)=0 get the prior."""
        pzv = self.p_zv
        pz = pzv.sum(axis=1, keepdims=True)
        return np.where(pz > 0, pzv / np.where(pz > 0, pz, 1.0), self.p_v[None, :])


def random_joint(rng, shape, sparsity=0.0):
    t = rng.dirichlet(np.ones(int(np.prod(shape)))).reshape(shape)
    if sparsity:
        t = t * (rng.random(shape) >= sparsity)
        if t.sum() == 0:
            t.flat[0] = 1.0
        t = t / t.sum()
    return DiscreteJoint(t)


def _xlogy_ratio(p, q):
    """sum p * log(p / q) with 0 log 0 := 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def entropy(p):
    p = np.asarray(p, dtype=np.float64)
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def kl(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any((p > 0) & (q <= 0)):
        return math.inf
    return _xlogy_ratio(p, q)


def mi_exact(j):
    """I(Z;V) = KL(P_ZV || P_Z P_V)."""
    pzv = j.p_zv
    return _xlogy_ratio(pzv, np.outer(pzv.sum(axis=1), pzv.sum(axis=0)))


def mi_exact_entropies(j):
    """Second route: H(Z) + H(V) - H(Z,V), summed in a different order."""
    pzv = j.p_zv
    return entropy(pzv.sum(axis=1)) + entropy(pzv.sum(axis=0)) - entropy(pzv.ravel()[::-1])


def variational_mi(j, h):
    """sum_v P(v) E_{z|v}[log h_v(z)] + H(V) for a row-stochastic ``h`` of shape |Z| x |V|."""
    pzv = j.p_zv
    h = np.asarray(h, dtype=np.float64)
    mask = pzv > 0
    if np.any(h[mask] <= 0):
        return -math.inf
    return float(np.sum(pzv[mask] * np.log(h[mask]))) + entropy(j.p_v)


# ---------------------------------------------------------------------------
# identity checks


def verify_theorem2(j, n_random=100, rng=None, tol=1e-9):
    """The variational bound is tight at the posterior and never exceeded elsewhere."""
    rng = np.random.default_rng(0) if rng is None else rng
    mi = mi_exact(j)
    at_posterior = variational_mi(j, j.posterior())
    gap = abs(at_posterior - mi)
    worst_excess = -math.inf
    nz, nv = j.p_zv.shape
    for _ in range(n_random):
        h = rng.dirichlet(np.ones(nv), size=nz)
        worst_excess = max(worst_excess, variational_mi(j, h) - mi)
    passed = gap <= tol and worst_excess <= tol
    return OracleReport(
        "theorem2",
        passed,
        gap,
        {"mi": mi, "at_posterior": at_posterior, "worst_random_excess": worst_excess},
    )


def hdiv_exhaustive(p, q):
    """Complete-class H-divergence 2*max_A |P(A)-Q(A)| via the maximising set {p > q}."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise UsageError("distributions must be vectors over the same support")
    if p.size > 20:
        raise UsageError("support larger than 20 is not supported")
    return float(2.0 * np.sum(np.maximum(p - q, 0.0)))


def hdiv_enumerate(p, q):
    """2*max over all 2^K subsets, by brute force (K <= 12)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    k = p.size
    if k > 12:
        raise UsageError("enumeration limited to supports of size 12")
    masks = ((np.arange(2**k)[:, None] >> np.arange(k)[None, :]) & 1).astype(np.float64)
    diffs = masks @ p - masks @ q
    return float(2.0 * np.max(np.abs(diffs)))


def verify_lemma2(domains, tol=1e-12, flipped=False):
    """Mixture divergence average <= average pairwise divergence.

    ``flipped`` tests the reversed inequality instead; it exists as a
    negative control for the suite runner.
    """
    d = [np.asarray(x, dtype=np.float64) for x in domains]
    if len(d) < 2:
        raise UsageError("need at least two domains")
    if len({x.shape for x in d}) != 1:
        raise UsageError("domains must share one support")
    n_plus_1 = len(d)
    n = n_plus_1 - 1
    total = np.sum(d, axis=0)
    lhs = np.mean([hdiv_exhaustive(d[v], (total - d[v]) / n) for v in range(n_plus_1)])
    pair_sum = sum(hdiv_exhaustive(d[v], d[u]) for v in range(n_plus_1) for u in range(n_plus_1) if u != v)
    rhs = pair_sum / (n * n_plus_1)
    holds = rhs <= lhs + tol if flipped else lhs <= rhs + tol
    return OracleReport("lemma2", bool(holds), float(max(lhs - rhs, 0.0)), {"lhs": lhs, "rhs": rhs, "n_sources": n})


def _conditionals(pzxv):
    """P(Z | x, v) for each (x, v) with positive mass, and the masses."""
    pxv = pzxv.sum(axis=0)
    return pzxv / np.where(pxv > 0, pxv, 1.0)[None, :, :], pxv


def verify_theorem3(j, r, tol=1e-9):
    """I(Z;X,V) <= E_{x,v} KL(P_{Z|x,v} || R) + H(V) + max_h(...), and the gap identity.

    The gap between the two sides equals E_v KL(P_{Z|v} || R) for any prior R;
    both the inequality and that identity are checked.
    """
    t = j.table
    if t.ndim != 3:
        raise UsageError("the prior bound needs a joint over (Z, X, V)")
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (t.shape[0],) or abs(r.sum() - 1.0) > 1e-12 or np.any(r < 0):
        raise UsageError("prior must be a normalised vector over Z")

    # left side by the chain rule I(Z;V) + I(Z;X|V)
    zv = DiscreteJoint(t.sum(axis=1))
    i_zv = mi_exact(zv)
    pv = t.sum(axis=(0, 1))
    i_zx_given_v = 0.0
    for v in range(t.shape[2]):
        if pv[v] > 0:
            i_zx_given_v += pv[v] * mi_exact(DiscreteJoint(t[:, :, v] / pv[v]))
    lhs = i_zv + i_zx_given_v
    lhs_direct = mi_exact(DiscreteJoint(t.reshape(t.shape[0], -1)))

    cond, pxv = _conditionals(t)
    expected_kl = 0.0
    for x in range(t.shape[1]):
        for v in range(t.shape[2]):
            if pxv[x, v] > 0:
                expected_kl += pxv[x, v] * kl(cond[:, x, v], r)
    max_term = variational_mi(zv, zv.posterior()) - entropy(pv)
    rhs = expected_kl + entropy(pv) + max_term

    pz_given_v = zv.p_zv / np.where(pv > 0, pv, 1.0)[None, :]
    predicted_gap = sum(pv[v] * kl(pz_given_v[:, v], r) for v in range(t.shape[2]) if pv[v] > 0)
    gap = rhs - lhs
    identity_dev = abs(gap - predicted_gap) if math.isfinite(rhs) else 0.0
    chain_dev = abs(lhs - lhs_direct)
    passed = lhs <= rhs + tol and identity_dev <= tol and chain_dev <= tol
    return OracleReport(
        "theorem3",
        bool(passed),
        float(max(identity_dev, chain_dev, max(lhs - rhs, 0.0))),
        {"lhs": lhs, "rhs": rhs, "gap": gap, "predicted_gap": predicted_gap},
    )


# ---------------------------------------------------------------------------
# variance of the plug-in estimators


def variance_multi_disc_formula(m, n_sources, var_pair, cov_pair):
    """(1/m^2) (N/(N+1)^2 Var + N(N-1)/(N+1)^2 Cov)."""
    n = n_sources
    return (n / (n + 1) ** 2 * var_pair + n * (n - 1) / (n + 1) ** 2 * cov_pair) / m**2


def variance_unified_formula(m, n_sources, var_sum):
    """Var[I_m] / (m^2 (N+1)^2)."""
    return var_sum / (m**2 * (n_sources + 1) ** 2)


def plugin_mi(z, v, n_z, n_v):
    """Plug-in variational estimate: mean log of the tabular posterior + log(n_v).

    The tabular posterior is the empirical P(v | z), which maximises the
    sample objective.  Rows of ``z``/``v`` may be batched along axis 0.
    """
    z = np.atleast_2d(z)
    v = np.atleast_2d(v)
    r, m = z.shape
    counts = np.zeros((r, n_z, n_v))
    rows = np.repeat(np.arange(r), m)
    np.add.at(counts, (rows, z.ravel(), v.ravel()), 1.0)
    cz = counts.sum(axis=2, keepdims=True)
    post = counts / np.where(cz > 0, cz, 1.0)
    with np.errstate(divide="ignore"):
        logpost = np.where(counts > 0, np.log(np.where(post > 0, post, 1.0)), 0.0)
    return (counts * logpost).sum(axis=(1, 2)) / m + math.log(n_v)


def domain_distributions(n_sources, support=8, strength=0.6):
    """Fixed laws: every source is uniform, the target leans towards point 0.

    All source-vs-target pairs are then identically distributed, which is
    the equal-variance, equal-covariance setting of the variance formulas.
    """
    uniform = np.full(support, 1.0 / support)
    target = (1.0 - strength) * uniform
    target[0] += strength
    return np.vstack([np.tile(uniform, (n_sources, 1)), target])


@dataclass
class VarianceCheckConfig:
    m: int = 10
    resamples: int = 10_000
    n_values: tuple = (1, 2, 4, 6)
    support: int = 8
    strength: float = 0.6
    seed: int = 0


def variance_scaling_check(cfg=VarianceCheckConfig()):
    """Monte-Carlo variance of the unified and the summed pairwise estimators.

    For each N, ``resamples`` times draw m points from every domain, then
    evaluate (a) the unified estimate over all M = m(N+1) points and (b) the
    sum of N source-vs-target estimates.  Claims: (a) decreases in N with
    Var(N=2)/Var(N=6) >= 2, and (b) >= (a) for N >= 2.
    """
    if cfg.resamples < 100:
        raise UsageError("need at least 100 resamples")
    rng = np.random.default_rng(cfg.seed)
    unified, pairwise = {}, {}
    for n in cfg.n_values:
        laws = domain_distributions(n, cfg.support, cfg.strength)
        k = cfg.support
        draws = np.stack(
            [rng.choice(k, size=(cfg.resamples, cfg.m), p=laws[v]) for v in range(n + 1)], axis=1
        )  # resamples x (N+1) x m
        labels = np.broadcast_to(np.arange(n + 1)[None, :, None], draws.shape)
        est_u = plugin_mi(draws.reshape(cfg.resamples, -1), labels.reshape(cfg.resamples, -1), k, n + 1)
        unified[n] = float(np.var(est_u, ddof=1))
        total = np.zeros(cfg.resamples)
        for s in range(n):
            z = np.concatenate([draws[:, s, :], draws[:, n, :]], axis=1)
            u = np.concatenate([np.zeros((cfg.resamples, cfg.m), int), np.ones((cfg.resamples, cfg.m), int)], axis=1)
            total += plugin_mi(z, u, k, 2)
        pairwise[n] = float(np.var(total, ddof=1))
    ns = list(cfg.n_values)
    decreasing = all(unified[a] > unified[b] for a, b in zip(ns, ns[1:]))
    ratio = unified[2] / unified[6] if 2 in unified and 6 in unified else math.nan
    dominated = all(pairwise[n] >= unified[n] for n in ns if n >= 2)
    passed = decreasing and dominated and (math.isnan(ratio) or ratio >= 2.0)
    details = {"ratio_n2_n6": ratio, "decreasing": decreasing, "pairwise_dominates": dominated}
    for n in ns:
        details[f"var_unified_n{n}"] = unified[n]
        details[f"var_pairwise_n{n}"] = pairwise[n]
    return OracleReport("variance_scaling", bool(passed), 0.0, details)


# ---------------------------------------------------------------------------
# randomized suite


def _lemma2_domains(rng, n_sources, support=8):
    return rng.dirichlet(np.ones(support), size=n_sources + 1)


def run_suite(seed=0, variance_resamples=10_000, inject_fault=False):
    """One report per check; each aggregates a randomized batch of instances.

    ``inject_fault`` flips the mixture-vs-pairwise inequality so the suite must fail.
    """
    rng = np.random.default_rng(seed)

    reports = []
    # variational bound: 50 random joints, |Z| <= 8, |V| <= 5
    worst, ok = 0.0, True
    for _ in range(50):
        j = random_joint(rng, (rng.integers(2, 9), rng.integers(2, 6)), sparsity=rng.choice([0.0, 0.3]))
        rep = verify_theorem2(j, 100, rng)
        worst = max(worst, rep.max_deviation, max(rep.details["worst_random_excess"], 0.0))
        ok &= rep.passed
    reports.append(OracleReport("theorem2", ok, worst, {"instances": 50}))

    # MI two-route agreement
    worst = max(abs(mi_exact(j) - mi_exact_entropies(j)) for j in (random_joint(rng, (4, 3)) for _ in range(50)))
    reports.append(OracleReport("mi_two_routes", worst <= 1e-12, worst, {"instances": 50}))

    # H-divergence closed form vs enumeration
    worst = 0.0
    for _ in range(50):
        k = int(rng.integers(2, 13))
        p, q = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))
        worst = max(worst, abs(hdiv_exhaustive(p, q) - hdiv_enumerate(p, q)))
    reports.append(OracleReport("hdiv_enumeration", worst <= 1e-12, worst, {"instances": 50}))

    # mixture vs pairwise divergence: 100 tuples, N in {1,2,3,5}, K=8
    worst_excess, eq_dev, ok = 0.0, 0.0, True
    for i in range(100):
        n = (1, 2, 3, 5)[i % 4]
        rep = verify_lemma2(_lemma2_domains(rng, n), flipped=inject_fault)
        ok &= rep.passed
        worst_excess = max(worst_excess, rep.max_deviation)
        if n == 1:
            eq_dev = max(eq_dev, abs(rep.details["lhs"] - rep.details["rhs"]))
    ok = bool(ok and eq_dev <= 1e-12)
    reports.append(OracleReport("lemma2", ok, max(worst_excess, eq_dev), {"instances": 100, "n1_equality_dev": eq_dev}))

    # prior-based upper bound: 50 random (Z, X, V) joints with random priors, plus R = P_Z
    worst, ok = 0.0, True
    for _ in range(50):
        shape = (int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 4)))
        j = random_joint(rng, shape)
        for r in (rng.dirichlet(np.ones(shape[0])), j.table.sum(axis=(1, 2))):
            rep = verify_theorem3(j, r)
            ok &= rep.passed
            worst = max(worst, rep.max_deviation)
    reports.append(OracleReport("theorem3", ok, worst, {"instances": 50}))

    # formula algebra
    dev = abs(variance_unified_formula(10, 4, 1.0) - 1.0 / 2500) + abs(
        variance_multi_disc_formula(10, 1, 1.0, 123.0) - 0.25 / 100
    )
    reports.append(OracleReport("variance_formulas", dev <= 1e-15, dev, {}))

    reports.append(variance_scaling_check(VarianceCheckConfig(resamples=variance_resamples, seed=seed)))
    return reports
