import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mian import nn
from mian.data import gen_rotated_moons, standardize_by_sources
from mian.errors import UsageError
from mian.metrics import (
    ProbeConfig,
    ProbeReport,
    VarianceProbeConfig,
    empirical_hdiv_mixture,
    empirical_mutual_information,
    gradient_variance_probe,
    jacobi_singular_values,
    pad_from_error,
    proxy_a_distance,
    svd_entropy,
)
from mian.oracle import hdiv_exhaustive
from mian.train import TrainConfig, build_bundle, train_mian

FAST = ProbeConfig(steps=300)


class TestReport:
    def test_json_round_trip(self):
        rep = ProbeReport("x", 0.25, {"raw": -0.5, "flag": True, "n": 3})
        line = rep.to_json()
        assert json.loads(line)["auxiliary"]["flag"] is True
        back = ProbeReport.from_json(line)
        assert back.name == "x" and back.value == 0.25 and back.auxiliary["raw"] == -0.5

    def test_non_finite_is_flagged_as_text(self):
        obj = json.loads(ProbeReport("v", 1.0, {"log_variance": float("-inf")}).to_json())
        assert obj["auxiliary"]["log_variance"] == "-inf"


class TestMutualInformation:
    @pytest.mark.parametrize("seed", range(4))
    def test_independent_labels(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((900, 4))
        v = rng.permutation(np.repeat([1, 2, 3], 300))
        rep = empirical_mutual_information(z, v, ProbeConfig(steps=300, seed=seed))
        assert 0.0 <= rep.value <= 0.05

    @pytest.mark.parametrize("n_domains", [2, 3, 5])
    def test_one_hot_domains(self, n_domains):
        v = np.tile(np.arange(1, n_domains + 1), 100)
        z = np.eye(n_domains)[v - 1]
        rep = empirical_mutual_information(z, v, FAST)
        assert abs(rep.value - math.log(n_domains)) <= 0.05
        assert rep.value <= math.log(n_domains) + 0.05

    def test_lower_bound_on_gaussian_pair(self):
        # two unit-variance Gaussians at -1 and +1, equal priors; exact MI by grid integration
        grid = np.linspace(-12, 12, 200_001)
        dz = grid[1] - grid[0]
        p1 = np.exp(-0.5 * (grid + 1) ** 2) / np.sqrt(2 * np.pi)
        p2 = np.exp(-0.5 * (grid - 1) ** 2) / np.sqrt(2 * np.pi)
        pz = 0.5 * (p1 + p2)
        exact = 0.5 * np.sum(p1 * np.log(p1 / pz)) * dz + 0.5 * np.sum(p2 * np.log(p2 / pz)) * dz
        rng = np.random.default_rng(0)
        z = np.concatenate([rng.normal(-1, 1, 2000), rng.normal(1, 1, 2000)])[:, None]
        v = np.repeat([1, 2], 2000)
        rep = empirical_mutual_information(z, v, FAST)
        assert rep.value <= exact + 0.05
        assert rep.value >= exact - 0.1  # and not vacuous

    def test_single_domain(self):
        with pytest.raises(UsageError):
            empirical_mutual_information(np.zeros((10, 2)), np.ones(10, dtype=int))


class TestProxyADistance:
    def test_formula_endpoints(self):
        assert pad_from_error(0.5)[0] == 0.0
        assert pad_from_error(0.0)[0] == 2.0
        assert pad_from_error(0.7) == (0.0, pytest.approx(-0.8))

    def test_separable(self, rng):
        a = rng.normal(-10, 1, (200, 2))
        b = rng.normal(10, 1, (200, 2))
        assert proxy_a_distance(a, b, FAST).value == 2.0

    def test_identical_samples(self, rng):
        a = rng.standard_normal((300, 3))
        assert proxy_a_distance(a, a.copy(), FAST).value <= 0.1

    def test_empty(self):
        with pytest.raises(UsageError):
            proxy_a_distance(np.zeros((0, 2)), np.ones((3, 2)))

    @given(st.floats(0.0, 1.0))
    def test_range(self, eps):
        value, _ = pad_from_error(eps)
        assert 0.0 <= value <= 2.0


class TestHdivMixture:
    def test_constant_hypothesis_by_hand(self):
        z = np.zeros((4, 1))
        v = np.array([1, 1, 1, 2])
        rep = empirical_hdiv_mixture(z, v, lambda zz: np.tile([1.0, 0.0], (len(zz), 1)))
        # v=1: miss 0, false alarm on domain 2 is 1 -> 2(1-1)=0; v=2: miss 1, false alarm 0 -> 0
        assert rep.auxiliary == {"d_1": 0.0, "d_2": 0.0}
        assert rep.value == 0.0

    def test_mixed_hypothesis_by_hand(self):
        z = np.array([[0.0], [1.0], [0.0], [1.0]])
        v = np.array([1, 1, 2, 2])
        h = lambda zz: np.where(zz > 0.5, [[0.0, 1.0]], [[1.0, 0.0]])  # noqa: E731
        rep = empirical_hdiv_mixture(z, v, h)
        # argmax is domain 1 on z=0 rows: miss 1/2, false alarm 1/2 -> 2(1-1) = 0
        assert rep.value == 0.0

    def test_perfect(self):
        v = np.repeat([1, 2, 3], 5)
        z = np.eye(3)[v - 1]
        assert empirical_hdiv_mixture(z, v, lambda zz: zz).value == 2.0

    def test_matches_exhaustive_oracle(self):
        # finite support of 5 points, sample counts exactly proportional to the laws
        counts1 = np.array([6, 2, 1, 8, 3])
        counts2 = np.array([1, 5, 7, 2, 5])
        support = np.eye(5)
        z = np.concatenate([np.repeat(support, counts1, axis=0), np.repeat(support, counts2, axis=0)])
        v = np.concatenate([np.ones(20, dtype=int), np.full(20, 2)])
        p, q = counts1 / 20, counts2 / 20
        best = np.stack([p > q, p <= q], axis=1).astype(float)  # the optimal acceptance set per domain
        rep = empirical_hdiv_mixture(z, v, lambda zz: zz @ best)
        assert abs(rep.value - hdiv_exhaustive(p, q)) <= 1e-12

    def test_accepts_mlp(self):
        mlp = nn.init_mlp([2, 3], seed=0)
        rep = empirical_hdiv_mixture(np.random.default_rng(0).standard_normal((9, 2)), np.repeat([1, 2, 3], 3), mlp)
        assert -2.0 <= rep.value <= 2.0

    def test_empty_domain(self):
        with pytest.raises(UsageError):
            empirical_hdiv_mixture(np.zeros((3, 3)), np.array([1, 1, 2]), lambda zz: zz)


class TestSvdEntropy:
    def test_rank_one(self, rng):
        a = np.outer(rng.standard_normal(6), rng.standard_normal(4))
        assert svd_entropy(a).value <= 1e-12

    @pytest.mark.parametrize("r", [1, 2, 3, 5])
    def test_uniform_spectrum(self, r):
        q = np.linalg.qr(np.random.default_rng(r).standard_normal((8, 8)))[0]
        assert abs(svd_entropy(2.5 * q[:, :r]).value - math.log(r)) <= 1e-12

    def test_zero_matrix(self):
        rep = svd_entropy(np.zeros((3, 4)))
        assert rep.value == 0.0 and rep.auxiliary["zero_matrix"] is True

    def test_rotation_invariant(self, rng):
        a = rng.standard_normal((10, 5))
        q = np.linalg.qr(rng.standard_normal((10, 10)))[0]
        assert abs(svd_entropy(a).value - svd_entropy(q @ a).value) <= 1e-10

    @given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 1000))
    @settings(max_examples=60, deadline=None)
    def test_bound_and_oracle(self, b, d, seed):
        a = np.random.default_rng(seed).standard_normal((b, d))
        assert svd_entropy(a).value <= math.log(min(b, d)) + 1e-12
        ref = np.linalg.svd(a, compute_uv=False)
        np.testing.assert_allclose(jacobi_singular_values(a), ref, rtol=1e-8, atol=1e-12 * ref[0])

    def test_large_against_dense(self, rng):
        a = rng.standard_normal((64, 48)) @ np.diag(np.logspace(0, -6, 48))
        ref = np.linalg.svd(a, compute_uv=False)
        np.testing.assert_allclose(jacobi_singular_values(a), ref, rtol=1e-8, atol=1e-14)


@pytest.fixture(scope="module")
def moons():
    return standardize_by_sources(gen_rotated_moons(400, [0, 15, 30, 45, 60], seed=0, center=[0, 0]))


@pytest.fixture(scope="module")
def warm_bundle(moons):
    cfg = TrainConfig(total_steps=200, track_svd_entropy=False, record_every=200)
    bundle, _ = train_mian(cfg, moons)
    return bundle


class TestGradientVariance:
    def test_full_batch_has_zero_variance(self, warm_bundle, moons):
        rep = gradient_variance_probe(warm_bundle, moons, VarianceProbeConfig(batches=4, full_batch=True))
        assert rep.value == 0.0
        assert rep.auxiliary["log_variance"] == float("-inf")

    def test_needs_two_batches(self, warm_bundle, moons):
        with pytest.raises(UsageError):
            gradient_variance_probe(warm_bundle, moons, VarianceProbeConfig(batches=1))

    def test_probe_reads_only(self, warm_bundle, moons):
        before = warm_bundle.snapshot()
        gradient_variance_probe(warm_bundle, moons, VarianceProbeConfig(batches=3))
        after = warm_bundle.snapshot()
        assert all(before[k].tobytes() == after[k].tobytes() for k in before)

    def test_covers_bottom_and_top_layers(self, warm_bundle, moons):
        rep = gradient_variance_probe(warm_bundle, moons, VarianceProbeConfig(batches=3))
        assert {"variance_bottom", "variance_top"} <= set(rep.auxiliary)
        assert rep.value > 0.0

    def test_doubling_batch_halves_variance(self, warm_bundle, moons):
        ratios = []
        for seed in range(8):
            small = gradient_variance_probe(warm_bundle, moons, VarianceProbeConfig(batches=64, m=8, seed=seed))
            large = gradient_variance_probe(warm_bundle, moons, VarianceProbeConfig(batches=64, m=16, seed=seed))
            ratios.append(small.value / large.value)
        assert 1.6 <= float(np.exp(np.mean(np.log(ratios)))) <= 2.4

    def test_reproducible(self, warm_bundle, moons):
        a = gradient_variance_probe(warm_bundle, moons, VarianceProbeConfig(batches=4, seed=3))
        b = gradient_variance_probe(warm_bundle, moons, VarianceProbeConfig(batches=4, seed=3))
        assert a.value == b.value

    def test_untrained_bundle_works(self, moons):
        bundle = build_bundle(TrainConfig(), "multi_d", 2, 4, seed=0)
        assert gradient_variance_probe(bundle, moons, VarianceProbeConfig(batches=2)).value > 0.0
