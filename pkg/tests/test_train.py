import math
from dataclasses import replace

import numpy as np
import pytest

from mian import nn
from mian.data import TEST, TRAIN, DomainDataset, gen_rotated_moons, gen_shifted_gaussians, standardize_by_sources
from mian.errors import DivergenceError, UsageError
from mian.objectives import Schedule, beta_schedule
from mian.train import (
    ARMS,
    RECORD_COLUMNS,
    MetricsRecord,
    OptimizerSpec,
    TrainConfig,
    build_bundle,
    eval_accuracy,
    multi_disc_routing,
    train_mian,
    train_multi_disc_baseline,
    train_source_only,
)

SMALL = TrainConfig(
    m=8,
    total_steps=40,
    encoder_hidden=(16,),
    latent_dim=8,
    classifier_hidden=(8,),
    disc_hidden=(16,),
    record_every=10,
    eval_rows=64,
)


@pytest.fixture(scope="module")
def moons():
    return standardize_by_sources(gen_rotated_moons(200, [0, 15, 30, 45, 60], seed=0, center=[0, 0]))


@pytest.fixture(scope="module")
def moons_big():
    return standardize_by_sources(gen_rotated_moons(2000, [0, 15, 30, 45, 60], seed=0, center=[0, 0]))


def acc(records):
    return records[-1].acc_target


class TestConfig:
    @pytest.mark.parametrize(
        "change", [{"total_steps": 0}, {"m": 1}, {"disc_objective": "hinge"}, {"record_every": 0}]
    )
    def test_invalid(self, change, moons):
        with pytest.raises(UsageError):
            train_mian(replace(SMALL, **change), moons)

    def test_bsp_rank_bound(self, moons):
        with pytest.raises(UsageError):
            train_mian(replace(SMALL, bsp_enabled=True, bsp_k=9), moons)

    def test_label_beyond_classes(self, moons):
        with pytest.raises(UsageError):
            train_source_only(replace(SMALL, n_classes=1), moons)

    def test_unknown_arm(self):
        with pytest.raises(UsageError):
            build_bundle(SMALL, "pairwise", 2, 3, seed=0)

    def test_stop_after_range(self, moons):
        with pytest.raises(UsageError):
            train_mian(SMALL, moons, stop_after=41)


class TestBundleLayout:
    def test_unified_has_one_head(self):
        b = build_bundle(SMALL, "mian", 2, 4, seed=0)
        assert len(b.discriminators) == 1 and b.n_domains == 5

    def test_baseline_has_one_head_per_source(self):
        b = build_bundle(SMALL, "multi_d", 2, 4, seed=0)
        assert len(b.discriminators) == 4 and b.n_domains == 5
        assert all(d.output_dim == 2 for d in b.discriminators)

    def test_source_only_has_none(self):
        assert build_bundle(SMALL, "source_only", 2, 4, seed=0).discriminators == []

    def test_disc_lr_multiplier(self):
        b = build_bundle(replace(SMALL, disc_lr_mult=10.0), "multi_d", 2, 2, seed=0)
        assert b.optimizers["disc1"].learning_rate == pytest.approx(10 * b.optimizers["encoder"].learning_rate)


class TestRouting:
    def test_blocks(self):
        domains = np.repeat([1, 2, 3, 4], 3)
        routes = multi_disc_routing(domains, 3)
        assert [r.tolist() for r in routes] == [
            [0, 1, 2, 9, 10, 11],
            [3, 4, 5, 9, 10, 11],
            [6, 7, 8, 9, 10, 11],
        ]

    def test_heads_only_see_their_source(self, moons):
        trace = []
        train_multi_disc_baseline(replace(SMALL, total_steps=5), moons, trace=trace)
        assert len(trace) == 5
        for batch in trace:
            for k, rows in enumerate(multi_disc_routing(batch.domains, 4), start=1):
                assert set(np.unique(batch.domains[rows]).tolist()) == {k, 5}


class TestLoop:
    @pytest.mark.parametrize("arm", ARMS)
    def test_invariants_checked_every_step(self, arm, moons):
        from mian.train import TRAINERS

        cfg = replace(SMALL, total_steps=10, check_invariants=True, bsp_enabled=arm != "source_only")
        TRAINERS[arm](cfg, moons)

    def test_zero_lr_changes_nothing(self, moons):
        cfg = replace(SMALL, total_steps=1, optimizer=OptimizerSpec(lr=0.0))
        bundle, _ = train_mian(cfg, moons)
        model_seed = np.random.SeedSequence(cfg.seed).spawn(2)[0]
        fresh = build_bundle(cfg, "mian", 2, 4, int(model_seed.generate_state(1)[0]))
        a, b = bundle.snapshot(), fresh.snapshot()
        assert a.keys() == b.keys()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_record_cadence(self, moons):
        _, recs = train_mian(replace(SMALL, total_steps=35), moons)
        assert [r.step for r in recs] == [0, 10, 20, 30, 35]
        assert recs[0].loss_cls is None and recs[0].beta == SMALL.schedule.beta0

    def test_beta_stream_exact(self, moons):
        cfg = replace(SMALL, record_every=1)
        _, recs = train_mian(cfg, moons)
        assert [r.beta for r in recs] == [beta_schedule(cfg.schedule, r.step / cfg.total_steps) for r in recs]

    def test_gamma_only_with_penalty(self, moons):
        _, plain = train_mian(SMALL, moons)
        _, dbsp = train_mian(replace(SMALL, bsp_enabled=True), moons)
        assert all(r.gamma is None for r in plain)
        assert dbsp[0].gamma == 0.0 and all(r.gamma > 0 for r in dbsp[1:])

    def test_source_only_has_no_adversarial_columns(self, moons):
        _, recs = train_source_only(SMALL, moons)
        assert all(r.loss_disc is None and r.beta is None for r in recs)

    def test_stop_after_is_prefix(self, moons):
        _, full = train_mian(SMALL, moons)
        _, part = train_mian(SMALL, moons, stop_after=25)
        assert [r.step for r in part] == [0, 10, 20, 25]
        assert part[:3] == full[:3]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts(self, moons):
        cfg = replace(SMALL, optimizer=OptimizerSpec(kind="sgd_momentum", lr=1e150, momentum=0.0))
        with pytest.raises(DivergenceError) as info:
            train_mian(cfg, moons)
        assert isinstance(info.value.record, MetricsRecord)
        assert "step" in str(info.value)

    def test_record_columns(self):
        assert RECORD_COLUMNS[0] == "step" and len(MetricsRecord(step=1).as_row()) == len(RECORD_COLUMNS)


class TestDeterminism:
    @pytest.mark.parametrize("arm", ARMS)
    def test_same_seed_same_stream(self, arm, moons):
        from mian.train import TRAINERS

        b1, r1 = TRAINERS[arm](SMALL, moons)
        b2, r2 = TRAINERS[arm](SMALL, moons)
        assert [x.as_row() for x in r1] == [x.as_row() for x in r2]
        s1, s2 = b1.snapshot(), b2.snapshot()
        assert all(s1[k].tobytes() == s2[k].tobytes() for k in s1)

    def test_seed_matters(self, moons):
        _, r1 = train_mian(SMALL, moons)
        _, r2 = train_mian(replace(SMALL, seed=1), moons)
        assert [x.as_row() for x in r1] != [x.as_row() for x in r2]


class TestEvalAccuracy:
    def _constant(self, cls):
        bundle = build_bundle(SMALL, "source_only", 2, 1, seed=0)
        last = bundle.classifier.layers[-1]
        last.weight.data[...] = 0.0
        last.bias.data[...] = np.eye(2)[cls] * 5.0
        return bundle

    def test_constant_classifier_on_balanced_data(self):
        ds = DomainDataset(np.random.default_rng(0).standard_normal((20, 2)), np.repeat([0, 1], 10), 1, np.array([TEST] * 20))
        assert eval_accuracy(self._constant(0), ds) == 0.5

    def test_hand_count(self):
        # constant class 1 on a 10-row test split with four ones
        labels = np.array([1, 0, 0, 1, 0, 1, 0, 0, 1, 0])
        ds = DomainDataset(np.zeros((10, 2)), labels, 1, np.array([TEST] * 10))
        assert eval_accuracy(self._constant(1), ds) == 0.4

    def test_memorizer(self):
        # a table lookup on distinct one-dimensional codes built into the weights
        x = np.array([[-2.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        y = np.array([0, 0, 1, 1])
        ds = DomainDataset(x, y, 1, np.array([TRAIN] * 4))
        bundle = build_bundle(replace(SMALL, encoder_hidden=(), latent_dim=2, classifier_hidden=()), "source_only", 2, 1, 0)
        bundle.encoder.layers[0].weight.data[...] = np.eye(2)
        bundle.encoder.layers[0].bias.data[...] = 0.0
        bundle.classifier.layers[0].weight.data[...] = [[-1.0, 1.0], [0.0, 0.0]]
        bundle.classifier.layers[0].bias.data[...] = 0.0
        assert eval_accuracy(bundle, ds, split=TRAIN) == 1.0

    def test_unlabeled(self):
        ds = DomainDataset(np.zeros((4, 2)), None, 2, np.array([TEST] * 4))
        with pytest.raises(UsageError):
            eval_accuracy(build_bundle(SMALL, "source_only", 2, 1, 0), ds)


MEDIUM = TrainConfig(total_steps=1000, record_every=1000, track_svd_entropy=False)


class TestStatisticalExamples:
    """Short four-seed runs for the behavioural examples of each arm."""

    def test_zero_beta_matches_source_only(self, moons_big):
        cfg = replace(MEDIUM, schedule=Schedule(beta0=0.0, sigma=10.0))
        gap = [acc(train_mian(replace(cfg, seed=s), moons_big)[1]) - acc(train_source_only(replace(cfg, seed=s), moons_big)[1]) for s in range(4)]
        assert abs(float(np.mean(gap))) <= 0.02

    def test_single_source_baseline_matches_unified(self):
        ds = standardize_by_sources(gen_rotated_moons(2000, [0, 30], seed=0, center=[0, 0]))
        gap = [acc(train_mian(replace(MEDIUM, seed=s), ds)[1]) - acc(train_multi_disc_baseline(replace(MEDIUM, seed=s), ds)[1]) for s in range(4)]
        assert abs(float(np.mean(gap))) <= 0.02

    def test_no_shift_target_matches_source(self):
        ds = gen_shifted_gaussians(2000, 2, [(0.0, 0.0)] * 3, seed=0)
        accs = [train_source_only(replace(MEDIUM, seed=s), ds)[1][-1] for s in range(4)]
        gap = np.mean([r.acc_target - r.acc_source_avg for r in accs])
        assert abs(gap) <= 0.02

    def test_rotated_target_is_harder(self, moons_big):
        recs = [train_source_only(replace(MEDIUM, seed=s), moons_big)[1][-1] for s in range(4)]
        assert np.mean([r.acc_source_avg - r.acc_target for r in recs]) >= 0.05
