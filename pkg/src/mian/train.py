"""Training loops: the unified-discriminator method, the one-discriminator-per-source
baseline, and a source-only baseline.

All three share batch assembly, the classifier loss and the evaluation code,
so they differ only in the adversarial terms.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from mian import nn
from mian import tensor as T
from mian.data import TEST, check_experiment, make_batch
from mian.errors import DivergenceError, UsageError
from mian.objectives import (
    DISC_OBJECTIVES,
    Schedule,
    beta_schedule,
    bsp_penalty,
    disc_loss,
    encoder_adv_loss,
    gamma_schedule,
    source_classification_loss,
)

ARMS = ("mian", "multi_d", "source_only")


@dataclass
class OptimizerSpec:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.99


@dataclass
class TrainConfig:
    m: int = 16
    total_steps: int = 3000
    encoder_hidden: tuple = (64, 64)
    latent_dim: int = 32
    classifier_hidden: tuple = (64,)
    disc_hidden: tuple = (64, 64)
    n_classes: int = 2
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    disc_lr_mult: float = 1.0
    schedule: Schedule = field(default_factory=lambda: Schedule(beta0=1.0, gamma0=1e-4, sigma=10.0))
    disc_objective: str = "multibinary"
    bsp_enabled: bool = False
    bsp_k: int = 1
    seed: int = 0
    record_every: int = 50
    eval_rows: int = 256
    track_svd_entropy: bool = True
    check_invariants: bool = False

    def validate(self):
        if self.total_steps < 1:
            raise UsageError("total_steps must be >= 1")
        if self.m < 2:
            raise UsageError("m must be >= 2")
        if self.disc_objective not in DISC_OBJECTIVES:
            raise UsageError(f"disc_objective must be one of {DISC_OBJECTIVES}")
        if self.record_every < 1:
            raise UsageError("record_every must be >= 1")
        if self.bsp_enabled and not 1 <= self.bsp_k <= min(self.m, self.latent_dim):
            raise UsageError("bsp_k must be between 1 and min(m, latent_dim)")


RECORD_COLUMNS = (
    "step",
    "loss_cls",
    "loss_disc",
    "beta",
    "gamma",
    "acc_source_avg",
    "acc_target",
    "svd_entropy_src",
    "svd_entropy_tgt",
)


@dataclass
class MetricsRecord:
    step: int
    loss_cls: float | None = None
    loss_disc: float | None = None
    beta: float | None = None
    gamma: float | None = None
    acc_source_avg: float | None = None
    acc_target: float | None = None
    svd_entropy_src: float | None = None
    svd_entropy_tgt: float | None = None

    def as_row(self):
        return ["" if v is None else (str(v) if isinstance(v, int) else repr(float(v))) for v in asdict(self).values()]


assert tuple(f.name for f in fields(MetricsRecord)) == RECORD_COLUMNS


@dataclass
class ModelBundle:
    arm: str
    encoder: nn.Mlp
    classifier: nn.Mlp
    discriminators: list
    optimizers: dict = field(default_factory=dict)

    @property
    def n_domains(self):
        """N+1, inferred from the head layout."""
        if self.arm == "multi_d":
            return len(self.discriminators) + 1
        if self.arm == "mian":
            return self.discriminators[0].output_dim
        return None

    def group(self, name):
        if name == "encoder":
            return self.encoder.parameters("encoder.")
        if name == "classifier":
            return self.classifier.parameters("classifier.")
        if name.startswith("disc"):
            k = int(name[4:])
            return self.discriminators[k].parameters(f"{name}.")
        raise KeyError(name)

    def group_names(self):
        return ["encoder", "classifier"] + [f"disc{k}" for k in range(len(self.discriminators))]

    def named_parameters(self):
        out = {}
        for g in self.group_names():
            out.update(self.group(g))
        return out

    def snapshot(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}


def build_bundle(cfg, arm, input_dim, n_sources, seed):
    if arm not in ARMS:
        raise UsageError(f"unknown arm {arm!r}")
    seeds = np.random.SeedSequence(seed).spawn(2 + max(n_sources, 1))
    as_int = [int(s.generate_state(1)[0]) for s in seeds]
    enc = nn.init_mlp([input_dim, *cfg.encoder_hidden, cfg.latent_dim], seed=as_int[0])
    clf = nn.init_mlp([cfg.latent_dim, *cfg.classifier_hidden, cfg.n_classes], seed=as_int[1])
    if arm == "mian":
        discs = [nn.init_mlp([cfg.latent_dim, *cfg.disc_hidden, n_sources + 1], seed=as_int[2])]
    elif arm == "multi_d":
        discs = [nn.init_mlp([cfg.latent_dim, *cfg.disc_hidden, 2], seed=as_int[2 + k]) for k in range(n_sources)]
    else:
        discs = []
    bundle = ModelBundle(arm, enc, clf, discs)
    spec = cfg.optimizer
    for g in bundle.group_names():
        lr = spec.lr * (cfg.disc_lr_mult if g.startswith("disc") else 1.0)
        bundle.optimizers[g] = nn.make_optimizer(
            spec.kind, bundle.group(g), lr, momentum=spec.momentum, beta1=spec.beta1, beta2=spec.beta2
        )
    return bundle


# ---------------------------------------------------------------------------
# shared pieces


def encode(bundle, x, frozen=True):
    return nn.forward(bundle.encoder, T.Tensor(x) if not isinstance(x, T.Tensor) else x, frozen=frozen)


def predict(bundle, x):
    z = encode(bundle, x)
    return np.argmax(nn.forward(bundle.classifier, z, frozen=True).data, axis=1)


def multi_disc_routing(domains, n_sources):
    """Row indices seen by each per-source discriminator: source k block + target block."""
    target = n_sources + 1
    tgt_rows = np.flatnonzero(domains == target)
    return [np.concatenate([np.flatnonzero(domains == k), tgt_rows]) for k in range(1, n_sources + 1)]


def _binary_labels(domains, rows, target):
    # source rows -> 1, target rows -> 2
    return np.where(domains[rows] == target, 2, 1)


def adversarial_loss(bundle, z, domains, objective, frozen_disc=True):
    """Discriminator objective on representations ``z``.

    For the unified head this is one (N+1)-way loss; for the per-source
    baseline it is the sum of the N binary losses.
    """
    if bundle.arm == "mian":
        out = nn.forward(bundle.discriminators[0], z, frozen=frozen_disc)
        return disc_loss(objective, out, domains)
    if bundle.arm == "multi_d":
        n_sources = len(bundle.discriminators)
        total = None
        for disc, rows in zip(bundle.discriminators, multi_disc_routing(domains, n_sources)):
            out = nn.forward(disc, T.take_rows(z, rows), frozen=frozen_disc)
            term = disc_loss(objective, out, _binary_labels(domains, rows, n_sources + 1))
            total = term if total is None else T.add(total, term)
        return total
    raise UsageError("source-only bundles have no discriminator")


def eval_accuracy(bundle, dataset, split=TEST):
    x, y = dataset.labeled_view(split)
    if dataset.class_labels is None or y.size == 0:
        raise UsageError(f"domain {dataset.domain} has no labeled rows in split {split!r}")
    return float(np.mean(predict(bundle, x) == y))


def _eval_rows(datasets, limit):
    """Fixed evaluation matrices for SVD-entropy: pooled source test rows and target test rows."""
    per_src = max(1, limit // max(len(datasets) - 1, 1))
    src = np.concatenate([ds.feature_view(TEST)[:per_src] for ds in datasets[:-1]])
    tgt = datasets[-1].feature_view(TEST)[:limit]
    return src, tgt


def _record(bundle, datasets, cfg, step, eval_mats, **values):
    from mian.metrics import svd_entropy  # metrics depends on train

    rec = MetricsRecord(step=step, **values)
    rec.acc_source_avg = float(np.mean([eval_accuracy(bundle, ds) for ds in datasets[:-1]]))
    rec.acc_target = eval_accuracy(bundle, datasets[-1])
    if cfg.track_svd_entropy:
        src, tgt = eval_mats
        rec.svd_entropy_src = svd_entropy(encode(bundle, src).data).value
        rec.svd_entropy_tgt = svd_entropy(encode(bundle, tgt).data).value
    return rec


def _check_finite(step, **losses):
    bad = {k: v for k, v in losses.items() if v is not None and not math.isfinite(v)}
    if bad:
        raise DivergenceError(f"non-finite loss at step {step}: {bad}", record=MetricsRecord(step=step, **losses))


def _assert_unchanged(before, bundle, groups, phase):
    for g in groups:
        for name, p in bundle.group(g).items():
            if not np.array_equal(before[name], p.data):
                raise AssertionError(f"{phase} modified {name}")


# ---------------------------------------------------------------------------
# training loops


def _run(cfg, datasets, arm, trace=None, stop_after=None):
    cfg.validate()
    if stop_after is not None and not 1 <= stop_after <= cfg.total_steps:
        raise UsageError("stop_after must lie in [1, total_steps]")
    check_experiment(datasets)
    n_sources = len(datasets) - 1
    labels_seen = {int(c) for ds in datasets[:-1] for c in ds.labeled_view()[1]}
    if labels_seen and max(labels_seen) >= cfg.n_classes:
        raise UsageError(f"class label {max(labels_seen)} >= n_classes={cfg.n_classes}")
    model_seed, batch_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    bundle = build_bundle(cfg, arm, datasets[0].dim, n_sources, int(model_seed.generate_state(1)[0]))
    rng = np.random.default_rng(batch_seed)
    eval_mats = _eval_rows(datasets, cfg.eval_rows)
    sched = cfg.schedule
    adversarial = arm != "source_only"
    records = [
        _record(
            bundle,
            datasets,
            cfg,
            0,
            eval_mats,
            beta=beta_schedule(sched, 0.0) if adversarial else None,
            gamma=gamma_schedule(sched, 0.0) if cfg.bsp_enabled else None,
        )
    ]
    disc_groups = [g for g in bundle.group_names() if g.startswith("disc")]
    T_total = cfg.total_steps
    last = T_total if stop_after is None else stop_after
    for t in range(1, last + 1):
        batch = make_batch(datasets, cfg.m, rng)
        src_rows = np.flatnonzero(batch.domains <= n_sources)
        if trace is not None:
            trace.append(batch)
        loss_disc = None
        beta_t = beta_schedule(sched, t / T_total) if adversarial else None
        gamma_t = gamma_schedule(sched, t / T_total) if cfg.bsp_enabled else None

        if adversarial:
            # inner maximisation: discriminator step on frozen representations
            before = bundle.snapshot() if cfg.check_invariants else None
            z_fixed = encode(bundle, batch.x, frozen=True)
            l_h = adversarial_loss(bundle, z_fixed, batch.domains, cfg.disc_objective, frozen_disc=False)
            loss_disc = l_h.item()
            _check_finite(t, loss_disc=loss_disc)
            T.backward(l_h)
            for g in disc_groups:
                nn.step(bundle.optimizers[g], bundle.group(g))
            if before is not None:
                _assert_unchanged(before, bundle, ["encoder", "classifier"], "discriminator step")

        # outer minimisation: encoder on L(F,C) - beta*L(h) [+ gamma*BSP], classifier on L(F,C)
        before = bundle.snapshot() if cfg.check_invariants else None
        x = T.Tensor(batch.x if adversarial or cfg.bsp_enabled else batch.x[src_rows])
        z = nn.forward(bundle.encoder, x)
        z_src = T.take_rows(z, src_rows) if z.shape[0] != src_rows.size else z
        l_cls = source_classification_loss(nn.forward(bundle.classifier, z_src), batch.class_labels)
        objective = l_cls
        if adversarial:
            objective = encoder_adv_loss(adversarial_loss(bundle, z, batch.domains, cfg.disc_objective), l_cls, beta_t)
        if cfg.bsp_enabled:
            blocks = [T.take_rows(z, batch.block(v)) for v in range(1, n_sources + 2)]
            objective = T.add(objective, T.scale(bsp_penalty(blocks, cfg.bsp_k), gamma_t))
        loss_cls = l_cls.item()
        _check_finite(t, loss_cls=loss_cls, loss_disc=loss_disc, objective=objective.item())
        T.backward(objective)
        nn.step(bundle.optimizers["encoder"], bundle.group("encoder"))
        nn.step(bundle.optimizers["classifier"], bundle.group("classifier"))
        if before is not None:
            _assert_unchanged(before, bundle, disc_groups, "encoder/classifier step")

        if t % cfg.record_every == 0 or t == last:
            records.append(
                _record(
                    bundle, datasets, cfg, t, eval_mats,
                    loss_cls=loss_cls, loss_disc=loss_disc, beta=beta_t, gamma=gamma_t,
                )
            )
    return bundle, records


def train_mian(cfg, datasets, trace=None, stop_after=None):
    """Single (N+1)-way discriminator, one inner and one outer step per iteration."""
    return _run(cfg, datasets, "mian", trace, stop_after)


def train_multi_disc_baseline(cfg, datasets, trace=None, stop_after=None):
    """N binary source-vs-target discriminators sharing one encoder; adversarial term summed."""
    return _run(cfg, datasets, "multi_d", trace, stop_after)


def train_source_only(cfg, datasets, trace=None, stop_after=None):
    """Encoder and classifier trained on the source batches only."""
    return _run(cfg, datasets, "source_only", trace, stop_after)


TRAINERS = {"mian": train_mian, "multi_d": train_multi_disc_baseline, "source_only": train_source_only}
