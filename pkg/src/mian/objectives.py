"""Losses and coefficient schedules used by the training loops.

Domain labels are 1-based (1..N+1, target last) everywhere in this module;
class labels are 0-based.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mian import tensor as T
from mian.errors import DimensionError, UsageError

DISC_OBJECTIVES = ("softmax", "multibinary", "least_squares")


@dataclass(frozen=True)
class Schedule:
    """Progress-dependent coefficients; sigma=0 keeps beta constant at beta0."""

    beta0: float = 1.0
    gamma0: float = 1e-4
    sigma: float = 10.0
    total_steps: int = 1


def _check_progress(p):
    if not 0.0 <= p <= 1.0:
        raise UsageError(f"training progress must lie in [0, 1], got {p}")


def beta_schedule(s, p):
    _check_progress(p)
    return s.beta0 * 2.0 * (1.0 - 1.0 / (1.0 + math.exp(-s.sigma * p)))


def gamma_schedule(s, p):
    _check_progress(p)
    return s.gamma0 * (2.0 / (1.0 + math.exp(-s.sigma * p)) - 1.0)


def _check_logits(logits, labels, lo, hi, what):
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"expected one {what} per row of a [B x K] matrix")
    if np.any(labels < lo) or np.any(labels > hi):
        raise UsageError(f"{what} out of range [{lo}, {hi}]")
    return labels


def source_classification_loss(logits, labels):
    """Mean softmax cross-entropy over the labeled source rows."""
    labels = _check_logits(logits, labels, 0, logits.shape[1] - 1, "class label")
    return T.neg(T.mean(T.pick(T.log_softmax(logits), labels)))


def disc_loss_softmax(logits, domains):
    """Multi-class cross-entropy of the (N+1)-way domain head."""
    domains = _check_logits(logits, domains, 1, logits.shape[1], "domain label")
    return T.neg(T.mean(T.pick(T.log_softmax(logits), domains - 1)))


def _one_hot(domains, k):
    out = np.zeros((domains.size, k))
    out[np.arange(domains.size), domains - 1] = 1.0
    return out


def disc_loss_multibinary(logits, domains):
    """One-vs-rest logistic loss: each column is an independent domain detector."""
    domains = _check_logits(logits, domains, 1, logits.shape[1], "domain label")
    target = _one_hot(domains, logits.shape[1])
    pos = T.mul(T.log_sigmoid(logits), target)
    negs = T.mul(T.log_sigmoid(T.neg(logits)), 1.0 - target)
    return T.scale(T.sum(T.add(pos, negs)), -1.0 / logits.shape[0])


def disc_loss_least_squares(outputs, domains):
    """Squared error of raw outputs against one-hot domain targets."""
    domains = _check_logits(outputs, domains, 1, outputs.shape[1], "domain label")
    resid = T.sub(outputs, _one_hot(domains, outputs.shape[1]))
    return T.scale(T.sum(T.mul(resid, resid)), 1.0 / outputs.shape[0])


DISC_LOSSES = {
    "softmax": disc_loss_softmax,
    "multibinary": disc_loss_multibinary,
    "least_squares": disc_loss_least_squares,
}


def disc_loss(kind, outputs, domains):
    try:
        fn = DISC_LOSSES[kind]
    except KeyError:
        raise UsageError(f"unknown discriminator objective {kind!r}") from None
    return fn(outputs, domains)


def encoder_adv_loss(disc_loss, cls_loss, beta_t):
    """cls_loss - beta_t * disc_loss.

    Build ``disc_loss`` with a frozen discriminator so the gradient reaches
    the encoder only.
    """
    return T.sub(cls_loss, T.scale(disc_loss, beta_t))


def bsp_penalty(z_by_domain, k=1):
    """Sum over domain blocks of the top-k squared singular values.

    k=1 uses the differentiable power-iteration path.  Larger k deflates
    the block after each singular pair, which keeps the tape small for the
    k values in practical use.
    """
    if not z_by_domain:
        raise UsageError("bsp_penalty needs at least one domain block")
    terms = []
    for z in z_by_domain:
        if z.data.ndim != 2 or z.data.size == 0:
            raise UsageError("empty domain block")
        if k < 1 or k > min(z.shape):
            raise UsageError(f"k={k} must be between 1 and min(block shape)={min(z.shape)}")
        block = z
        for j in range(k):
            s = T.top_singular_value(block)
            terms.append(T.mul(s, s))
            if j + 1 < k:
                block = _deflate(block, s)
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def _deflate(z, s):
    """z - s * u v^T with the singular vectors held constant."""
    a = z.data
    if s.item() == 0.0:
        return z
    _, vecs = np.linalg.eigh(a.T @ a)
    v = vecs[:, -1]
    u = a @ v / s.item()
    return T.sub(z, T.mul(T.Tensor(np.outer(u, v)), s))
