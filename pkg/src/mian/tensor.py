"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation on a :class:`Tensor` that requires a gradient records its
parents and a local adjoint rule.  :func:`backward` orders the recorded
graph into a :class:`Tape` (parents before children), sweeps it once in
reverse and then releases the graph.

Broadcasting is restricted to two cases: same shape, or one operand a
scalar.  Row-vector bias addition goes through :func:`affine`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mian.errors import DimensionError, DomainError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "PowerIterationReport",
    "tensor",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "relu",
    "sigmoid",
    "log",
    "log_sigmoid",
    "elementwise",
    "matmul",
    "affine",
    "sum",
    "mean",
    "log_softmax",
    "pick",
    "take_rows",
    "concat_rows",
    "top_singular_value",
]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.array(data, dtype=np.float64)
        if any(s <= 0 for s in arr.shape):
            raise DimensionError(f"dimension sizes must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise UsageError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum(self)

    def mean(self):
        return mean(self)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, rule):
    """Create a result tensor; record the graph only if a parent needs it."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=rule)
    return Tensor(data)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    # scalar operand broadcast over the other
    return np.asarray(grad.sum()).reshape(shape)


def _check_broadcast(a, b, op):
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), rule)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), rule)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), rule)


def neg(a):
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def scale(a, c):
    """Multiply by a Python scalar constant."""
    a = _as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return _node(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _as_tensor(a)
    s = _stable_sigmoid(np.atleast_1d(a.data)).reshape(a.shape)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def log(a):
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def log_sigmoid(a):
    """log(sigmoid(x)) evaluated without overflow for large |x|."""
    a = _as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    s = _stable_sigmoid(np.atleast_1d(x)).reshape(a.shape)
    return _node(out, (a,), lambda g: (g * (1.0 - s),))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "log": log, "negate": neg, "log_sigmoid": log_sigmoid}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(a, kind, b=None):
    """Dispatch an elementwise op by name; ``scale`` takes the factor as ``b``."""
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind in _BINARY:
        return _BINARY[kind](a, b)
    if kind == "scale":
        return scale(a, b)
    raise UsageError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), rule)


def affine(x, w, b):
    """x @ w + b with the bias row broadcast over the batch."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine: cannot multiply {x.shape} by {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"affine: bias shape {b.shape} does not match {w.shape[1]} outputs")

    def rule(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _node(x.data @ w.data + b.data, (x, w, b), rule)


def sum(a):  # noqa: A001 - mirrors the numpy name
    a = _as_tensor(a)
    shape = a.shape
    return _node(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a):
    a = _as_tensor(a)
    shape, n = a.shape, a.data.size
    return _node(a.data.mean(), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def log_softmax(logits):
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError("log_softmax expects a [B x K] matrix")
    if logits.shape[1] < 2:
        raise DimensionError("log_softmax needs at least two columns")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def rule(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _node(out, (logits,), rule)


def pick(x, idx):
    """Select ``x[i, idx[i]]`` for every row, giving a length-B vector."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2 or idx.shape != (x.shape[0],):
        raise DimensionError("pick needs a matrix and one column index per row")
    if np.any(idx < 0) or np.any(idx >= x.shape[1]):
        raise UsageError("pick: column index out of range")
    rows = np.arange(x.shape[0])

    def rule(g):
        out = np.zeros(x.shape)
        out[rows, idx] = g
        return (out,)

    return _node(x.data[rows, idx], (x,), rule)


def take_rows(x, idx):
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise UsageError("take_rows: empty row selection")

    def rule(g):
        out = np.zeros(x.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.data[idx], (x,), rule)


def concat_rows(parts):
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise UsageError("concat_rows: nothing to concatenate")
    cols = {p.shape[1:] for p in parts}
    if len(cols) != 1:
        raise DimensionError("concat_rows: trailing dimensions differ")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def rule(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=0), tuple(parts), rule)


# ---------------------------------------------------------------------------
# spectral


@dataclass
class PowerIterationReport:
    sigma: float
    iterations: int
    converged: bool
    near_tie: bool


def _leading_eigpair(gram, iters, tol, seed=0x5EED):
    """Leading eigenpair of a PSD matrix by power iteration.

    Each iteration squares the (normalised) power matrix, so iteration k
    applies gram**(2**k) to the start vector.  Convergence is declared when
    successive Rayleigh quotients agree to ``tol`` relative.
    """
    n = gram.shape[0]
    start = np.random.default_rng(seed).standard_normal(n)
    start /= np.linalg.norm(start)
    power = gram / np.linalg.norm(gram)
    prev = None
    best_v, best_lam = start, float(start @ gram @ start)
    converged = False
    it = 0
    for it in range(1, iters + 1):
        v = power @ start
        nv = np.linalg.norm(v)
        if nv == 0.0:
            # start vector orthogonal to the leading space; fall back to a column
            col = np.argmax(np.abs(np.diag(gram)))
            v, nv = power[:, col], np.linalg.norm(power[:, col])
        v = v / nv
        # two plain steps polish the direction against squaring round-off
        for _ in range(2):
            w = gram @ v
            v = w / np.linalg.norm(w)
        lam = float(v @ gram @ v)
        if lam >= best_lam:
            best_v, best_lam = v, lam
        if prev is not None and abs(lam - prev) <= tol * max(abs(lam), np.finfo(float).tiny):
            converged = True
            break
        prev = lam
        power = power @ power
        power /= np.linalg.norm(power)
    return best_v, best_lam, it, converged


def top_singular_value(z, iters=64, tol=1e-14, return_report=False):
    """Largest singular value of a matrix, differentiable.

    The adjoint is u1 v1^T for the leading singular pair, which is exact
    when the top singular value is simple.  A zero matrix gives 0 with a
    zero gradient.
    """
    z = _as_tensor(z)
    if z.data.ndim != 2:
        raise DimensionError("top_singular_value expects a matrix")
    a = z.data
    if not np.any(a):
        report = PowerIterationReport(0.0, 0, True, False)
        out = _node(np.array(0.0), (z,), lambda g: (np.zeros(a.shape),))
        return (out, report) if return_report else out

    rows, cols = a.shape
    if rows < cols:
        u, lam, it, ok = _leading_eigpair(a @ a.T, iters, tol)
        sigma = np.sqrt(max(lam, 0.0))
        v = a.T @ u / sigma
    else:
        v, lam, it, ok = _leading_eigpair(a.T @ a, iters, tol)
        sigma = np.sqrt(max(lam, 0.0))
        u = a @ v / sigma
    near_tie = False
    if return_report:
        # a near-tie leaves the singular vectors ill-defined; report, keep going
        gram = a @ a.T if rows < cols else a.T @ a
        lead = u if rows < cols else v
        deflated = gram - lam * np.outer(lead, lead)
        if np.any(deflated):
            # fresh start vector: the default one has no weight left in a tied subspace
            _, lam2, _, _ = _leading_eigpair(deflated, iters, tol, seed=0xD3F1)
            near_tie = bool(sigma - np.sqrt(max(lam2, 0.0)) <= 1e-10 * max(sigma, 1.0))
    report = PowerIterationReport(float(sigma), it, ok, near_tie)
    outer = np.outer(u, v)
    out = _node(np.array(sigma), (z,), lambda g: (g * outer,))
    return (out, report) if return_report else out


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Topologically ordered record of the graph that produced ``root``."""

    def __init__(self, root):
        self.nodes = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss):
    """Populate ``.grad`` on every tensor upstream of ``loss`` that requires it.

    Gradients accumulate into existing ``.grad`` arrays of leaves; optimizer
    steps clear them.  The graph is released afterwards, so a second call on
    the same loss is an error.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise UsageError("this loss was already back-propagated; rebuild the graph")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor requiring a gradient")

    tape = Tape(loss)
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in tape.nodes:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node._consumed = True
    return tape
