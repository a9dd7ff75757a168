"""Multilayer perceptrons, optimizers and the binary checkpoint format."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from mian import tensor as T
from mian.errors import DimensionError, ParseError, UsageError

ACTIVATIONS = ("relu", "none")


@dataclass
class Layer:
    weight: T.Tensor
    bias: T.Tensor
    activation: str = "relu"


@dataclass
class Mlp:
    layers: list

    @property
    def input_dim(self):
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self):
        return self.layers[-1].weight.shape[1]

    @property
    def dims(self):
        return [self.input_dim] + [layer.weight.shape[1] for layer in self.layers]

    def parameters(self, prefix=""):
        """Named parameters in a stable order: ``{prefix}{i}.weight``, ``{prefix}{i}.bias``."""
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}{i}.weight"] = layer.weight
            out[f"{prefix}{i}.bias"] = layer.bias
        return out

    def num_parameters(self):
        return int(np.sum([p.data.size for p in self.parameters().values()]))

    def copy(self):
        return Mlp(
            [
                Layer(T.Tensor(l.weight.data.copy(), True), T.Tensor(l.bias.data.copy(), True), l.activation)
                for l in self.layers
            ]
        )

    def __call__(self, x, frozen=False):
        return forward(self, x, frozen=frozen)


def init_mlp(dims, activation="relu", seed=0):
    """He-style fan-in uniform init, zero biases; the last layer is linear."""
    dims = list(dims)
    if len(dims) < 2:
        raise UsageError("init_mlp needs at least an input and an output dimension")
    if activation not in ACTIVATIONS:
        raise UsageError(f"unknown activation {activation!r}")
    if any(int(d) < 1 for d in dims):
        raise UsageError("layer sizes must be positive")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = np.sqrt(6.0 / fan_in)  # variance 2 / fan_in
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        act = activation if i < len(dims) - 2 else "none"
        layers.append(Layer(T.Tensor(w, True), T.Tensor(np.zeros(fan_out), True), act))
    return Mlp(layers)


def forward(model, x, frozen=False):
    """Run ``x`` through the network.

    With ``frozen=True`` the parameters enter the graph as constants, so no
    gradient reaches them; inputs still propagate gradients.
    """
    x = x if isinstance(x, T.Tensor) else T.Tensor(x)
    if x.data.ndim != 2 or x.shape[1] != model.input_dim:
        raise DimensionError(f"expected [B x {model.input_dim}] input, got {x.shape}")
    h = x
    for layer in model.layers:
        w, b = layer.weight, layer.bias
        if frozen:
            w, b = T.Tensor(w.data), T.Tensor(b.data)
        h = T.affine(h, w, b)
        if layer.activation == "relu":
            h = T.relu(h)
    return h


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    slots: dict = field(default_factory=dict)
    step_count: int = 0


def make_optimizer(kind, params, learning_rate, momentum=0.9, beta1=0.9, beta2=0.999, epsilon=1e-8):
    if kind not in ("sgd_momentum", "adam"):
        raise UsageError(f"unknown optimizer kind {kind!r}")
    opt = OptimizerState(kind, float(learning_rate), float(momentum), float(beta1), float(beta2), float(epsilon))
    for name, p in params.items():
        if kind == "sgd_momentum":
            opt.slots[name] = {"velocity": np.zeros(p.shape)}
        else:
            opt.slots[name] = {"m": np.zeros(p.shape), "v": np.zeros(p.shape)}
    return opt


def step(opt, params):
    """Apply one update and clear the gradients.

    SGD-momentum: v <- mu*v + g; theta <- theta - lr*v.
    Adam uses the usual bias-corrected moment estimates.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise UsageError(f"no gradient for parameter(s): {', '.join(sorted(missing))}")
    unknown = set(params) - set(opt.slots)
    if unknown:
        raise UsageError(f"parameter(s) not registered with optimizer: {', '.join(sorted(unknown))}")
    opt.step_count += 1
    lr = opt.learning_rate
    for name, p in params.items():
        g = p.grad
        slot = opt.slots[name]
        if opt.kind == "sgd_momentum":
            slot["velocity"] = opt.momentum * slot["velocity"] + g
            p.data = p.data - lr * slot["velocity"]
        else:
            slot["m"] = opt.beta1 * slot["m"] + (1.0 - opt.beta1) * g
            slot["v"] = opt.beta2 * slot["v"] + (1.0 - opt.beta2) * g * g
            m_hat = slot["m"] / (1.0 - opt.beta1**opt.step_count)
            v_hat = slot["v"] / (1.0 - opt.beta2**opt.step_count)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + opt.epsilon)
        p.grad = None


def zero_grad(params):
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"MIAN"
VERSION = 1


def save_checkpoint(path, params):
    """Write named arrays: magic, version byte, then (name, rank, dims, f64 values) records."""
    with open(path, "wb") as fh:
        fh.write(MAGIC + bytes([VERSION]))
        for name, value in params.items():
            arr = value.data if isinstance(value, T.Tensor) else np.asarray(value, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ParseError("not a checkpoint file (bad magic)")
    if len(blob) < 5 or blob[4] != VERSION:
        raise ParseError("unsupported checkpoint version")
    out = {}
    pos = 5
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 8 * count > len(blob):
                raise ParseError(f"truncated values for {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise ParseError(f"truncated checkpoint: {exc}") from None
    return out


def mlp_from_arrays(arrays, prefix, activation="relu"):
    """Rebuild an :class:`Mlp` from checkpoint arrays named ``{prefix}{i}.weight``/``.bias``."""
    layers = []
    i = 0
    while f"{prefix}{i}.weight" in arrays:
        layers.append(
            Layer(
                T.Tensor(arrays[f"{prefix}{i}.weight"], True),
                T.Tensor(arrays[f"{prefix}{i}.bias"], True),
                activation,
            )
        )
        i += 1
    if not layers:
        raise UsageError(f"no layers with prefix {prefix!r} in checkpoint")
    layers[-1].activation = "none"
    return Mlp(layers)
