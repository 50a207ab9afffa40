"""Dense networks with hand-written reverse mode and an Adam optimizer.

Weights are stored as ``W[i]`` of shape ``(fan_in, fan_out)`` so a layer
computes ``act(x @ W + b)``; inputs may be single vectors or row batches.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np


class Act(str, enum.Enum):
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"
    SOFTMAX = "softmax"


class StaleTapeError(RuntimeError):
    pass


def _apply(act: Act, z):
    if act is Act.RELU:
        return np.maximum(z, 0.0)
    if act is Act.TANH:
        return np.tanh(z)
    if act is Act.SOFTMAX:
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    return z


def _act_backward(act: Act, z, y, g):
    if act is Act.RELU:
        return g * (z > 0)
    if act is Act.TANH:
        return g * (1.0 - y * y)
    if act is Act.SOFTMAX:
        return y * (g - np.sum(g * y, axis=-1, keepdims=True))
    return g


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    act: Act = Act.IDENTITY

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        self.act = Act(self.act)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ValueError(f"bad layer shapes W{self.W.shape} b{self.b.shape}")


@dataclass
class Tape:
    net: "DenseNet"
    version: int
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)
    squeeze: bool = False


class DenseNet:
    def __init__(self, layers):
        self.layers = list(layers)
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.W.shape[1] != b.W.shape[0]:
                raise ValueError(f"layer {i} output {a.W.shape[1]} does not feed layer {i + 1} input {b.W.shape[0]}")
        for layer in self.layers[:-1]:
            if layer.act is Act.SOFTMAX:
                raise ValueError("softmax is only allowed on the final layer")
        self._version = 0

    @classmethod
    def init(cls, sizes, activations, rng) -> "DenseNet":
        """Fan-based uniform init ``U(+-sqrt(6 / (fan_in + fan_out)))`` and zero biases."""
        rng = np.random.default_rng(rng)
        if isinstance(activations, (str, Act)):
            activations = [activations] * (len(sizes) - 1)
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append(Layer(rng.uniform(-limit, limit, (fan_in, fan_out)), np.zeros(fan_out), act))
        return cls(layers)

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].W.shape[0]] + [layer.W.shape[1] for layer in self.layers]

    @property
    def activations(self) -> list[Act]:
        return [layer.act for layer in self.layers]

    def shape_spec(self) -> list[tuple[int, int, str]]:
        return [(l.W.shape[0], l.W.shape[1], l.act.value) for l in self.layers]

    @property
    def n_params(self) -> int:
        return sum(l.W.size + l.b.size for l in self.layers)

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.W, layer.b])
        return out

    def touch(self):
        """Mark parameters as modified; tapes recorded earlier become stale."""
        self._version += 1

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.W.copy(), l.b.copy(), l.act) for l in self.layers])

    def __call__(self, x):
        return self.forward(x)[0]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.shape[-1] != self.sizes[0]:
            raise ValueError(f"input dimension {h.shape[-1]} != {self.sizes[0]}")
        tape = Tape(self, self._version, squeeze=squeeze)
        for layer in self.layers:
            tape.inputs.append(h)
            z = h @ layer.W + layer.b
            h = _apply(layer.act, z)
            tape.pre.append(z)
            tape.post.append(h)
        return (h[0] if squeeze else h), tape

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"in": l.W.shape[0], "out": l.W.shape[1], "activation": l.act.value,
                 "W": l.W.ravel().tolist(), "b": l.b.tolist()}
                for l in self.layers
            ]
        }

    @classmethod
    def from_dict(cls, doc) -> "DenseNet":
        return cls([
            Layer(np.asarray(d["W"], dtype=np.float64).reshape(d["in"], d["out"]), d["b"], d["activation"])
            for d in doc["layers"]
        ])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text) -> "DenseNet":
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, DenseNet) or len(self.layers) != len(other.layers):
            return False
        return all(
            a.act is b.act and np.array_equal(a.W, b.W) and np.array_equal(a.b, b.b)
            for a, b in zip(self.layers, other.layers)
        )


def forward(net: DenseNet, x):
    return net.forward(x)


def backward(tape: Tape, upstream):
    """Gradients of ``sum(upstream * y)`` for the recorded pass.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` ordered like
    ``net.params()``.
    """
    net = tape.net
    if tape.version != net._version:
        raise StaleTapeError("network parameters changed after this forward pass")
    g = np.asarray(upstream, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    grads = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        gz = _act_backward(layer.act, tape.pre[i], tape.post[i], g)
        grads[2 * i] = tape.inputs[i].T @ gz
        grads[2 * i + 1] = gz.sum(axis=0)
        g = gz @ layer.W.T
    return grads, (g[0] if tape.squeeze else g)


# --- flat parameter vectors -------------------------------------------------------


def flatten(net: DenseNet) -> np.ndarray:
    """Layer-major concatenation: row-major ``W_i`` followed by ``b_i``."""
    return np.concatenate([p.ravel() for p in net.params()])


def flatten_grads(grads) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads])


def param_count(shape_spec) -> int:
    return sum(i * o + o for i, o, *_ in shape_spec)


def unflatten(vec, shape_spec) -> DenseNet:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (param_count(shape_spec),):
        raise ValueError(f"expected {param_count(shape_spec)} parameters, got {vec.shape}")
    layers, pos = [], 0
    for fan_in, fan_out, act in shape_spec:
        W = vec[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out).copy()
        pos += fan_in * fan_out
        b = vec[pos:pos + fan_out].copy()
        pos += fan_out
        layers.append(Layer(W, b, act))
    return DenseNet(layers)


def assign_flat(net: DenseNet, vec):
    """Overwrite ``net``'s parameters in place from a flat vector."""
    pos = 0
    for p in net.params():
        p[...] = vec[pos:pos + p.size].reshape(p.shape)
        pos += p.size
    net.touch()


# --- checking ---------------------------------------------------------------------


def relative_error(a, b, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def numeric_grad(fn, params, h: float = 1e-5):
    """Central differences of scalar ``fn()`` w.r.t. each array in ``params`` (mutated and restored)."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = fn()
            flat[k] = orig - h
            down = fn()
            flat[k] = orig
            gflat[k] = (up - down) / (2.0 * h)
        out.append(g)
    return out


def grad_check(net: DenseNet, loss, x, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``loss(y)`` returns ``(value, dvalue/dy)``.
    """
    y, tape = net.forward(x)
    _, dy = loss(y)
    analytic, _ = backward(tape, dy)

    def value():
        return loss(net.forward(x)[0])[0]

    numeric = numeric_grad(value, net.params(), h)
    net.touch()
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


# --- optimizer --------------------------------------------------------------------


@dataclass
class AdamState:
    params: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = None
    v: list = None

    def __post_init__(self):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in self.params]
        if self.v is None:
            self.v = [np.zeros_like(p) for p in self.params]


def adam_step(state: AdamState, grads, owners=()):
    """In-place Adam update; ``owners`` are networks whose tapes should go stale."""
    if len(grads) != len(state.params):
        raise ValueError("gradient list does not match parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(state.params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    for net in owners:
        net.touch()
    return state.params
