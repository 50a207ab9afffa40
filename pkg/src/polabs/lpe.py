"""Layer-wise permutation-invariant encoder over dense-policy parameters.

For every policy layer ``i`` the matrix ``[W_i ; b_i]^T`` has one row per
output unit, ``(W_i[:, j], b_i[j])``, of length ``l_i + 1``. A per-layer
network maps each row to ``e_i`` features, the rows are averaged, and the
layer codes are concatenated.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import nn

HIDDEN = 64
REPR_DIM = 256


class ArchitectureMismatch(ValueError):
    pass


def split_dims(total: int, n_layers: int) -> list[int]:
    """Even split of ``total`` over layers; the remainder goes to the last layer."""
    if n_layers < 1 or total < n_layers:
        raise ValueError(f"cannot split {total} dimensions over {n_layers} layers")
    base = total // n_layers
    dims = [base] * n_layers
    dims[-1] += total - base * n_layers
    return dims


def _normalize_spec(spec):
    return [(int(i), int(o), nn.Act(a).value) for i, o, a in spec]


def layer_rows(spec, thetas) -> list[np.ndarray]:
    """Per-layer row tensors of shape ``(batch, l_{i+1}, l_i + 1)`` from flat parameters."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    if thetas.shape[1] != nn.param_count(spec):
        raise ArchitectureMismatch(
            f"policy has {thetas.shape[1]} parameters, encoder expects {nn.param_count(spec)}")
    out, pos = [], 0
    for fan_in, fan_out, _ in spec:
        W = thetas[:, pos:pos + fan_in * fan_out].reshape(-1, fan_in, fan_out)
        pos += fan_in * fan_out
        b = thetas[:, pos:pos + fan_out]
        pos += fan_out
        out.append(np.concatenate([W.transpose(0, 2, 1), b[:, :, None]], axis=2))
    return out


@dataclass
class LpeModel:
    policy_spec: list
    encoders: list

    def __post_init__(self):
        self.policy_spec = _normalize_spec(self.policy_spec)
        if len(self.encoders) != len(self.policy_spec):
            raise ArchitectureMismatch("one row encoder per policy layer is required")
        for k, ((fan_in, _, _), enc) in enumerate(zip(self.policy_spec, self.encoders)):
            if enc.sizes[0] != fan_in + 1:
                raise ArchitectureMismatch(
                    f"encoder {k} takes rows of length {enc.sizes[0]}, policy layer gives {fan_in + 1}")

    @classmethod
    def init(cls, policy_spec, rng, repr_dim: int = REPR_DIM, hidden: int = HIDDEN,
             hidden_act: str = "relu") -> "LpeModel":
        rng = np.random.default_rng(rng)
        spec = _normalize_spec(policy_spec)
        encoders = [
            nn.DenseNet.init([fan_in + 1, hidden, e], [hidden_act, "identity"], rng)
            for (fan_in, _, _), e in zip(spec, split_dims(repr_dim, len(spec)))
        ]
        return cls(spec, encoders)

    @property
    def layer_dims(self) -> list[int]:
        return [enc.sizes[-1] for enc in self.encoders]

    @property
    def dim(self) -> int:
        return sum(self.layer_dims)

    def params(self) -> list[np.ndarray]:
        return [p for enc in self.encoders for p in enc.params()]

    def touch(self):
        for enc in self.encoders:
            enc.touch()

    def copy(self) -> "LpeModel":
        return LpeModel(list(self.policy_spec), [enc.copy() for enc in self.encoders])

    def to_dict(self) -> dict:
        return {"policy_spec": [list(s) for s in self.policy_spec],
                "encoders": [enc.to_dict() for enc in self.encoders]}

    @classmethod
    def from_dict(cls, doc) -> "LpeModel":
        return cls(doc["policy_spec"], [nn.DenseNet.from_dict(e) for e in doc["encoders"]])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text, policy_spec=None) -> "LpeModel":
        model = cls.from_dict(json.loads(text))
        if policy_spec is not None and model.policy_spec != _normalize_spec(policy_spec):
            raise ArchitectureMismatch("stored encoder was built for a different policy architecture")
        return model


@dataclass
class EncodeTape:
    tapes: list
    rows: list


def _as_flat(model: LpeModel, theta):
    if isinstance(theta, nn.DenseNet):
        if _normalize_spec(theta.shape_spec()) != model.policy_spec:
            raise ArchitectureMismatch("policy architecture differs from the encoder's")
        return nn.flatten(theta)
    return np.asarray(theta, dtype=np.float64)


def encode_batch(model: LpeModel, thetas):
    """Embeddings ``(batch, dim)`` plus a tape for :func:`backward`."""
    if isinstance(thetas, nn.DenseNet):
        thetas = [thetas]
    if isinstance(thetas, (list, tuple)):
        thetas = np.stack([_as_flat(model, t) for t in thetas]) if thetas else np.zeros((0, 0))
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    rows = layer_rows(model.policy_spec, thetas)
    batch = thetas.shape[0]
    codes, tapes = [], []
    for enc, r in zip(model.encoders, rows):
        n_rows = r.shape[1]
        y, tape = enc.forward(r.reshape(batch * n_rows, -1))
        codes.append(y.reshape(batch, n_rows, -1).mean(axis=1))
        tapes.append(tape)
    return np.concatenate(codes, axis=1), EncodeTape(tapes, [r.shape[1] for r in rows])


def encode(model: LpeModel, theta) -> np.ndarray:
    return encode_batch(model, _as_flat(model, theta)[None, :])[0][0]


def backward(model: LpeModel, tape: EncodeTape, upstream) -> list[np.ndarray]:
    """Gradients w.r.t. the encoder parameters (ordered like ``model.params()``)."""
    upstream = np.asarray(upstream, dtype=np.float64)
    grads, start = [], 0
    for enc, t, n_rows in zip(model.encoders, tape.tapes, tape.rows):
        e = enc.sizes[-1]
        g = upstream[:, start:start + e] / n_rows
        start += e
        g_rows = np.repeat(g, n_rows, axis=0)
        layer_grads, _ = nn.backward(t, g_rows)
        grads.extend(layer_grads)
    return grads
