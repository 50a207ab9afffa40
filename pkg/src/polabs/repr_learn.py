"""Policy-representation objectives and the joint representation / value training loop."""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from itertools import combinations
from typing import Union

import numpy as np

from . import lpe, nn
from .metrics import MetricKind

PEVFA_HIDDEN = 128
BATCH = 256
LR = 1e-3


# --- objectives -------------------------------------------------------------------


@dataclass(frozen=True)
class Align:
    kind: MetricKind
    eta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", MetricKind(self.kind))
        if not self.kind.has_mmd:
            raise ValueError(f"alignment needs a sample-estimable metric, not {self.kind.value}")
        if self.eta <= 0:
            raise ValueError("eta must be positive")


@dataclass(frozen=True)
class Contrastive:
    temperature: float = 0.1
    noise_scale: float = 1e-2

    def __post_init__(self):
        if self.temperature <= 0 or self.noise_scale <= 0:
            raise ValueError("temperature and noise scale must be positive")


@dataclass(frozen=True)
class EndToEnd:
    pass


@dataclass(frozen=True)
class Random:
    pass


@dataclass(frozen=True)
class RawParams:
    pass


ReprObjective = Union[Align, Contrastive, EndToEnd, Random, RawParams]

# table row label -> objective
ROWS = {
    "f_theta": RawParams(),
    "f_re": Random(),
    "f_el": EndToEnd(),
    "f_cl": Contrastive(),
    "f_pi": Align(MetricKind.DIST),
    "f_ppi": Align(MetricKind.INFL),
    "f_vpi": Align(MetricKind.VALUE),
}


def objective_from_name(name: str, eta: float = 1.0) -> ReprObjective:
    obj = ROWS.get(name.lower())
    if obj is None:
        raise ValueError(f"unknown objective {name!r}; expected one of {sorted(ROWS)}")
    if isinstance(obj, Align):
        return Align(obj.kind, eta)
    return obj


def trains_encoder(obj) -> bool:
    return isinstance(obj, (Align, Contrastive, EndToEnd))


# --- pair cache ---------------------------------------------------------------------


class MissingPair(KeyError):
    pass


@dataclass
class PairCache:
    kind: MetricKind
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = MetricKind(self.kind)

    @staticmethod
    def _key(i, j):
        return (int(i), int(j)) if i <= j else (int(j), int(i))

    def __setitem__(self, ij, value):
        value = float(value)
        if not value >= 0:
            raise ValueError(f"metric values must be nonnegative, got {value}")
        self.values[self._key(*ij)] = value

    def __getitem__(self, ij):
        i, j = ij
        if i == j:
            return 0.0
        try:
            return self.values[self._key(i, j)]
        except KeyError:
            raise MissingPair(f"no cached {self.kind.value} value for pair ({i}, {j})") from None

    def __len__(self):
        return len(self.values)

    @classmethod
    def build(cls, n: int, kind, fn) -> "PairCache":
        cache = cls(kind)
        for i, j in combinations(range(n), 2):
            cache[i, j] = fn(i, j)
        return cache

    def matrix(self, idx) -> np.ndarray:
        idx = list(idx)
        out = np.zeros((len(idx), len(idx)))
        for a, b in combinations(range(len(idx)), 2):
            out[a, b] = out[b, a] = self[idx[a], idx[b]]
        return out

    def to_json(self) -> str:
        return json.dumps([{"i": i, "j": j, "kind": self.kind.value, "value": v}
                           for (i, j), v in sorted(self.values.items())])

    @classmethod
    def from_json(cls, text) -> "PairCache":
        rows = json.loads(text)
        kinds = {r["kind"] for r in rows}
        if len(kinds) > 1:
            raise ValueError(f"mixed metric kinds in cache: {sorted(kinds)}")
        cache = cls(kinds.pop() if kinds else MetricKind.DIST)
        for r in rows:
            cache[r["i"], r["j"]] = r["value"]
        return cache


def cache_key(dataset_hash: str, kind, seed: int) -> str:
    return hashlib.sha1(f"{dataset_hash}:{MetricKind(kind).value}:{seed}".encode()).hexdigest()[:16]


def load_or_build_cache(directory, dataset_hash, kind, seed, n, fn) -> PairCache:
    """Disk-backed :meth:`PairCache.build` keyed by dataset hash, metric kind and seed."""
    path = os.path.join(directory, f"pairs-{cache_key(dataset_hash, kind, seed)}.json")
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            return PairCache.from_json(fh.read())
    cache = PairCache.build(n, kind, fn)
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cache.to_json())
    return cache


# --- losses on embeddings -------------------------------------------------------------


def alignment_terms(emb, targets, eta: float = 1.0):
    """Pairwise alignment loss and its gradient w.r.t. the embeddings.

    ``targets`` is the ``(n, n)`` matrix of metric values for the batch.
    """
    emb = np.asarray(emb, dtype=np.float64)
    n = emb.shape[0]
    if n < 2:
        raise ValueError("alignment loss needs at least two policies")
    iu, ju = np.triu_indices(n, k=1)
    diff = emb[iu] - emb[ju]
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    resid = dist - eta * np.asarray(targets)[iu, ju]
    n_pairs = iu.size
    loss = float(np.mean(resid * resid))
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(dist[:, None] > 0, diff / dist[:, None], 0.0)
    coef = (2.0 / n_pairs) * resid[:, None] * unit
    grad = np.zeros_like(emb)
    np.add.at(grad, iu, coef)
    np.add.at(grad, ju, -coef)
    return loss, grad


def _cosine(u, v):
    nu = np.linalg.norm(u, axis=1, keepdims=True)
    nv = np.linalg.norm(v, axis=1, keepdims=True)
    return (u / nu) @ (v / nv).T, nu, nv


def info_nce_terms(anchors, positives, temperature: float):
    """InfoNCE with cosine similarity; row ``i`` of ``positives`` is the positive of anchor ``i``.

    Returns ``(loss, d_anchors, d_positives)``.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    positives = np.asarray(positives, dtype=np.float64)
    n = anchors.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs negatives: batch size must be at least 2")
    sim, nu, nv = _cosine(anchors, positives)
    logits = sim / temperature
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    loss = float(-np.mean(np.log(p[np.arange(n), np.arange(n)])))
    g_sim = (p - np.eye(n)) / (n * temperature)
    uh, vh = anchors / nu, positives / nv
    # d cos(u, v) / du = (vh - cos * uh) / |u|
    d_anchor = (g_sim @ vh - np.sum(g_sim * sim, axis=1, keepdims=True) * uh) / nu
    d_pos = (g_sim.T @ uh - np.sum(g_sim * sim, axis=0)[:, None] * vh) / nv
    return loss, d_anchor, d_pos


def mse_terms(pred, targets):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    diff = pred - np.asarray(targets, dtype=np.float64).reshape(-1)
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


# --- losses through the networks -------------------------------------------------------


def alignment_loss(model: lpe.LpeModel, thetas, targets, eta: float = 1.0):
    emb, tape = lpe.encode_batch(model, thetas)
    loss, g_emb = alignment_terms(emb, targets, eta)
    return loss, lpe.backward(model, tape, g_emb)


def contrastive_loss(model: lpe.LpeModel, thetas, temperature: float = 0.1,
                     noise_scale: float = 1e-2, rng=None):
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    n = thetas.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs negatives: batch size must be at least 2")
    rng = np.random.default_rng(rng)
    noisy = thetas + noise_scale * rng.standard_normal(thetas.shape)
    emb, tape = lpe.encode_batch(model, np.vstack([thetas, noisy]))
    loss, ga, gp = info_nce_terms(emb[:n], emb[n:], temperature)
    return loss, lpe.backward(model, tape, np.vstack([ga, gp]))


def pevfa_init(in_dim: int, rng, hidden: int = PEVFA_HIDDEN) -> nn.DenseNet:
    return nn.DenseNet.init([in_dim, hidden, hidden, 1], ["relu", "relu", "identity"], rng)


def eval_loss(pevfa: nn.DenseNet, model: lpe.LpeModel | None, thetas, targets):
    """MSE of the value head on (normalized) returns.

    With ``model=None`` the head reads flat parameters directly. Returns
    ``(loss, pevfa_grads, encoder_grads)``; the last is ``None`` without a model.
    """
    if model is None:
        inputs, etape = np.atleast_2d(np.asarray(thetas, dtype=np.float64)), None
    else:
        inputs, etape = lpe.encode_batch(model, thetas)
    pred, tape = pevfa.forward(inputs)
    loss, g_pred = mse_terms(pred, targets)
    head_grads, g_in = nn.backward(tape, g_pred[:, None])
    enc_grads = None if model is None else lpe.backward(model, etape, g_in)
    return loss, head_grads, enc_grads


def predict(pevfa: nn.DenseNet, model: lpe.LpeModel | None, thetas) -> np.ndarray:
    inputs = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    if model is not None:
        inputs = lpe.encode_batch(model, inputs)[0]
    return pevfa(inputs).reshape(-1)


# --- training loop ----------------------------------------------------------------------


@dataclass
class TrainResult:
    model: lpe.LpeModel | None
    pevfa: nn.DenseNet
    history: list


def _add(a, b):
    return [x + y for x, y in zip(a, b)]


def train(thetas, targets, objective: ReprObjective, policy_spec, epochs: int,
          batch: int = BATCH, seed: int = 0, pairs: PairCache | None = None,
          index=None, repr_dim: int = lpe.REPR_DIM, hidden: int = PEVFA_HIDDEN,
          lr: float = LR, freeze_encoder_on_eval: bool = False,
          train_value: bool = True) -> TrainResult:
    """Jointly fit the encoder (per ``objective``) and a value head.

    One epoch is one minibatch update. ``index`` maps rows of ``thetas`` to
    the dataset indices used as :class:`PairCache` keys (defaults to
    ``range(n)``). ``train_value=False`` trains the representation alone.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    n = thetas.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    if targets.shape != (n,):
        raise ValueError("one target per policy is required")
    index = np.arange(n) if index is None else np.asarray(index)
    if isinstance(objective, Align):
        if pairs is None:
            raise ValueError("alignment training needs a pair cache")
        if pairs.kind is not objective.kind:
            raise ValueError(f"pair cache holds {pairs.kind.value}, objective wants {objective.kind.value}")
        if n < 2:
            raise ValueError("alignment training needs at least two policies")
    if isinstance(objective, Contrastive) and n < 2:
        raise ValueError("contrastive training needs at least two policies")

    rng = np.random.default_rng(seed)
    raw = isinstance(objective, RawParams)
    model = None if raw else lpe.LpeModel.init(policy_spec, rng, repr_dim)
    pevfa = pevfa_init(thetas.shape[1] if raw else model.dim, rng, hidden)
    head_opt = nn.AdamState(pevfa.params(), lr=lr)
    enc_opt = nn.AdamState(model.params(), lr=lr) if trains_encoder(objective) else None
    aux_rng = np.random.default_rng(rng.integers(2**63))

    history = []
    size = min(batch, n)
    for step in range(epochs):
        idx = np.sort(rng.choice(n, size=size, replace=False)) if size < n else np.arange(n)
        th, y = thetas[idx], targets[idx]
        row = {"step": step + 1}
        enc_grads = None
        if isinstance(objective, Align):
            row["aux_loss"], enc_grads = alignment_loss(
                model, th, pairs.matrix(index[idx]), objective.eta)
        elif isinstance(objective, Contrastive):
            row["aux_loss"], enc_grads = contrastive_loss(
                model, th, objective.temperature, objective.noise_scale, aux_rng)
        if train_value:
            row["eval_loss"], head_grads, eval_enc = eval_loss(pevfa, model, th, y)
            nn.adam_step(head_opt, head_grads, [pevfa])
            if enc_opt is not None and eval_enc is not None:
                if isinstance(objective, EndToEnd) or not freeze_encoder_on_eval:
                    enc_grads = eval_enc if enc_grads is None else _add(enc_grads, eval_enc)
        if enc_opt is not None and enc_grads is not None:
            nn.adam_step(enc_opt, enc_grads)
            model.touch()
        history.append(row)
    return TrainResult(model, pevfa, history)


def write_history(path, history):
    fields = ["step", "aux_loss", "eval_loss"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
