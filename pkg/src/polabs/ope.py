"""Offline policy datasets, generalization splits and value-prediction evaluation."""
from __future__ import annotations

import enum
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import lpe, nn
from . import mdp as M
from . import point_env as P
from . import policy_opt as PO
from . import repr_learn as RL
from .metrics import MetricKind
from .mmd import KIND_TAG, InsufficientSamples, KernelSpec, SampleSet, SampleTag, median_bandwidth, pairwise_mmd2

RATIOS = (0.2, 0.4, 0.8)
PAPER_SCALE = {"intervals": 50, "K": 40, "B": 200, "m": 1000}
DESK_SCALE = {"intervals": 10, "K": 6, "B": 30, "m": 500}
# update epochs relative to the 20% budget (10k / 50k / 100k at paper scale)
EPOCH_SCALE = {0.2: 1, 0.4: 5, 0.8: 10}


# --- records -----------------------------------------------------------------------------


@dataclass
class PolicyRecord:
    theta: np.ndarray
    spec: list
    mean_return: float
    samples: dict
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.spec = [tuple(s) for s in self.spec]
        if self.theta.shape != (nn.param_count(self.spec),):
            raise ValueError("parameter vector does not match the declared architecture")
        if not math.isfinite(self.mean_return):
            raise ValueError("mean return must be finite")
        self.samples = {SampleTag(t): s if isinstance(s, SampleSet) else SampleSet(s, t)
                        for t, s in self.samples.items()}

    def to_dict(self) -> dict:
        return {
            "spec": [list(s) for s in self.spec],
            "theta": self.theta.tolist(),
            "mean_return": self.mean_return,
            "samples": {t.value: s.points.tolist() for t, s in sorted(self.samples.items())},
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, doc) -> "PolicyRecord":
        return cls(np.asarray(doc["theta"]), doc["spec"], float(doc["mean_return"]),
                   {SampleTag(t): np.asarray(v) for t, v in doc["samples"].items()},
                   doc.get("provenance", {}))


@dataclass
class Dataset:
    records: list
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    @property
    def thetas(self) -> np.ndarray:
        return np.stack([r.theta for r in self.records])

    @property
    def returns(self) -> np.ndarray:
        return np.array([r.mean_return for r in self.records])

    @property
    def spec(self):
        return self.records[0].spec

    def content_hash(self) -> str:
        h = hashlib.sha1()
        for r in self.records:
            h.update(json.dumps(r.to_dict(), sort_keys=True).encode())
        return h.hexdigest()

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        names = []
        for k, rec in enumerate(self.records):
            name = f"record-{k:04d}.json"
            with open(os.path.join(directory, name), "w", encoding="utf-8") as fh:
                json.dump(rec.to_dict(), fh)
            names.append(name)
        manifest = {"n_records": len(self.records), "records": names,
                    "content_hash": self.content_hash(), "info": self.info}
        with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory) -> "Dataset":
        with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
            manifest = json.load(fh)
        records = []
        for name in manifest["records"]:
            with open(os.path.join(directory, name), encoding="utf-8") as fh:
                records.append(PolicyRecord.from_dict(json.load(fh)))
        ds = cls(records, manifest.get("info", {}))
        if ds.content_hash() != manifest["content_hash"]:
            raise ValueError(f"dataset in {directory} does not match its manifest hash")
        return ds


# --- collection ---------------------------------------------------------------------------


class Trainer(str, enum.Enum):
    ES = "es"
    PG = "pg"


def bucket_select(returns, intervals: int, K: int, rng) -> np.ndarray:
    """Pick up to ``K * intervals`` checkpoints spread over equal-width return bins.

    Each nonempty bin contributes up to ``K``; the quota of bins that run
    short is redistributed round-robin over bins with checkpoints left.
    """
    returns = np.asarray(returns, dtype=np.float64)
    n = returns.size
    if n == 0:
        raise ValueError("no checkpoints to select from")
    lo, hi = returns.min(), returns.max()
    if hi > lo:
        bins = np.minimum(((returns - lo) / (hi - lo) * intervals).astype(int), intervals - 1)
    else:
        bins = np.zeros(n, dtype=int)
    pools = [list(rng.permutation(np.nonzero(bins == b)[0])) for b in range(intervals)]
    pools = [p for p in pools if p]
    target = min(K * intervals, n)
    chosen = []
    for p in pools:
        take = min(K, len(p))
        chosen.extend(p[:take])
        del p[:take]
    while len(chosen) < target:
        for p in pools:
            if p and len(chosen) < target:
                chosen.append(p.pop(0))
    return np.sort(np.asarray(chosen, dtype=np.int64))


def subsample_rows(points, m: int, rng) -> np.ndarray:
    if points.shape[0] < m:
        raise InsufficientSamples(f"need {m} samples, only {points.shape[0]} collected")
    return points[np.sort(rng.choice(points.shape[0], size=m, replace=False))]


def _point_record(env, theta, spec, B, m, rng, provenance):
    batch = PO.run_population(env, theta[None, :], spec, B, rng)
    g0 = float(batch.returns[:, 0].mean())
    if not math.isfinite(g0):
        raise FloatingPointError("policy produced a non-finite return")
    samples = {}
    for kind, tag in KIND_TAG.items():
        samples[tag] = subsample_rows(PO.point_samples(batch, kind, 0, B), m, rng)
    return PolicyRecord(theta, spec, g0, samples, provenance)


def _tabular_record(env, net, spec, B, m, rng, provenance):
    S = env.n_states
    pi = M.TabularPolicy(net(np.eye(S)))
    horizon = int(env.info.get("horizon", 4 * S))
    s, a, r, s2, lengths = M.rollout_batch(env, pi, horizon, B, rng)
    mask = np.arange(horizon)[None, :] < lengths[:, None]
    G = np.zeros_like(r)
    acc = np.zeros(B)
    for t in range(horizon - 1, -1, -1):
        acc = np.where(mask[:, t], r[:, t] + env.discount * acc, 0.0)
        G[:, t] = acc
    eye_s, eye_a = np.eye(S), np.eye(env.n_actions)
    s, a, s2, G = s[mask], a[mask], s2[mask], G[mask]
    pts = {
        SampleTag.STATE_ACTION: np.hstack([eye_s[s], eye_a[a]]),
        SampleTag.STATE_NEXT: np.hstack([eye_s[s], eye_s[s2]]),
        SampleTag.STATE_RETURN: np.hstack([eye_s[s], G[:, None]]),
    }
    samples = {tag: subsample_rows(p, min(m, p.shape[0]), rng) for tag, p in pts.items()}
    return PolicyRecord(nn.flatten(net), spec, _g0(r, env.discount), samples, provenance)


def _g0(rewards, discount):
    disc = discount ** np.arange(rewards.shape[1])
    return float((rewards * disc).sum(axis=1).mean())


def collect_dataset(env, trainer="es", intervals: int = 10, K: int = 6, B: int = 30, m: int = 500,
                    seeds=(0, 1, 2), train_steps: int = 120, beta: float = 0.0,
                    archive: int = 50) -> Dataset:
    """Harvest training checkpoints, bucket them by return and record each selected policy.

    ``train_steps`` is ES generations or policy-gradient iterations; ``beta``
    and ``archive`` configure the diversity bonus of the ES trainer.
    """
    trainer = Trainer(trainer)
    if K * intervals < 1:
        raise ValueError("K * intervals must be positive")
    checkpoints, quick = [], []
    if trainer is Trainer.ES:
        if not isinstance(env, P.PointEnv):
            raise ValueError("the ES trainer runs on the point environment")
        spec = PO.point_policy_spec()
        for seed in seeds:
            def keep(gen, theta, row, seed=seed):
                checkpoints.append((seed, gen, theta))
                quick.append(row[1])
            PO.dges_run(PO.EsConfig(beta=beta, generations=train_steps, archive=archive), env, seed,
                        on_generation=keep)
    else:
        if not isinstance(env, M.TabularMdp):
            raise ValueError("the policy-gradient trainer runs on tabular environments")
        cfg = PO.TrustRegionConfig(metric=None, iterations=train_steps)
        spec = None
        for seed in seeds:
            def keep(it, net, seed=seed):
                checkpoints.append((seed, it, net.copy()))
                pi = M.TabularPolicy(net(np.eye(env.n_states)))
                quick.append(M.expected_return(env, pi))
            PO.trpo_run(cfg, env, seed, on_iteration=keep)
    quick = np.asarray(quick, dtype=np.float64)
    if quick.size == 0 or not np.isfinite(quick).any():
        raise FloatingPointError("trainer diverged: no finite checkpoint returns")
    finite = np.nonzero(np.isfinite(quick))[0]
    rng = np.random.default_rng(np.random.SeedSequence(list(seeds) + [intervals, K, B, m]))
    picked = finite[bucket_select(quick[finite], intervals, K, rng)]
    records = []
    for idx in picked:
        seed, step, obj = checkpoints[idx]
        prov = {"seed": int(seed), "checkpoint": int(step)}
        if trainer is Trainer.ES:
            records.append(_point_record(env, obj, spec, B, m, rng, prov))
        else:
            records.append(_tabular_record(env, obj, obj.shape_spec(), B, m, rng, prov))
    info = {"trainer": trainer.value, "intervals": intervals, "K": K, "B": B, "m": m,
            "seeds": list(seeds), "train_steps": train_steps, "beta": beta}
    if trainer is Trainer.ES:
        info["archive"] = archive
    return Dataset(records, info)


# --- pair metrics ----------------------------------------------------------------------------


def return_range(dataset: Dataset) -> float:
    pts = np.concatenate([r.samples[SampleTag.STATE_RETURN].points[:, -1] for r in dataset.records])
    span = float(pts.max() - pts.min())
    return span if span > 0 else 1.0


def pair_metric_matrix(dataset: Dataset, kind, spec: KernelSpec | None = None, m: int | None = None,
                       seed: int = 0) -> np.ndarray:
    """Squared-MMD estimates for every record pair at one dataset-wide bandwidth.

    Return columns are divided by the dataset's return range first; the base
    bandwidth is the median heuristic over an even split of all records' samples.
    """
    kind = MetricKind(kind)
    tag = KIND_TAG[kind]
    spec = spec or KernelSpec()
    rng = np.random.default_rng(seed)
    scale = return_range(dataset) if tag is SampleTag.STATE_RETURN else None
    sets = []
    for rec in dataset.records:
        pts = rec.samples[tag].points
        if m is not None and m < pts.shape[0]:
            pts = pts[np.sort(rng.choice(pts.shape[0], size=m, replace=False))]
        if scale is not None:
            pts = pts.copy()
            pts[:, -1] /= scale
        sets.append(pts)
    half = len(sets) // 2 or 1
    base = spec.base_bandwidth or median_bandwidth(np.vstack(sets[:half]), np.vstack(sets[half:] or sets[:1]))
    return pairwise_mmd2(sets, spec, base_bandwidth=base)


def pair_cache(dataset: Dataset, kind, **kwargs) -> RL.PairCache:
    D = pair_metric_matrix(dataset, kind, **kwargs)
    cache = RL.PairCache(kind)
    n = D.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            cache[i, j] = max(D[i, j], 0.0)
    return cache


# --- splits and normalization ---------------------------------------------------------------


class SplitMode(str, enum.Enum):
    WEAK = "weak"
    STRONG = "strong"


@dataclass(frozen=True)
class OpeSplit:
    train: np.ndarray
    test: np.ndarray
    mode: SplitMode
    ratio: float


def make_split(returns, mode, ratio: float, seed: int = 0) -> OpeSplit:
    """Weak: uniform train sample. Strong: the lowest-return ``floor(ratio * n)`` policies train."""
    mode = SplitMode(mode)
    returns = np.asarray(returns, dtype=np.float64)
    n = returns.size
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie strictly between 0 and 1, got {ratio}")
    n_train = int(math.floor(ratio * n))
    if n_train < 1 or n_train >= n:
        raise ValueError(f"split of {n} policies at ratio {ratio} leaves an empty side")
    if mode is SplitMode.WEAK:
        train = np.sort(np.random.default_rng(seed).choice(n, size=n_train, replace=False))
    else:
        train = np.sort(np.argsort(returns, kind="stable")[:n_train])
    test = np.setdiff1d(np.arange(n), train)
    return OpeSplit(train, test, mode, ratio)


@dataclass(frozen=True)
class MinMax:
    lo: float
    hi: float

    @classmethod
    def fit(cls, values) -> "MinMax":
        values = np.asarray(values, dtype=np.float64)
        return cls(float(values.min()), float(values.max()))

    def __call__(self, values) -> np.ndarray:
        span = self.hi - self.lo
        return (np.asarray(values, dtype=np.float64) - self.lo) / (span if span > 0 else 1.0)


# --- evaluation -------------------------------------------------------------------------------


@dataclass(frozen=True)
class OpeErrors:
    train_error: float
    t_error: float

    @property
    def g_gap(self) -> float:
        return self.t_error - self.train_error


def evaluate(pevfa, model, split: OpeSplit, thetas, targets) -> OpeErrors:
    """MSE on normalized returns for the train and test sides of ``split``."""
    thetas = np.asarray(thetas, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    pred = RL.predict(pevfa, model, thetas)
    err = (pred - targets) ** 2
    return OpeErrors(float(err[split.train].mean()), float(err[split.test].mean()))


@dataclass
class TrialResult:
    seed: int
    initial: OpeErrors
    final: OpeErrors
    history: list
    model: object = field(repr=False, default=None)
    pevfa: object = field(repr=False, default=None)


def run_trial(dataset: Dataset, objective, split: OpeSplit, epochs: int, seed: int,
              pairs: RL.PairCache | None = None, **train_kwargs) -> TrialResult:
    thetas = dataset.thetas
    norm = MinMax.fit(dataset.returns[split.train])
    targets = norm(dataset.returns)
    init = RL.train(thetas[split.train], targets[split.train], objective, dataset.spec, 0,
                    seed=seed, pairs=pairs, index=split.train, **train_kwargs)
    initial = evaluate(init.pevfa, init.model, split, thetas, targets)
    res = RL.train(thetas[split.train], targets[split.train], objective, dataset.spec, epochs,
                   seed=seed, pairs=pairs, index=split.train, **train_kwargs)
    final = evaluate(res.pevfa, res.model, split, thetas, targets)
    return TrialResult(seed, initial, final, res.history, res.model, res.pevfa)


def epochs_for(ratio: float, base: int) -> int:
    return base * EPOCH_SCALE.get(ratio, max(1, round(ratio / 0.2)))


def run_ope(dataset: Dataset, objective, mode, ratio: float, trials: int, base_epochs: int = 200,
            pairs: RL.PairCache | None = None, seed: int = 0, **train_kwargs) -> dict:
    """Mean and population std of T-error and G-gap over ``trials`` seeds."""
    if trials < 1:
        raise ValueError("need at least one trial")
    if isinstance(objective, RL.Align) and pairs is None:
        pairs = pair_cache(dataset, objective.kind)
    epochs = epochs_for(ratio, base_epochs)
    results = []
    for t in range(trials):
        split = make_split(dataset.returns, mode, ratio, seed + t)
        results.append(run_trial(dataset, objective, split, epochs, seed + t, pairs, **train_kwargs))
    t_err = np.array([r.final.t_error for r in results])
    gap = np.array([r.final.g_gap for r in results])
    return {"t_error_mean": float(t_err.mean()), "t_error_std": float(t_err.std()),
            "g_gap_mean": float(gap.mean()), "g_gap_std": float(gap.std()),
            "epochs": epochs, "trials": results}
