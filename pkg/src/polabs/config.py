"""Experiment configuration: TOML in, validated dataclasses out.

A config names one experiment, a seed list, an output directory and one
section of experiment parameters::

    experiment = "trpo"
    seeds = [0, 1, 2]
    output = "runs/trpo"

    [trpo]
    metrics = ["none", "pi"]
    iterations = 15

Unknown keys are rejected. The resolved config (defaults filled in) is what
gets hashed and echoed into the output directory.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SEED_ENV = "POLABS_SEED"

EXPERIMENTS = (
    "gridworld-metrics", "trpo", "dges",
    "ope-collect", "ope-train", "ope-eval", "ope-table", "ope-embed",
)


class ConfigParseError(ValueError):
    """The file is not valid TOML (exit status 2)."""


class ConfigValidationError(ValueError):
    """The file parsed but names unknown keys or invalid values (exit status 3)."""


@dataclass
class GridworldSection:
    envs: list = field(default_factory=lambda: ["distinct_policies", "doorway", "key_action"])
    eps: list = field(default_factory=lambda: [round(0.1 * k, 1) for k in range(10)])
    side: int = 5
    discount: float = 0.95


@dataclass
class TrpoSection:
    n_directions: int = 5
    length: int = 25
    horizon: int = 25
    metrics: list = field(default_factory=lambda: ["none", "pi", "ppi", "vpi"])
    sigmas: dict = field(default_factory=dict)   # metric -> list; default search grid when absent
    iterations: int = 15
    sample_size: int = 4096
    minibatches: int = 100
    minibatch_size: int = 64
    eval_rollouts: int = 5
    lr: float = 0.01
    estimator: str = "mmd"


@dataclass
class DgesSection:
    metric: str = "ppi"
    betas: list = field(default_factory=lambda: [0.0, 10.0])
    population: int = 50
    noise_std: float = 0.05
    lr: float = 0.01
    archive: int = 10
    generations: int = 120
    metric_episodes: int = 1


@dataclass
class OpeSection:
    dataset: str = "dataset"     # relative paths resolve against the output directory
    env: str = "point"
    trainer: str = "es"
    intervals: int = 10
    K: int = 4
    B: int = 30
    m: int = 500
    train_steps: int = 120
    collect_beta: float = 10.0
    collect_archive: int = 50
    rows: list = field(default_factory=lambda: ["f_theta", "f_re", "f_el", "f_cl", "f_pi", "f_ppi", "f_vpi"])
    modes: list = field(default_factory=lambda: ["weak", "strong"])
    ratio: float = 0.2
    trials: int = 0              # 0 picks 10 for weak and 5 for strong
    base_epochs: int = 200
    eta: float = 1.0
    freeze_encoder_on_eval: bool = False
    models: str = "models"


SECTIONS = {
    "gridworld-metrics": ("gridworld", GridworldSection),
    "trpo": ("trpo", TrpoSection),
    "dges": ("dges", DgesSection),
    "ope-collect": ("ope", OpeSection),
    "ope-train": ("ope", OpeSection),
    "ope-eval": ("ope", OpeSection),
    "ope-table": ("ope", OpeSection),
    "ope-embed": ("ope", OpeSection),
}


@dataclass
class ExperimentConfig:
    experiment: str
    seeds: list
    output: str
    params: object

    def to_dict(self) -> dict:
        section = SECTIONS[self.experiment][0]
        return {"experiment": self.experiment, "seeds": list(self.seeds), "output": self.output,
                section: dataclasses.asdict(self.params)}

    def config_hash(self) -> str:
        """Git-style blob hash of the canonical JSON form (output path excluded)."""
        doc = self.to_dict()
        doc.pop("output")
        return git_blob_hash(canonical_json(doc).encode())

    def with_seeds(self, seeds) -> "ExperimentConfig":
        return dataclasses.replace(self, seeds=list(seeds))


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _check_type(path, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        raise ConfigValidationError(f"{path}: expected {type(default).__name__}, got {value!r}")
    return float(value) if isinstance(default, float) else value


def build_section(cls, doc: dict, path: str):
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigValidationError(f"{path}: unknown key(s) {', '.join(unknown)}")
    values = {k: _check_type(f"{path}.{k}", v, getattr(defaults, k)) for k, v in doc.items()}
    return dataclasses.replace(defaults, **values)


def _validate_params(experiment, p):
    from .repr_learn import ROWS

    def need(cond, msg):
        if not cond:
            raise ConfigValidationError(msg)

    if experiment == "gridworld-metrics":
        from .mdp import GridKind
        for env in p.envs:
            need(env in {k.value for k in GridKind}, f"gridworld.envs: unknown environment {env!r}")
        need(all(isinstance(e, (int, float)) and 0 <= e <= 1 for e in p.eps), "gridworld.eps: values must lie in [0, 1]")
        need(0 < p.discount < 1, "gridworld.discount must lie in (0, 1)")
    elif experiment == "trpo":
        for m in p.metrics:
            need(m == "none" or m in ("pi", "ppi", "vpi"), f"trpo.metrics: unknown metric {m!r}")
        for m, grid in p.sigmas.items():
            need(m in ("pi", "ppi", "vpi"), f"trpo.sigmas: unknown metric {m!r}")
            need(isinstance(grid, list) and all(isinstance(s, (int, float)) and s >= 0 for s in grid),
                 f"trpo.sigmas.{m}: thresholds must be nonnegative numbers")
        need(p.estimator in ("mmd", "jeffreys"), "trpo.estimator must be 'mmd' or 'jeffreys'")
        need(p.n_directions >= 2 and p.iterations >= 1, "trpo: n_directions >= 2 and iterations >= 1 required")
    elif experiment == "dges":
        need(p.metric in ("pi", "ppi", "vpi"), f"dges.metric: unknown metric {p.metric!r}")
        need(all(isinstance(b, (int, float)) and b >= 0 for b in p.betas), "dges.betas: beta must be nonnegative")
        need(p.population >= 2, "dges.population must be at least 2")
        need(p.archive >= 1, "dges.archive must be at least 1")
    else:
        need(p.env in ("point", "n_direction"), "ope.env must be 'point' or 'n_direction'")
        need(p.trainer in ("es", "pg"), "ope.trainer must be 'es' or 'pg'")
        need(all(r in ROWS for r in p.rows), f"ope.rows: expected a subset of {sorted(ROWS)}")
        need(all(m in ("weak", "strong") for m in p.modes), "ope.modes: expected 'weak' and/or 'strong'")
        need(0 < p.ratio < 1, "ope.ratio must lie strictly between 0 and 1")
        need(p.eta > 0, "ope.eta must be positive")
        need(p.K * p.intervals >= 1, "ope: K * intervals must be positive")
        need(p.collect_archive >= 1, "ope.collect_archive must be at least 1")


def from_dict(doc: dict, source: str = "<config>") -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigValidationError(f"{source}: top level must be a table")
    experiment = doc.get("experiment")
    if experiment not in SECTIONS:
        raise ConfigValidationError(f"{source}: experiment must be one of {', '.join(EXPERIMENTS)}, got {experiment!r}")
    section, cls = SECTIONS[experiment]
    allowed = {"experiment", "seeds", "output", section}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigValidationError(f"{source}: unknown key(s) {', '.join(unknown)}")
    seeds = doc.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigValidationError(f"{source}: seeds must be a nonempty list of nonnegative integers")
    output = doc.get("output", "out")
    if not isinstance(output, str) or not output:
        raise ConfigValidationError(f"{source}: output must be a nonempty string")
    sec = doc.get(section, {})
    if not isinstance(sec, dict):
        raise ConfigValidationError(f"{source}: [{section}] must be a table")
    params = build_section(cls, sec, section)
    _validate_params(experiment, params)
    return ExperimentConfig(experiment, seeds, output, params)


def parse_text(text: str, source: str = "<config>") -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigParseError(f"{source}: {exc}") from None


def load(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigParseError(f"{path}: {exc.strerror}") from None
    return apply_seed_env(from_dict(parse_text(text, str(path)), str(path)))


def default(experiment: str) -> ExperimentConfig:
    return from_dict({"experiment": experiment})


def apply_seed_env(cfg: ExperimentConfig, environ=None) -> ExperimentConfig:
    """``POLABS_SEED`` replaces the seed list with a single seed."""
    environ = os.environ if environ is None else environ
    raw = environ.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigValidationError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
    if seed < 0:
        raise ConfigValidationError(f"{SEED_ENV} must be nonnegative")
    return cfg.with_seeds([seed])


def override(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Apply flag values (``None`` means not given) to the experiment section."""
    given = {k: v for k, v in changes.items() if v is not None}
    if not given:
        return cfg
    doc = cfg.to_dict()
    section = SECTIONS[cfg.experiment][0]
    doc[section].update(given)
    return from_dict(doc, "flags")
