"""Command-line entry point: ``polabs <subcommand>`` or ``polabs run CONFIG``.

Exit status: 0 success, 1 runtime failure, 2 unparsable config, 3 invalid config.
Every run writes ``config-<experiment>.json`` (the resolved config) and
``manifest-<experiment>.json`` (config hash, seeds, artifact hashes) next to its
CSV artifacts, so the ope-* stages can share one directory. Nothing
time-dependent is recorded, so identical configs give identical files.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from . import _accel
from . import config as C

log = logging.getLogger("polabs")

EXIT_OK, EXIT_RUNTIME, EXIT_PARSE, EXIT_INVALID = 0, 1, 2, 3


# --- artifact writing --------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    if v is None:
        return ""
    return str(v)


class Run:
    """Output directory bookkeeping for one experiment invocation."""

    def __init__(self, cfg: C.ExperimentConfig, out: str):
        self.cfg = cfg
        self.out = out
        self.hash = cfg.config_hash()
        self.artifacts = []
        os.makedirs(out, exist_ok=True)

    def path(self, *parts) -> str:
        p = os.path.join(self.out, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def csv(self, name, header, rows):
        path = self.path(name)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(header) + ["config_hash"])
            for row in rows:
                w.writerow([_fmt(v) for v in row] + [self.hash])
        self.artifacts.append(name)
        return path

    def json(self, name, doc):
        path = self.path(name)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.artifacts.append(name)
        return path

    def finish(self):
        with open(self.path(f"config-{self.cfg.experiment}.json"), "w", encoding="utf-8") as fh:
            json.dump(self.cfg.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        digests = {}
        for name in sorted(set(self.artifacts)):
            with open(os.path.join(self.out, name), "rb") as fh:
                digests[name] = C.git_blob_hash(fh.read())
        manifest = {"experiment": self.cfg.experiment, "config_hash": self.hash,
                    "seeds": list(self.cfg.seeds), "artifacts": digests,
                    "backend": _accel.backend(), "version": __version__}
        with open(self.path(f"manifest-{self.cfg.experiment}.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return manifest


# --- experiments -----------------------------------------------------------------------------


def run_gridworld(cfg, run: Run):
    from .mdp import apply_stochasticity, build_gridworld, reference_policies
    from .metrics import MetricKind, all_exact_metrics

    p = cfg.params
    kinds = [MetricKind.DIST, MetricKind.INFL, MetricKind.VALUE, MetricKind.VISIT, MetricKind.RETURN]
    for env_name in p.envs:
        base = build_gridworld(env_name, side=p.side, discount=p.discount)
        pi_a, pi_b = reference_policies(base)
        rows = []
        for eps in p.eps:
            mdp = apply_stochasticity(base, float(eps))
            vals = all_exact_metrics(mdp, pi_a, pi_b)
            rows.append([float(eps)] + [vals[k] for k in kinds])
        run.csv(f"gridworld-{env_name}.csv", ["eps"] + [f"d_{k.value}" for k in kinds], rows)


def run_trpo(cfg, run: Run):
    from .mdp import build_gridworld
    from .metrics import MetricKind
    from .policy_opt import SIGMA_GRID, TrustRegionConfig, auc, post_trip_updates, trpo_run

    p = cfg.params
    env = build_gridworld("n_direction", n_directions=p.n_directions, length=p.length, horizon=p.horizon)
    common = dict(iterations=p.iterations, sample_size=p.sample_size, minibatches=p.minibatches,
                  minibatch_size=p.minibatch_size, eval_rollouts=p.eval_rollouts, lr=p.lr,
                  estimator=p.estimator)
    curves, summary, trips = [], [], []
    for metric in p.metrics:
        if metric == "none":
            grid = [float("inf")]
        else:
            grid = p.sigmas.get(metric, list(SIGMA_GRID[MetricKind(metric)]))
        for sigma in grid:
            tr_cfg = TrustRegionConfig(metric=None if metric == "none" else metric, sigma=float(sigma), **common)
            for seed in cfg.seeds:
                log.info("trpo metric=%s sigma=%s seed=%d", metric, sigma, seed)
                res = trpo_run(tr_cfg, env, seed)
                curves += [[metric, sigma, seed, s, r] for s, r in res.curve]
                trips += [[metric, sigma, seed, e["iteration"], e["update"], e["estimate"], e["tripped"]]
                          for e in res.log if e["estimate"] is not None]
                summary.append([metric, sigma, seed, auc(res.curve), len(res.trips), post_trip_updates(res.log)])
    run.csv("curves.csv", ["metric", "sigma", "seed", "step", "mean_return"], curves)
    run.csv("summary.csv", ["metric", "sigma", "seed", "auc", "trips", "post_trip_updates"], summary)
    run.csv("constraint_log.csv", ["metric", "sigma", "seed", "iteration", "update", "estimate", "tripped"], trips)


def run_dges(cfg, run: Run):
    from .point_env import PointEnv
    from .policy_opt import EsConfig, dges_run

    p = cfg.params
    env = PointEnv()
    curves, summary = [], []
    for beta in p.betas:
        es_cfg = EsConfig(population=p.population, noise_std=p.noise_std, lr=p.lr, beta=float(beta),
                          archive=p.archive, metric=p.metric, generations=p.generations,
                          metric_episodes=p.metric_episodes)
        for seed in cfg.seeds:
            log.info("dges beta=%s seed=%d", beta, seed)
            res = dges_run(es_cfg, env, seed)
            curves += [[beta, seed, g, r, d] for g, r, d in res.curve]
            summary.append([beta, seed, res.final_distance, res.final_distance / env.initial_distance])
    run.csv("curves.csv", ["beta", "seed", "generation", "mean_return", "final_distance"], curves)
    run.csv("summary.csv", ["beta", "seed", "final_distance", "relative_distance"], summary)


def _dataset_dir(cfg, run: Run):
    d = cfg.params.dataset
    return d if os.path.isabs(d) else os.path.join(run.out, d)


def _ope_env(p):
    from .mdp import build_gridworld
    from .point_env import PointEnv
    return PointEnv() if p.env == "point" else build_gridworld("n_direction")


def run_ope_collect(cfg, run: Run):
    from .ope import collect_dataset

    p = cfg.params
    ds = collect_dataset(_ope_env(p), p.trainer, intervals=p.intervals, K=p.K, B=p.B, m=p.m,
                         seeds=tuple(cfg.seeds), train_steps=p.train_steps, beta=p.collect_beta,
                         archive=p.collect_archive)
    out = _dataset_dir(cfg, run)
    ds.save(out)
    rel = os.path.relpath(out, run.out)
    run.artifacts.append(os.path.join(rel, "manifest.json"))
    run.csv("dataset_returns.csv", ["index", "seed", "checkpoint", "mean_return"],
            [[k, r.provenance.get("seed"), r.provenance.get("checkpoint"), r.mean_return]
             for k, r in enumerate(ds.records)])


def _load_dataset(cfg, run):
    from .ope import Dataset
    return Dataset.load(_dataset_dir(cfg, run))


def _pairs(ds, kind, run: Run):
    from .ope import pair_cache
    from .repr_learn import PairCache, cache_key

    name = os.path.join("pairs", f"pairs-{cache_key(ds.content_hash(), kind, 0)}.json")
    path = os.path.join(run.out, name)
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            return PairCache.from_json(fh.read())
    cache = pair_cache(ds, kind)
    with open(run.path(name), "w", encoding="utf-8") as fh:
        fh.write(cache.to_json())
    run.artifacts.append(name)
    return cache


def _trials(p, mode):
    return p.trials or (10 if mode == "weak" else 5)


def _train_rows(cfg, run: Run, ds, write_models: bool):
    from .ope import epochs_for, make_split, run_trial
    from .repr_learn import Align, objective_from_name, write_history

    p = cfg.params
    epochs = epochs_for(p.ratio, p.base_epochs)
    results = []
    for row in p.rows:
        obj = objective_from_name(row, p.eta)
        pairs = _pairs(ds, obj.kind, run) if isinstance(obj, Align) else None
        for mode in p.modes:
            for seed in cfg.seeds:
                log.info("ope row=%s mode=%s seed=%d", row, mode, seed)
                split = make_split(ds.returns, mode, p.ratio, seed)
                res = run_trial(ds, obj, split, epochs, seed, pairs,
                                freeze_encoder_on_eval=p.freeze_encoder_on_eval)
                results.append((row, mode, seed, split, res))
                if write_models:
                    tag = f"{row}-{mode}-seed{seed}"
                    hist = run.path(p.models, f"{tag}-history.csv")
                    write_history(hist, res.history)
                    run.artifacts.append(os.path.relpath(hist, run.out))
                    run.json(os.path.join(p.models, f"{tag}.json"), {
                        "row": row, "mode": mode, "seed": seed, "ratio": p.ratio, "epochs": epochs,
                        "train": split.train.tolist(), "test": split.test.tolist(),
                        "model": None if res.model is None else res.model.to_dict(),
                        "pevfa": res.pevfa.to_dict(),
                    })
    return results


def _error_rows(results):
    return [[row, mode, seed, r.initial.train_error, r.initial.t_error,
             r.final.train_error, r.final.t_error, r.final.g_gap]
            for row, mode, seed, _, r in results]


ERROR_HEADER = ["row", "mode", "seed", "train_error_epoch0", "t_error_epoch0", "train_error", "t_error", "g_gap"]


def run_ope_train(cfg, run: Run):
    results = _train_rows(cfg, run, _load_dataset(cfg, run), write_models=True)
    run.csv("train_errors.csv", ERROR_HEADER, _error_rows(results))


def _load_models(cfg, run):
    from .lpe import LpeModel
    from .nn import DenseNet

    p = cfg.params
    for row in p.rows:
        for mode in p.modes:
            for seed in cfg.seeds:
                path = os.path.join(run.out, p.models, f"{row}-{mode}-seed{seed}.json")
                if not os.path.exists(path):
                    raise FileNotFoundError(f"no trained model at {path}; run ope-train first")
                with open(path, encoding="utf-8") as fh:
                    doc = json.load(fh)
                model = None if doc["model"] is None else LpeModel.from_dict(doc["model"])
                yield row, mode, seed, doc, model, DenseNet.from_dict(doc["pevfa"])


def run_ope_eval(cfg, run: Run):
    from .ope import MinMax, OpeSplit, SplitMode, evaluate

    ds = _load_dataset(cfg, run)
    rows = []
    for row, mode, seed, doc, model, pevfa in _load_models(cfg, run):
        split = OpeSplit(np.asarray(doc["train"]), np.asarray(doc["test"]), SplitMode(mode), doc["ratio"])
        targets = MinMax.fit(ds.returns[split.train])(ds.returns)
        err = evaluate(pevfa, model, split, ds.thetas, targets)
        rows.append([row, mode, seed, err.train_error, err.t_error, err.g_gap])
    run.csv("eval_errors.csv", ["row", "mode", "seed", "train_error", "t_error", "g_gap"], rows)


def run_ope_table(cfg, run: Run):
    p = cfg.params
    ds = _load_dataset(cfg, run)
    table, all_rows = [], []
    for mode in p.modes:
        sub = C.override(cfg, modes=[mode]).with_seeds(
            [cfg.seeds[0] + t for t in range(_trials(p, mode))])
        all_rows += _train_rows(sub, run, ds, write_models=False)
    for row in p.rows:
        line = [row]
        for mode in p.modes:
            t = np.array([r.final.t_error for rw, md, _, _, r in all_rows if rw == row and md == mode])
            g = np.array([r.final.g_gap for rw, md, _, _, r in all_rows if rw == row and md == mode])
            line += [t.mean(), t.std(), g.mean(), g.std()]
        table.append(line)
    header = ["row"]
    for mode in p.modes:
        header += [f"{mode}_t_error_mean", f"{mode}_t_error_std", f"{mode}_g_gap_mean", f"{mode}_g_gap_std"]
    run.csv("table.csv", header, table)
    run.csv("trials.csv", ERROR_HEADER, _error_rows(all_rows))


def run_ope_embed(cfg, run: Run):
    from .lpe import encode_batch

    ds = _load_dataset(cfg, run)
    for row, mode, seed, doc, model, pevfa in _load_models(cfg, run):
        emb = ds.thetas if model is None else encode_batch(model, ds.thetas)[0]
        run.csv(os.path.join("embeddings", f"{row}-{mode}-seed{seed}.csv"),
                ["index", "mean_return"] + [f"e{k}" for k in range(emb.shape[1])],
                [[k, ds.returns[k], *emb[k]] for k in range(emb.shape[0])])


RUNNERS = {
    "gridworld-metrics": run_gridworld,
    "trpo": run_trpo,
    "dges": run_dges,
    "ope-collect": run_ope_collect,
    "ope-train": run_ope_train,
    "ope-eval": run_ope_eval,
    "ope-table": run_ope_table,
    "ope-embed": run_ope_embed,
}


def execute(cfg: C.ExperimentConfig, out: str | None = None) -> dict:
    run = Run(cfg, out or cfg.output)
    RUNNERS[cfg.experiment](cfg, run)
    return run.finish()


# --- argument parsing -----------------------------------------------------------------------


def _parser():
    ap = argparse.ArgumentParser(prog="polabs", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    ap.add_argument("--version", action="version", version=f"polabs {__version__}")
    # -v is accepted before or after the subcommand
    verbose = argparse.ArgumentParser(add_help=False)
    verbose.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[verbose], help="run the experiment described by a config file")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (overrides the config)")

    def common(name, help_):
        q = sub.add_parser(name, parents=[verbose], help=help_)
        q.add_argument("--config", help="TOML config; flags override its values")
        q.add_argument("--out", help="output directory")
        q.add_argument("--seed", type=int, action="append", help="seed (repeatable)")
        return q

    common("gridworld-metrics", "exact metrics for the reference policy pairs across stochasticity levels")
    q = common("trpo", "metric-constrained policy optimization on the N-direction world")
    q.add_argument("--metric", choices=["pi", "ppi", "vpi", "none"])
    q.add_argument("--sigma", type=float)
    q.add_argument("--iterations", type=int)
    q = common("dges", "diversity-guided evolution strategy on the point task")
    q.add_argument("--metric", choices=["pi", "ppi", "vpi"])
    q.add_argument("--beta", type=float)
    q.add_argument("--generations", type=int)
    for name, help_ in [("ope-collect", "collect an offline policy dataset"),
                        ("ope-train", "train value predictors for each representation row"),
                        ("ope-eval", "evaluate trained predictors"),
                        ("ope-table", "T-error / G-gap table over trials"),
                        ("ope-embed", "dump policy embeddings as CSV")]:
        q = common(name, help_)
        if name != "ope-collect":
            q.add_argument("--row", action="append", help="representation row (repeatable)")
            q.add_argument("--mode", action="append", choices=["weak", "strong"])
            q.add_argument("--ratio", type=float)

    q = sub.add_parser("selftest", parents=[verbose], help="run the built-in invariant checks")
    q.add_argument("--out", default="selftest-out", help="directory for selftest.csv")
    return ap


def _config_from_args(args) -> C.ExperimentConfig:
    cfg = C.load(args.config) if args.config else C.apply_seed_env(C.default(args.command))
    if cfg.experiment != args.command:
        raise C.ConfigValidationError(f"config describes {cfg.experiment!r}, not {args.command!r}")
    flags = {}
    if args.command == "trpo":
        if args.metric:
            flags["metrics"] = [args.metric]
            if args.sigma is not None and args.metric != "none":
                flags["sigmas"] = {args.metric: [args.sigma]}
        elif args.sigma is not None:
            raise C.ConfigValidationError("--sigma needs --metric")
        flags["iterations"] = args.iterations
    elif args.command == "dges":
        flags["metric"] = args.metric
        flags["betas"] = None if args.beta is None else [args.beta]
        flags["generations"] = args.generations
    elif args.command.startswith("ope-") and args.command != "ope-collect":
        flags["rows"] = args.row
        flags["modes"] = args.mode
        flags["ratio"] = args.ratio
    cfg = C.override(cfg, **flags)
    if args.seed:
        cfg = cfg.with_seeds(args.seed)
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "selftest":
            from .selftest import run_selftest
            return EXIT_OK if run_selftest(args.out) else EXIT_RUNTIME
        if args.command == "run":
            cfg = C.load(args.config)
            out = args.out
        else:
            cfg = _config_from_args(args)
            out = args.out
        manifest = execute(cfg, out)
        print(json.dumps({"output": out or cfg.output, "config_hash": manifest["config_hash"]}))
        return EXIT_OK
    except C.ConfigParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except C.ConfigValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
