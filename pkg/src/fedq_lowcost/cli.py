"""Command-line entry point: ``fedq-lowcost {gen-mdp,run,verify}``.

Exit codes: 0 success, 1 property or bound failure, 2 configuration error.
The worker count for ``run`` defaults to ``$FEDQ_WORKERS`` (else 1).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .harness import (
    ALGORITHMS,
    RunConfig,
    RunMetrics,
    ensemble_from_metrics,
    replication_seeds,
    run,
    theorem_bound_check,
)
from .mdp import TabularMdp, generate_random_mdp
from .oracle import OracleTables
from .verify import (
    check_bounds,
    check_invariants,
    check_reduction,
    default_suite,
)

log = logging.getLogger("fedq_lowcost")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2
WORKERS_ENV = "FEDQ_WORKERS"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentFile:
    """A run configuration plus replication count, algorithms and output location.

    JSON layout::

        {"config": {...RunConfig fields...}, "episodes": 100000,
         "n_replications": 10, "algorithms": ["fedq_eslc"],
         "output_dir": "runs/small", "mdp_path": null}

    ``episodes`` (per agent) overrides ``config.T0`` when given.  Relative
    paths resolve against the experiment file's directory.
    """

    config: RunConfig
    n_replications: int = 10
    algorithms: list[str] = field(default_factory=lambda: ["fedq_eslc"])
    output_dir: Path = Path("runs")
    mdp_path: Path | None = None

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentFile":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read experiment file {path}: {exc}") from exc
        return cls.from_dict(doc, base=path.parent)

    @classmethod
    def from_dict(cls, doc: dict, base: Path = Path(".")) -> "ExperimentFile":
        known = {"config", "episodes", "n_replications", "algorithms", "output_dir", "mdp_path", "name"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        cfg_doc = dict(doc.get("config", {}))
        if "episodes" in doc:
            H = cfg_doc.get("H", RunConfig.H)
            M = cfg_doc.get("M", RunConfig.M)
            cfg_doc["T0"] = int(doc["episodes"]) * H * M
        try:
            config = RunConfig.from_dict(cfg_doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        algorithms = list(doc.get("algorithms", ["fedq_eslc"]))
        for alg in algorithms:
            if alg not in ALGORITHMS:
                raise ConfigError(f"unknown algorithm {alg!r}; choose from {ALGORITHMS}")
        if "single_eslc" in algorithms and config.M != 1:
            raise ConfigError("single_eslc requires M = 1")
        n = int(doc.get("n_replications", 10))
        if n < 1:
            raise ConfigError("n_replications must be positive")
        out = base / doc.get("output_dir", "runs")
        mdp_path = base / doc["mdp_path"] if doc.get("mdp_path") else None
        return cls(config, n, algorithms, out, mdp_path)

    def resolved_algorithm(self, alg: str) -> str:
        # A single agent runs the single-agent specialization.
        if alg == "fedq_eslc" and self.config.M == 1:
            return "single_eslc"
        return alg

    def load_mdp(self) -> TabularMdp:
        if self.mdp_path is None:
            return generate_random_mdp(self.config.H, self.config.S, self.config.A, self.config.mdp_key)
        try:
            mdp = TabularMdp.load(self.mdp_path)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load MDP {self.mdp_path}: {exc}") from exc
        if (mdp.H, mdp.S, mdp.A) != (self.config.H, self.config.S, self.config.A):
            raise ConfigError(
                f"MDP file has (H,S,A)={(mdp.H, mdp.S, mdp.A)}, config has "
                f"{(self.config.H, self.config.S, self.config.A)}"
            )
        return mdp


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _series_csv(config: RunConfig, header: tuple, rows: list[tuple]) -> str:
    buf = io.StringIO()
    buf.write(f"# config: {json.dumps(config.to_dict(), sort_keys=True)}\n")
    buf.write(f"# version: {__version__}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(x) if isinstance(x, float) else x for x in row])
    return buf.getvalue()


def workers_from_env(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw == "":
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be positive")
    return n


# -- gen-mdp ---------------------------------------------------------------


def cmd_gen_mdp(args) -> int:
    if min(args.H, args.S, args.A) < 1:
        raise ConfigError("H, S and A must be positive")
    mdp = generate_random_mdp(args.H, args.S, args.A, args.seed)
    oracle = OracleTables.compute(mdp)
    out = Path(args.out)
    oracle_path = out.with_name(out.stem + ".oracle.json")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        mdp.save(out)
        oracle_path.write_text(json.dumps(oracle.to_dict(mdp.content_hash())))
    except OSError as exc:
        print(f"error: cannot write {out}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    summary = oracle.summary()
    summary["mdp_hash"] = mdp.content_hash()
    print(_dump_json(summary), end="")
    if oracle.degenerate:
        print("warning: every action is optimal everywhere; gap-dependent metrics are undefined",
              file=sys.stderr)
    return EXIT_OK


# -- run -------------------------------------------------------------------


def _run_task(task: tuple[RunConfig, dict, dict]) -> RunMetrics:
    config, mdp_doc, oracle_doc = task
    return run(config, TabularMdp.from_dict(mdp_doc), OracleTables.from_dict(oracle_doc))


def cmd_run(args) -> int:
    exp = ExperimentFile.load(args.experiment)
    if args.output_dir:
        exp.output_dir = Path(args.output_dir)
    workers = args.workers if args.workers is not None else workers_from_env()
    mdp = exp.load_mdp()
    oracle = OracleTables.compute(mdp)
    out = exp.output_dir
    _write(out / "mdp.json", mdp.to_json() + "\n")
    _write(out / "oracle.json", _dump_json(oracle.to_dict(mdp.content_hash())))

    seeds = replication_seeds(exp.config, exp.n_replications)
    bound_report: dict[str, list] = {}
    failed = False
    for requested in exp.algorithms:
        alg = exp.resolved_algorithm(requested)
        base = exp.config.replace(algorithm=alg, mdp_seed=exp.config.mdp_key)
        configs = [base.replace(seed=s) for s in seeds]
        tasks = [(c, mdp.to_dict(), oracle.to_dict()) for c in configs]
        results: list[RunMetrics] = []
        ok_seeds: list[int] = []
        checks = bound_report.setdefault(alg, [])
        pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
        try:
            futures = [pool.submit(_run_task, task) for task in tasks] if pool else None
            for i, cfg in enumerate(configs):
                try:
                    metrics = futures[i].result() if pool else _run_task(tasks[i])
                except Exception as exc:  # one failed replication does not sink the rest
                    log.error("%s seed %d failed: %s", alg, cfg.seed, exc)
                    failed = True
                    continue
                _write(out / alg / f"seed-{cfg.seed}.csv", metrics.to_csv())
                check = theorem_bound_check(metrics)
                check["seed"] = cfg.seed
                checks.append(check)
                if not check["ok"]:
                    _write(out / "bounds.json", _dump_json(bound_report))
                    print(f"bound violation: {alg} seed {cfg.seed}: K={check['K']} "
                          f"round bound={check['round_bound']}", file=sys.stderr)
                    return EXIT_FAILURE
                results.append(metrics)
                ok_seeds.append(cfg.seed)
                print(f"{alg} seed {cfg.seed}: K={metrics.K} regret={metrics.final_regret:.3f} "
                      f"switches={metrics.switching_cost}")
        finally:
            if pool is not None:
                pool.shutdown(cancel_futures=True)
        if not results:
            continue
        ens = ensemble_from_metrics(base.replace(seed=ok_seeds[0]), ok_seeds, results)
        _write(out / alg / "ensemble.json", _dump_json(ens.to_dict()))
        header = ("episodes", "regret_over_log", "p10", "p50", "p90")
        _write(out / alg / "figure.csv", _series_csv(base, header, ens.figure_rows()))
        _write(out / alg / "rounds.csv", _series_csv(base, header[:1] + ("rounds",) + header[2:],
                                                     ens.figure_rows(ens.rounds_paths)))
        if base.M == 1:
            _write(out / alg / "switching.csv",
                   _series_csv(base, header[:1] + ("switching_cost",) + header[2:],
                               ens.figure_rows(ens.switch_paths)))
    _write(out / "bounds.json", _dump_json(bound_report))
    return EXIT_FAILURE if failed else EXIT_OK


# -- verify ----------------------------------------------------------------


def cmd_verify(args) -> int:
    tie_break = "highest" if args.mutate_tie_break else "lowest"
    results = default_suite(tie_break=tie_break, quick=args.quick)
    if args.experiment:
        exp = ExperimentFile.load(args.experiment)
        cfg = exp.config
        episodes = min(cfg.T0 // (cfg.H * cfg.M), args.max_episodes)
        small = [
            RunConfig.from_episodes(
                episodes, H=cfg.H, S=cfg.S, A=cfg.A, M=cfg.M, seed=s, mdp_seed=cfg.mdp_key,
                constants=cfg.constants, iota_mode=cfg.iota_mode, iota=cfg.iota, p=cfg.p,
            )
            for s in replication_seeds(cfg, min(exp.n_replications, 3))
        ]
        exp_checks = [check_invariants(small), check_bounds(small)]
        exp_checks.append(check_reduction(seeds=[c.seed for c in small], episodes=min(episodes, 1000),
                                          tie_break=tie_break, H=cfg.H, S=cfg.S, A=cfg.A))
        for c in exp_checks:
            c.name += " (experiment)"
        results += exp_checks
    for r in results:
        print(r.line())
    failures = sum(not r.passed for r in results)
    print(f"{len(results) - failures}/{len(results)} properties passed")
    return EXIT_FAILURE if failures else EXIT_OK


# -- entry -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedq-lowcost",
        description="Federated early-settled Q-learning simulator.",
        epilog=f"Exit codes: 0 success, 1 property/bound failure, 2 configuration error. "
               f"${WORKERS_ENV} sets the default worker count for 'run'.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-mdp", help="generate a random MDP and cache its oracle tables")
    g.add_argument("--H", type=int, required=True, help="horizon")
    g.add_argument("--S", type=int, required=True, help="number of states")
    g.add_argument("--A", type=int, required=True, help="number of actions")
    g.add_argument("--seed", type=int, default=0, help="MDP seed (default 0)")
    g.add_argument("--out", required=True, help="output JSON path; oracle goes to <stem>.oracle.json")
    g.set_defaults(func=cmd_gen_mdp)

    r = sub.add_parser("run", help="run an experiment file")
    r.add_argument("experiment", help="experiment JSON file")
    r.add_argument("--workers", type=int, default=None,
                   help=f"parallel replications (default ${WORKERS_ENV} or 1)")
    r.add_argument("--output-dir", default=None, help="override the file's output_dir")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="run the property suite")
    v.add_argument("experiment", nargs="?", default=None,
                   help="optional experiment file whose setting is checked as well")
    v.add_argument("--quick", action="store_true", help="fewer seeds and shorter runs")
    v.add_argument("--max-episodes", type=int, default=5000,
                   help="episode cap per agent for experiment checks (default 5000)")
    v.add_argument("--mutate-tie-break", action="store_true",
                   help="test hook: perturb the single-agent tie rule (reduction check should fail)")
    v.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
