"""Run orchestration: round loop, regret and cost accounting, replication."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import __version__
from .baseline import FederatedHoeffding, HoeffdingLearner
from .fedq import FederatedRun, ServerState, theorem_round_bound
from .mdp import TabularMdp, agent_streams, generate_random_mdp
from .oracle import OracleTables, evaluate_policy
from .schedule import BonusConstants, iota_theory
from .single import QEarlySettledLowCost, switching_bound

log = logging.getLogger(__name__)

ALGORITHMS = ("fedq_eslc", "single_eslc", "hoeffding_baseline")


@dataclass(frozen=True)
class RunConfig:
    H: int = 5
    S: int = 3
    A: int = 2
    M: int = 1
    T0: int = 5000
    seed: int = 0
    mdp_seed: int | None = None
    constants: BonusConstants = field(default_factory=BonusConstants)
    iota_mode: str = "fixed"
    iota: float = 1.0
    p: float = 0.05
    algorithm: str = "fedq_eslc"
    initial_state: int | None = None

    def __post_init__(self):
        if min(self.H, self.S, self.A, self.M) < 1:
            raise ValueError("H, S, A and M must be positive")
        if self.T0 < self.H:
            raise ValueError("T0 must be at least H")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.algorithm == "single_eslc" and self.M != 1:
            raise ValueError("single_eslc requires M = 1")
        if self.iota_mode == "fixed":
            if self.iota <= 0:
                raise ValueError("fixed iota must be positive")
        elif self.iota_mode == "theory":
            if not 0.0 < self.p < 1.0:
                raise ValueError("p must lie in (0, 1)")
        else:
            raise ValueError(f"iota_mode must be 'fixed' or 'theory', got {self.iota_mode!r}")
        if self.initial_state is not None and not 0 <= self.initial_state < self.S:
            raise ValueError("initial_state out of range")
        self.constants.validate(self.H)

    @classmethod
    def from_episodes(cls, episodes: int, **kw) -> "RunConfig":
        """Config whose step budget is ``episodes`` per agent."""
        H, M = kw.get("H", cls.H), kw.get("M", cls.M)
        return cls(T0=episodes * H * M, **kw)

    @property
    def mdp_key(self) -> int:
        return self.seed if self.mdp_seed is None else self.mdp_seed

    def resolved_iota(self) -> float:
        if self.iota_mode == "fixed":
            return self.iota
        T1 = 2 * self.T0 + self.M * self.H * self.S * self.A
        return iota_theory(self.S, self.A, T1, self.p)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        if isinstance(doc.get("constants"), dict):
            doc["constants"] = BonusConstants(**doc["constants"])
        return cls(**doc)

    def replace(self, **changes) -> "RunConfig":
        doc = self.to_dict()
        doc["constants"] = self.constants
        doc.update(changes)
        return RunConfig(**doc)


CSV_COLUMNS = (
    "round", "episodes_per_agent", "cumulative_episodes", "regret", "cumulative_regret",
    "policy_changed", "cumulative_switches", "cumulative_scalars",
)


@dataclass
class RunMetrics:
    """Per-round series plus run summary.

    ``cumulative_episodes`` counts episodes over all agents; the per-agent
    count is ``cumulative_episodes / M``.
    """

    config: RunConfig
    rounds: list[int] = field(default_factory=list)
    episodes_per_agent: list[int] = field(default_factory=list)
    cumulative_episodes: list[int] = field(default_factory=list)
    regret: list[float] = field(default_factory=list)
    cumulative_regret: list[float] = field(default_factory=list)
    policy_changed: list[bool] = field(default_factory=list)
    cumulative_switches: list[int] = field(default_factory=list)
    cumulative_scalars: list[int] = field(default_factory=list)
    anomalies: list[str] = field(default_factory=list)

    def record(self, episodes: int, regret: float, changed: bool, scalars: int) -> None:
        M = self.config.M
        prev_eps = self.cumulative_episodes[-1] if self.cumulative_episodes else 0
        prev_reg = self.cumulative_regret[-1] if self.cumulative_regret else 0.0
        prev_sw = self.cumulative_switches[-1] if self.cumulative_switches else 0
        self.rounds.append(len(self.rounds) + 1)
        self.episodes_per_agent.append(episodes)
        self.cumulative_episodes.append(prev_eps + episodes * M)
        self.regret.append(regret)
        self.cumulative_regret.append(prev_reg + regret)
        self.policy_changed.append(changed)
        self.cumulative_switches.append(prev_sw + int(changed))
        self.cumulative_scalars.append(scalars)

    @property
    def K(self) -> int:
        return len(self.rounds)

    @property
    def total_episodes(self) -> int:
        return self.cumulative_episodes[-1] if self.cumulative_episodes else 0

    @property
    def T(self) -> float:
        return self.config.H * self.total_episodes / self.config.M

    @property
    def final_regret(self) -> float:
        return self.cumulative_regret[-1] if self.cumulative_regret else 0.0

    @property
    def switching_cost(self) -> int:
        return self.cumulative_switches[-1] if self.cumulative_switches else 0

    @property
    def communication(self) -> int:
        return self.cumulative_scalars[-1] if self.cumulative_scalars else 0

    def summary(self) -> dict:
        return {
            "K": self.K,
            "T": self.T,
            "episodes_per_agent": self.total_episodes // self.config.M,
            "regret": self.final_regret,
            "switching_cost": self.switching_cost,
            "communication_scalars": self.communication,
            "anomalies": len(self.anomalies),
            "switching_convention": "one switch per round boundary where the deployed policy changes",
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# config: {json.dumps(self.config.to_dict(), sort_keys=True)}\n")
        buf.write(f"# version: {__version__}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("algorithm",) + CSV_COLUMNS)
        for row in zip(
            self.rounds, self.episodes_per_agent, self.cumulative_episodes, self.regret,
            self.cumulative_regret, self.policy_changed, self.cumulative_switches,
            self.cumulative_scalars,
        ):
            writer.writerow((self.config.algorithm,) + tuple(
                repr(x) if isinstance(x, float) else int(x) for x in row
            ))
        return buf.getvalue()


@dataclass
class RoundEvent:
    """Passed to ``observer`` after each round of an early-settled learner."""

    k: int
    before: ServerState
    after: ServerState
    episodes_per_agent: int
    exploration: object = None


class _RegretMeter:
    """Per-episode regret of a policy, cached while the policy is unchanged."""

    def __init__(self, mdp: TabularMdp, oracle: OracleTables):
        self.mdp = mdp
        self.v_star = oracle.Vstar[0]
        self._key = None
        self._gap = None

    def gaps(self, policy: np.ndarray) -> np.ndarray:
        key = policy.tobytes()
        if key != self._key:
            self._key = key
            self._gap = self.v_star - evaluate_policy(self.mdp, policy)[0]
        return self._gap


def build_mdp(config: RunConfig) -> TabularMdp:
    return generate_random_mdp(config.H, config.S, config.A, config.mdp_key)


def run(
    config: RunConfig,
    mdp: TabularMdp | None = None,
    oracle: OracleTables | None = None,
    observer: Callable[[RoundEvent], None] | None = None,
    initial_q: np.ndarray | None = None,
    tie_break: str = "lowest",
) -> RunMetrics:
    """Execute one run until the pooled step count reaches ``config.T0``.

    ``initial_q`` and ``tie_break`` are test hooks for the early-settled
    learners: the first seeds the estimate tables, the second perturbs the
    single-agent tie rule.
    """
    if mdp is None:
        mdp = build_mdp(config)
    if (mdp.H, mdp.S, mdp.A) != (config.H, config.S, config.A):
        raise ValueError("MDP dimensions do not match the config")
    if oracle is None:
        oracle = OracleTables.compute(mdp)
    metrics = RunMetrics(config)
    meter = _RegretMeter(mdp, oracle)
    iota = config.resolved_iota()
    rngs = agent_streams(config.seed, config.M)
    H = config.H

    if config.algorithm == "hoeffding_baseline":
        _run_hoeffding(config, mdp, meter, metrics, iota, rngs)
        return metrics

    if config.algorithm == "fedq_eslc":
        driver = FederatedRun(mdp, config.M, config.constants, iota, rngs, config.initial_state)
        state = lambda: driver.server  # noqa: E731
    else:
        driver = QEarlySettledLowCost(
            mdp, config.constants, iota, rngs[0], config.initial_state, tie_break=tie_break
        )
        state = lambda: driver.state  # noqa: E731
    state().seed = config.seed
    if initial_q is not None:
        st = state()
        st.Q[...] = initial_q
        st.V = st.Q.max(axis=-1)
        st.policy = np.argmax(st.Q, axis=-1)

    steps = 0
    previous_policy = None
    while steps < config.T0:
        st = state()
        policy = st.policy.copy()
        before = st.copy() if observer is not None else None
        if config.algorithm == "fedq_eslc":
            result = driver.step()
            episodes = result.episodes_per_agent
            starts = result.initial_counts.sum(axis=0)
            scalars = driver.ledger.total
        else:
            result = None
            episodes, starts = driver.run_round()
            scalars = 0
        regret = float(starts @ meter.gaps(policy))
        changed = previous_policy is not None and not np.array_equal(policy, previous_policy)
        metrics.record(episodes, regret, changed, scalars)
        previous_policy = policy
        steps += H * episodes * config.M
        after = state()
        _check_ranges(after, H, metrics)
        if observer is not None:
            observer(RoundEvent(before.k, before, after, episodes, result))
    return metrics


def _check_ranges(st: ServerState, H: int, metrics: RunMetrics) -> None:
    if np.any(st.V_L > st.V):
        msg = f"round {st.k - 1}: V_L exceeds V at {np.argwhere(st.V_L > st.V).tolist()}"
        log.warning(msg)
        metrics.anomalies.append(msg)
    if np.any(st.V_L < 0) or np.any(st.V > H):
        msg = f"round {st.k - 1}: value estimates outside [0, H]"
        log.warning(msg)
        metrics.anomalies.append(msg)


def _run_hoeffding(config, mdp, meter, metrics, iota, rngs) -> None:
    c_b = config.constants.c_b
    H = config.H
    steps = 0
    previous_policy = None
    if config.M == 1:
        learner = HoeffdingLearner(mdp, c_b, iota, rngs[0], config.initial_state)
        while steps < config.T0:
            policy = learner.policy
            s1 = learner.run_episode()
            changed = previous_policy is not None and not np.array_equal(policy, previous_policy)
            metrics.record(1, float(meter.gaps(policy)[s1]), changed, 0)
            previous_policy = policy
            steps += H
        return
    learner = FederatedHoeffding(mdp, config.M, c_b, iota, rngs, config.initial_state)
    while steps < config.T0:
        policy = learner.state.policy.copy()
        result = learner.run_round()
        starts = result.initial_counts.sum(axis=0)
        changed = previous_policy is not None and not np.array_equal(policy, previous_policy)
        metrics.record(result.episodes_per_agent, float(starts @ meter.gaps(policy)), changed,
                       learner.ledger.total)
        previous_policy = policy
        steps += H * result.episodes_per_agent * config.M


# -- bounds --------------------------------------------------------------


def theorem_bound_check(metrics: RunMetrics, config: RunConfig | None = None) -> dict:
    """Deterministic round and switching bounds for the early-settled learners."""
    config = config or metrics.config
    H, S, A, M = config.H, config.S, config.A, config.M
    C = H * H * (H + 1) * S * A
    T = metrics.T
    report = {
        "C_tilde": C,
        "T": T,
        "K": metrics.K,
        "round_bound": theorem_round_bound(T, H, S, A, M),
        "switching_cost": metrics.switching_cost,
        "applicable": config.algorithm in ("fedq_eslc", "single_eslc"),
    }
    report["rounds_ok"] = metrics.K <= report["round_bound"]
    if M == 1:
        report["switching_bound"] = switching_bound(T, H, S, A)
        report["switching_ok"] = metrics.switching_cost <= report["switching_bound"]
    else:
        report["switching_bound"] = None
        report["switching_ok"] = True
    report["ok"] = (not report["applicable"]) or (report["rounds_ok"] and report["switching_ok"])
    return report


# -- replication ---------------------------------------------------------


@dataclass
class Ensemble:
    config: RunConfig
    seeds: list[int]
    episodes: np.ndarray  # per-agent episode grid
    regret_paths: np.ndarray  # (n, len(grid))
    rounds_paths: np.ndarray  # (n, len(grid))
    switch_paths: np.ndarray  # (n, len(grid))
    summaries: list[dict]
    bound_checks: list[dict]

    @property
    def regret_over_log(self) -> np.ndarray:
        return self.regret_paths / np.log(self.episodes + 1.0)

    def bands(self, series: np.ndarray) -> dict[str, np.ndarray]:
        p10, p50, p90 = np.percentile(series, [10, 50, 90], axis=0)
        return {"p10": p10, "p50": p50, "p90": p90}

    def figure_rows(self, series: np.ndarray | None = None) -> list[tuple]:
        """Rows of (episodes, mean, p10, p50, p90); defaults to regret over log."""
        series = self.regret_over_log if series is None else series
        b = self.bands(series)
        mean = series.mean(axis=0)
        return [
            (int(e), float(mu), float(lo), float(m), float(hi))
            for e, mu, lo, m, hi in zip(self.episodes, mean, b["p10"], b["p50"], b["p90"])
        ]

    def to_dict(self) -> dict:
        reg = self.bands(self.regret_paths)
        rol = self.bands(self.regret_over_log)
        return {
            "version": __version__,
            "config": self.config.to_dict(),
            "seeds": self.seeds,
            "episodes": self.episodes.tolist(),
            "cumulative_regret": {k: v.tolist() for k, v in reg.items()},
            "regret_over_log": {k: v.tolist() for k, v in rol.items()},
            "rounds": {k: v.tolist() for k, v in self.bands(self.rounds_paths).items()},
            "switching_cost": {k: v.tolist() for k, v in self.bands(self.switch_paths).items()},
            "summaries": self.summaries,
            "bound_checks": self.bound_checks,
        }


def _path(metrics: RunMetrics, grid: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    per_agent = np.array([0] + metrics.cumulative_episodes, dtype=float) / metrics.config.M
    regret = np.array([0.0] + metrics.cumulative_regret)
    rounds = np.arange(len(per_agent), dtype=float)
    switches = np.array([0] + metrics.cumulative_switches, dtype=float)
    # Step interpolation for counters: value reached by the last completed round.
    idx = np.searchsorted(per_agent, grid, side="right") - 1
    return np.interp(grid, per_agent, regret), rounds[idx], switches[idx]


def _run_one(config: RunConfig) -> RunMetrics:
    return run(config)


def replication_seeds(config: RunConfig, n: int) -> list[int]:
    """Learning seeds ``seed, seed+1, ...``; the MDP stays fixed at ``config.mdp_key``."""
    return [config.seed + r for r in range(n)]


def replicate(
    config: RunConfig,
    n_replications: int,
    seeds: list[int] | None = None,
    workers: int = 1,
    grid_points: int = 200,
    keep_metrics: list | None = None,
) -> Ensemble:
    if n_replications < 1:
        raise ValueError("need at least one replication")
    seeds = list(seeds) if seeds is not None else replication_seeds(config, n_replications)
    if len(seeds) != n_replications:
        raise ValueError("seed list length must equal n_replications")
    configs = [config.replace(seed=s, mdp_seed=config.mdp_key) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, configs))
    else:
        results = [_run_one(c) for c in configs]
    if keep_metrics is not None:
        keep_metrics.extend(results)
    return ensemble_from_metrics(configs[0], seeds, results, grid_points)


def ensemble_from_metrics(
    config: RunConfig, seeds: list[int], results: list[RunMetrics], grid_points: int = 200
) -> Ensemble:
    """Interpolate every run onto a shared per-agent episode grid."""
    if not results:
        raise ValueError("no runs to aggregate")
    horizon = min(m.total_episodes // config.M for m in results)
    grid = np.unique(np.linspace(1, horizon, min(grid_points, horizon)).round().astype(np.int64))
    paths = [_path(m, grid.astype(float)) for m in results]
    return Ensemble(
        config=config,
        seeds=list(seeds),
        episodes=grid,
        regret_paths=np.array([p[0] for p in paths]),
        rounds_paths=np.array([p[1] for p in paths]),
        switch_paths=np.array([p[2] for p in paths]),
        summaries=[m.summary() for m in results],
        bound_checks=[theorem_bound_check(m) for m in results],
    )


def quarter_slopes(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Slopes of ``y`` over the first and last quarters of ``x``'s span (``y(0) = 0``)."""
    x = np.concatenate([[0.0], np.asarray(x, dtype=float)])
    y = np.concatenate([[0.0], np.asarray(y, dtype=float)])
    end = x[-1]
    q1, q3 = end / 4, 3 * end / 4
    first = (np.interp(q1, x, y) - y[0]) / q1
    last = (y[-1] - np.interp(q3, x, y)) / (end - q3)
    return float(first), float(last)


def regret_over_log_final(metrics: RunMetrics) -> float:
    e = metrics.total_episodes / metrics.config.M
    return metrics.final_regret / math.log(e + 1.0)
