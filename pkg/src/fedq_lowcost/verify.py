"""Property suite behind ``fedq-lowcost verify``.

Each check returns a :class:`CheckResult`; the CLI prints one line per
check and exits nonzero if any fails.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import schedule
from .harness import RoundEvent, RunConfig, run, theorem_bound_check
from .mdp import TabularMdp, generate_random_mdp
from .oracle import OracleTables, evaluate_policy, max_conditional_variance, optimal_values


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def check_weight_normalization(t_max: int = 1000, horizons=(1, 2, 5, 7)) -> CheckResult:
    worst = 0.0
    for H in horizons:
        for t in range(1, t_max + 1):
            total = float(np.sum(schedule.window_weights(0, t, H)))
            worst = max(worst, abs(total - 1.0))
    return CheckResult("weight normalization", worst < 1e-12, f"max |sum - 1| = {worst:.2e}")


def check_telescoping(n_windows: int = 1000, n_max: int = 10_000, seed: int = 0,
                      horizons=(1, 2, 5, 7)) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_windows):
        H = int(rng.choice(horizons))
        hi = int(rng.integers(1, n_max + 1))
        lo = int(rng.integers(0, hi))
        w = schedule.RateWindow(H, lo, hi, 1.0)
        worst = max(worst, abs(schedule.alpha_rate(w) - float(np.sum(schedule.window_weights(lo, hi, H)))))
    return CheckResult("alpha-rate telescoping", worst < 1e-12, f"max deviation = {worst:.2e}")


def enumerate_policies(mdp: TabularMdp):
    for flat in itertools.product(range(mdp.A), repeat=mdp.H * mdp.S):
        yield np.array(flat, dtype=np.int64).reshape(mdp.H, mdp.S)


def check_oracle_enumeration(n_mdps: int = 10, seed0: int = 0) -> CheckResult:
    worst = 0.0
    var_dev = 0.0
    for seed in range(seed0, seed0 + n_mdps):
        mdp = generate_random_mdp(2, 2, 2, seed)
        Vstar, Qstar = optimal_values(mdp)
        best = np.max([evaluate_policy(mdp, p) for p in enumerate_policies(mdp)], axis=0)
        worst = max(worst, float(np.max(np.abs(best - Vstar))))
        var = max(
            float(mdp.transitions[h, s, a] @ Vstar[h + 1] ** 2 - (mdp.transitions[h, s, a] @ Vstar[h + 1]) ** 2)
            for h in range(2) for s in range(2) for a in range(2)
        )
        var_dev = max(var_dev, abs(max(var, 0.0) - max_conditional_variance(mdp, Vstar)))
    ok = worst < 1e-10 and var_dev < 1e-12
    return CheckResult("oracle vs policy enumeration", ok,
                       f"max |V* - max_pi V^pi| = {worst:.2e}, variance deviation = {var_dev:.2e}")


class InvariantMonitor:
    """Observer that records violations of the per-round structural invariants."""

    def __init__(self, M: int):
        self.M = M
        self.violations: list[str] = []
        self.rounds = 0

    def __call__(self, ev: RoundEvent) -> None:
        b, a = ev.before, ev.after
        k = ev.k
        self.rounds += 1
        if np.any(a.Q > b.Q):
            self.violations.append(f"round {k}: Q increased")
        if np.any(a.V_L < b.V_L):
            self.violations.append(f"round {k}: V_L decreased")
        if np.any(a.V - a.V_L > b.V - b.V_L):
            self.violations.append(f"round {k}: V - V_L increased")
        settled = ~b.u_R
        if np.any(a.V_R[settled] != b.V_R[settled]) or np.any(a.u_R & settled):
            self.violations.append(f"round {k}: settled reference changed")
        if ev.exploration is not None:
            H, S = b.policy.shape
            on_policy = b.N[np.arange(H)[:, None], np.arange(S)[None, :], b.policy]
            caps = np.maximum(1, on_policy // (self.M * H * (H + 1)))
            counts = np.stack([r.n for r in ev.exploration.reports])
            if np.any(counts > caps):
                self.violations.append(f"round {k}: visit cap exceeded")
            if not np.any(counts == caps):
                self.violations.append(f"round {k}: no visit count reached its cap")


def check_invariants(configs: list[RunConfig]) -> CheckResult:
    problems = []
    rounds = 0
    for cfg in configs:
        mon = InvariantMonitor(cfg.M)
        run(cfg, observer=mon)
        rounds += mon.rounds
        problems += [f"{cfg.H},{cfg.S},{cfg.A},M={cfg.M},seed={cfg.seed}: {v}" for v in mon.violations]
    detail = f"{rounds} rounds checked" if not problems else problems[0]
    return CheckResult("structural invariants", not problems, detail)


def reduction_mismatch(cfg: RunConfig, tie_break: str = "lowest") -> int | None:
    """First round at which the federated (M=1) and single-agent checkpoints differ."""
    fed, single = [], []
    mdp = generate_random_mdp(cfg.H, cfg.S, cfg.A, cfg.mdp_key)
    oracle = OracleTables.compute(mdp)
    run(cfg.replace(algorithm="fedq_eslc", M=1), mdp, oracle,
        observer=lambda ev: fed.append(ev.after.checkpoint()))
    run(cfg.replace(algorithm="single_eslc", M=1), mdp, oracle,
        observer=lambda ev: single.append(ev.after.checkpoint()), tie_break=tie_break)
    for i, (x, y) in enumerate(zip(fed, single)):
        if x != y:
            return i + 1
    if len(fed) != len(single):
        return min(len(fed), len(single)) + 1
    return None


def check_reduction(seeds=range(5), episodes: int = 1000, tie_break: str = "lowest",
                    H: int = 5, S: int = 3, A: int = 2) -> CheckResult:
    bad = []
    for seed in seeds:
        cfg = RunConfig.from_episodes(episodes, H=H, S=S, A=A, M=1, seed=seed)
        where = reduction_mismatch(cfg, tie_break)
        if where is not None:
            bad.append(f"seed {seed} diverges at round {where}")
    return CheckResult("M=1 reduction", not bad, "bit-identical checkpoints" if not bad else bad[0])


def check_communication(cfg: RunConfig) -> CheckResult:
    m = run(cfg)
    per_round = 13 * cfg.M * cfg.H * cfg.S + cfg.M + 1
    diffs = np.diff([0] + m.cumulative_scalars)
    ok = bool(np.all(diffs == per_round)) and m.communication == m.K * per_round
    return CheckResult("communication accounting", ok, f"{m.K} rounds x {per_round} scalars = {m.communication}")


def check_bounds(configs: list[RunConfig]) -> CheckResult:
    bad = []
    for cfg in configs:
        rep = theorem_bound_check(run(cfg))
        if not rep["ok"]:
            bad.append(f"{cfg}: K={rep['K']} bound={rep['round_bound']}")
    return CheckResult("round / switching bounds", not bad, f"{len(configs)} runs" if not bad else bad[0])


def default_suite(tie_break: str = "lowest", quick: bool = False) -> list[CheckResult]:
    seeds = range(3) if quick else range(5)
    episodes = 2000 if quick else 5000
    inv_configs = [
        RunConfig.from_episodes(episodes, H=H, S=S, A=A, M=M, seed=s)
        for (H, S, A, M) in [(3, 2, 2, 1), (3, 2, 2, 4), (5, 3, 2, 10)]
        for s in seeds
    ]
    return [
        check_weight_normalization(),
        check_telescoping(),
        check_oracle_enumeration(),
        check_invariants(inv_configs),
        check_reduction(seeds=seeds, tie_break=tie_break),
        check_communication(RunConfig.from_episodes(500, H=5, S=3, A=2, M=10, seed=0)),
        check_bounds(inv_configs[:: len(seeds)]),
    ]

