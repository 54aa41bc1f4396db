import csv
import io
import itertools
import json
import math

import numpy as np
import pytest

from fedq_lowcost.harness import (
    CSV_COLUMNS,
    RunConfig,
    build_mdp,
    quarter_slopes,
    replicate,
    run,
    theorem_bound_check,
)
from fedq_lowcost.oracle import OracleTables
from fedq_lowcost.schedule import BonusConstants


class TestRunConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            dict(T0=2, H=3),
            dict(M=0),
            dict(iota_mode="fixed", iota=0.0),
            dict(iota_mode="theory", p=1.0),
            dict(iota_mode="other"),
            dict(algorithm="nope"),
            dict(algorithm="single_eslc", M=2),
            dict(initial_state=3, S=3),
            dict(constants=BonusConstants(beta=10.0), H=5),
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            RunConfig(**kw)

    def test_from_episodes(self):
        cfg = RunConfig.from_episodes(100, H=4, M=3)
        assert cfg.T0 == 1200

    def test_dict_round_trip(self):
        cfg = RunConfig(H=3, S=2, A=2, M=2, T0=99, seed=4, mdp_seed=8, constants=BonusConstants(beta=0.1))
        back = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back == cfg

    def test_theory_iota(self):
        cfg = RunConfig(H=3, S=2, A=2, M=1, T0=30000, iota_mode="theory", p=0.05)
        T1 = 2 * 30000 + 1 * 3 * 2 * 2
        assert cfg.resolved_iota() == pytest.approx(math.log(28 * 2 * 2 * T1 / 0.05), rel=1e-15)
        assert RunConfig().resolved_iota() == 1.0

    def test_mdp_key(self):
        assert RunConfig(seed=3).mdp_key == 3
        assert RunConfig(seed=3, mdp_seed=9).mdp_key == 9


class TestRun:
    @pytest.mark.parametrize("alg,M", [("fedq_eslc", 1), ("fedq_eslc", 3), ("single_eslc", 1)])
    def test_optimal_start_gives_zero_regret(self, alg, M):
        for seed in range(2):
            cfg = RunConfig.from_episodes(3000, H=5, S=3, A=2, M=M, seed=seed, algorithm=alg)
            mdp = build_mdp(cfg)
            oracle = OracleTables.compute(mdp)
            m = run(cfg, mdp, oracle, initial_q=oracle.Qstar)
            assert m.final_regret == 0.0

    @pytest.mark.parametrize("alg,M", [("fedq_eslc", 1), ("fedq_eslc", 4), ("single_eslc", 1),
                                       ("hoeffding_baseline", 1), ("hoeffding_baseline", 4)])
    def test_accounting(self, alg, M):
        cfg = RunConfig.from_episodes(800, H=4, S=3, A=2, M=M, seed=2, algorithm=alg)
        m = run(cfg)
        assert m.cumulative_regret == list(itertools.accumulate(m.regret))
        assert m.cumulative_switches == list(itertools.accumulate(int(c) for c in m.policy_changed))
        assert m.cumulative_episodes == list(itertools.accumulate(e * M for e in m.episodes_per_agent))
        assert min(m.regret) >= -1e-10
        assert m.total_episodes * cfg.H == M * m.T
        steps = [e * cfg.H for e in m.cumulative_episodes]
        assert steps[-1] >= cfg.T0
        assert len(steps) == 1 or steps[-2] < cfg.T0
        assert not m.policy_changed[0]
        assert m.anomalies == []

    def test_regret_is_gap_at_start_states(self):
        cfg = RunConfig.from_episodes(50, H=3, S=2, A=2, M=1, seed=0, algorithm="hoeffding_baseline")
        m = run(cfg)
        assert all(r >= 0 for r in m.regret) and m.K == 50

    def test_scalars(self):
        cfg = RunConfig.from_episodes(300, H=5, S=3, A=2, M=10, seed=0)
        m = run(cfg)
        per = 13 * 10 * 5 * 3 + 11
        assert m.cumulative_scalars == [per * k for k in range(1, m.K + 1)]
        assert run(cfg.replace(M=1, T0=1500, algorithm="single_eslc")).communication == 0

    def test_observer(self):
        seen = []
        cfg = RunConfig.from_episodes(200, H=3, S=2, A=2, M=2, seed=1)
        m = run(cfg, observer=lambda ev: seen.append((ev.k, ev.after.k, ev.episodes_per_agent)))
        assert [k for k, _, _ in seen] == list(range(1, m.K + 1))
        assert all(after == k + 1 for k, after, _ in seen)
        assert [e for _, _, e in seen] == m.episodes_per_agent

    def test_deterministic(self):
        cfg = RunConfig.from_episodes(500, H=3, S=2, A=2, M=3, seed=6)
        assert run(cfg).to_csv() == run(cfg).to_csv()

    def test_dimension_mismatch(self, mdp_5327):
        with pytest.raises(ValueError):
            run(RunConfig(H=4, S=3, A=2), mdp_5327)

    def test_fixed_start_state(self):
        cfg = RunConfig.from_episodes(300, H=3, S=3, A=2, M=2, seed=0, initial_state=2)
        mdp = build_mdp(cfg)
        oracle = OracleTables.compute(mdp)
        starts = []
        run(cfg, mdp, oracle, observer=lambda ev: starts.append(ev.exploration.initial_counts))
        assert all(c[:, :2].sum() == 0 for c in starts)


class TestCsv:
    def test_layout(self):
        cfg = RunConfig.from_episodes(300, H=3, S=2, A=2, M=2, seed=0)
        m = run(cfg)
        text = m.to_csv()
        lines = text.splitlines()
        assert lines[0].startswith("# config: ")
        assert RunConfig.from_dict(json.loads(lines[0][len("# config: "):])) == cfg
        assert lines[1].startswith("# version: ")
        rows = list(csv.reader(io.StringIO("\n".join(lines[2:]))))
        assert rows[0] == ["algorithm", *CSV_COLUMNS]
        assert len(rows) == m.K + 1
        assert [float(r[5]) for r in rows[1:]] == m.cumulative_regret


class TestBounds:
    def test_small_instance_constants(self):
        cfg = RunConfig(H=2, S=2, A=2, M=1, T0=20, algorithm="single_eslc")
        rep = theorem_bound_check(run(cfg))
        assert rep["C_tilde"] == 48
        assert rep["round_bound"] == 144.0 and rep["switching_bound"] == 144.0
        assert rep["ok"]

    def test_federated_run_below_bound(self):
        m = run(RunConfig.from_episodes(3000, H=5, S=3, A=2, M=10, seed=0))
        rep = theorem_bound_check(m)
        assert rep["rounds_ok"] and m.K < rep["round_bound"]
        assert rep["switching_bound"] is None

    def test_violation_flagged(self):
        m = run(RunConfig(H=2, S=2, A=2, M=1, T0=20, algorithm="single_eslc"))
        m.rounds.extend(range(len(m.rounds) + 1, 200))
        assert not theorem_bound_check(m)["ok"]

    def test_baseline_not_applicable(self):
        m = run(RunConfig(H=2, S=2, A=2, M=1, T0=20, algorithm="hoeffding_baseline"))
        rep = theorem_bound_check(m)
        assert not rep["applicable"] and rep["ok"]


class TestReplicate:
    def test_single_path(self):
        cfg = RunConfig.from_episodes(300, H=3, S=2, A=2, M=2, seed=0)
        ens = replicate(cfg, 1)
        b = ens.bands(ens.regret_paths)
        assert np.array_equal(b["p50"], ens.regret_paths[0])
        assert np.array_equal(b["p10"], b["p90"])

    def test_identical_seeds_zero_width(self):
        cfg = RunConfig.from_episodes(300, H=3, S=2, A=2, M=2, seed=0)
        ens = replicate(cfg, 10, seeds=[5] * 10)
        b = ens.bands(ens.regret_over_log)
        assert np.array_equal(b["p10"], b["p90"])

    def test_distinct_seeds_bands(self):
        cfg = RunConfig.from_episodes(1000, H=5, S=3, A=2, M=10, seed=0)
        ens = replicate(cfg, 10)
        for series in (ens.regret_paths, ens.regret_over_log):
            b = ens.bands(series)
            assert np.all(b["p10"] <= b["p50"]) and np.all(b["p50"] <= b["p90"])
            assert np.any(b["p90"] - b["p10"] > 0)
        assert ens.seeds == list(range(10))
        assert all(c["ok"] for c in ens.bound_checks)
        json.dumps(ens.to_dict())

    def test_figure_rows(self):
        cfg = RunConfig.from_episodes(400, H=3, S=2, A=2, M=1, seed=0, algorithm="single_eslc")
        ens = replicate(cfg, 3, grid_points=50)
        rows = ens.figure_rows()
        assert len(rows) == len(ens.episodes) <= 50
        for e, mean, lo, mid, hi in rows:
            assert lo <= mid <= hi
            assert lo - 1e-12 <= mean <= hi + 1e-12
        assert rows[-1][0] == 400

    def test_workers_match_serial(self):
        cfg = RunConfig.from_episodes(200, H=3, S=2, A=2, M=2, seed=0)
        a = replicate(cfg, 3, workers=1)
        b = replicate(cfg, 3, workers=2)
        assert np.array_equal(a.regret_paths, b.regret_paths)

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            replicate(RunConfig(), 0)


class TestQuarterSlopes:
    def test_linear(self):
        x = np.arange(1, 101, dtype=float)
        first, last = quarter_slopes(x, 3 * x)
        assert first == pytest.approx(3.0) and last == pytest.approx(3.0)

    def test_concave(self):
        x = np.arange(1, 1001, dtype=float)
        first, last = quarter_slopes(x, np.sqrt(x))
        assert last < 0.5 * first
