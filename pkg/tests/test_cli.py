import hashlib
import json
import subprocess
import sys

import pytest

from fedq_lowcost import cli
from fedq_lowcost.mdp import TabularMdp, generate_random_mdp
from fedq_lowcost.oracle import OracleTables, gap_quantities


def write_experiment(path, **over):
    doc = {
        "config": {"H": 3, "S": 2, "A": 2, "M": 2, "seed": 0, "mdp_seed": 3},
        "episodes": 150,
        "n_replications": 2,
        "algorithms": ["fedq_eslc", "hoeffding_baseline"],
        "output_dir": "out",
    }
    doc.update(over)
    path.write_text(json.dumps(doc))
    return path


def digest_tree(root):
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


class TestGenMdp:
    def test_degenerate(self, tmp_path, capsys):
        rc = cli.main(["gen-mdp", "--H", "1", "--S", "1", "--A", "1", "--seed", "0", "--out", str(tmp_path / "m.json")])
        out = capsys.readouterr()
        assert rc == 0
        summary = json.loads(out.out)
        assert summary["degenerate"] is True and summary["delta_min"] is None
        assert "warning" in out.err
        oracle = OracleTables.from_dict(json.loads((tmp_path / "m.oracle.json").read_text()))
        assert (oracle.gaps == 0).all()

    def test_round_trip(self, tmp_path, capsys):
        path = tmp_path / "sub" / "m.json"
        assert cli.main(["gen-mdp", "--H", "5", "--S", "3", "--A", "2", "--seed", "7", "--out", str(path)]) == 0
        printed = json.loads(capsys.readouterr().out)
        mdp = TabularMdp.load(path)
        assert mdp == generate_random_mdp(5, 3, 2, 7)
        assert printed["mdp_hash"] == mdp.content_hash()
        oracle = OracleTables.compute(mdp)
        assert printed["delta_min"] == gap_quantities(oracle.Vstar, oracle.Qstar)[1]
        assert printed["Qvar_max"] == oracle.Qvar_max
        assert printed["C_st"] == oracle.C_st
        cached = json.loads((tmp_path / "sub" / "m.oracle.json").read_text())
        assert cached["mdp_hash"] == mdp.content_hash()

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        rc = cli.main(["gen-mdp", "--H", "2", "--S", "2", "--A", "2", "--out", str(blocker / "m.json")])
        assert rc == cli.EXIT_CONFIG


class TestRun:
    def test_outputs_and_reproducibility(self, tmp_path):
        exp = write_experiment(tmp_path / "exp.json")
        assert cli.main(["run", str(exp)]) == 0
        out = tmp_path / "out"
        first = digest_tree(out)
        for alg in ("fedq_eslc", "hoeffding_baseline"):
            for name in ("seed-0.csv", "seed-1.csv", "ensemble.json", "figure.csv", "rounds.csv"):
                assert (out / alg / name).exists()
        header = (out / "fedq_eslc" / "figure.csv").read_text().splitlines()
        assert header[0].startswith("# config: ") and header[1].startswith("# version: ")
        assert header[2] == "episodes,regret_over_log,p10,p50,p90"
        bounds = json.loads((out / "bounds.json").read_text())
        assert [c["seed"] for c in bounds["fedq_eslc"]] == [0, 1]
        assert all(c["ok"] for c in bounds["fedq_eslc"])
        assert cli.main(["run", str(exp)]) == 0
        assert digest_tree(out) == first

    def test_single_agent_mode(self, tmp_path):
        exp = write_experiment(tmp_path / "exp.json", config={"H": 3, "S": 2, "A": 2, "M": 1, "mdp_seed": 1},
                               algorithms=["fedq_eslc"])
        assert cli.main(["run", str(exp)]) == 0
        out = tmp_path / "out" / "single_eslc"
        assert (out / "switching.csv").exists()
        assert (out / "switching.csv").read_text().splitlines()[2] == "episodes,switching_cost,p10,p50,p90"

    def test_workers_env(self, tmp_path, monkeypatch):
        exp = write_experiment(tmp_path / "exp.json", algorithms=["fedq_eslc"])
        assert cli.main(["run", str(exp), "--output-dir", str(tmp_path / "serial")]) == 0
        monkeypatch.setenv(cli.WORKERS_ENV, "2")
        assert cli.main(["run", str(exp), "--output-dir", str(tmp_path / "pool")]) == 0
        assert digest_tree(tmp_path / "serial") == digest_tree(tmp_path / "pool")
        monkeypatch.setenv(cli.WORKERS_ENV, "many")
        assert cli.main(["run", str(exp)]) == cli.EXIT_CONFIG

    def test_cached_mdp(self, tmp_path):
        cli.main(["gen-mdp", "--H", "3", "--S", "2", "--A", "2", "--seed", "11", "--out", str(tmp_path / "m.json")])
        exp = write_experiment(tmp_path / "exp.json", mdp_path="m.json", algorithms=["fedq_eslc"])
        assert cli.main(["run", str(exp)]) == 0
        assert TabularMdp.from_json((tmp_path / "out" / "mdp.json").read_text()) == generate_random_mdp(3, 2, 2, 11)

    def test_cached_mdp_dimension_mismatch(self, tmp_path):
        cli.main(["gen-mdp", "--H", "4", "--S", "2", "--A", "2", "--out", str(tmp_path / "m.json")])
        exp = write_experiment(tmp_path / "exp.json", mdp_path="m.json")
        assert cli.main(["run", str(exp)]) == cli.EXIT_CONFIG

    @pytest.mark.parametrize(
        "over",
        [
            {"algorithms": ["bogus"]},
            {"surprise": 1},
            {"config": {"H": 0}},
            {"n_replications": 0},
            {"algorithms": ["single_eslc"]},
        ],
    )
    def test_config_errors(self, tmp_path, over):
        exp = write_experiment(tmp_path / "exp.json", **over)
        assert cli.main(["run", str(exp)]) == cli.EXIT_CONFIG

    def test_missing_file(self, tmp_path):
        assert cli.main(["run", str(tmp_path / "absent.json")]) == cli.EXIT_CONFIG

    def test_bound_violation_fails_fast(self, tmp_path, monkeypatch):
        real = cli.theorem_bound_check

        def broken(metrics):
            rep = real(metrics)
            rep["ok"] = False
            return rep

        monkeypatch.setattr(cli, "theorem_bound_check", broken)
        exp = write_experiment(tmp_path / "exp.json")
        assert cli.main(["run", str(exp)]) == cli.EXIT_FAILURE
        report = json.loads((tmp_path / "out" / "bounds.json").read_text())
        assert len(report["fedq_eslc"]) == 1
        assert not (tmp_path / "out" / "hoeffding_baseline").exists()


class TestVerify:
    def test_default_suite_passes(self, capsys):
        assert cli.main(["verify"]) == 0
        out = capsys.readouterr().out
        assert "[FAIL]" not in out
        assert "7/7 properties passed" in out
        assert "weight normalization" in out

    def test_tie_break_mutation_detected(self, capsys):
        assert cli.main(["verify", "--quick", "--mutate-tie-break"]) == cli.EXIT_FAILURE
        lines = capsys.readouterr().out.splitlines()
        failed = [ln for ln in lines if ln.startswith("[FAIL]")]
        assert len(failed) == 1 and "M=1 reduction" in failed[0]

    def test_with_experiment(self, tmp_path, capsys):
        exp = write_experiment(tmp_path / "exp.json", config={"H": 3, "S": 2, "A": 2, "M": 1})
        assert cli.main(["verify", "--quick", str(exp), "--max-episodes", "300"]) == 0
        assert "(experiment)" in capsys.readouterr().out


class TestEntryPoint:
    def test_help_lists_commands(self):
        out = subprocess.run([sys.executable, "-m", "fedq_lowcost.cli", "--help"], capture_output=True, text=True)
        assert out.returncode == 0
        for cmd in ("gen-mdp", "run", "verify", cli.WORKERS_ENV):
            assert cmd in out.stdout

    def test_bad_arguments_exit_two(self):
        out = subprocess.run([sys.executable, "-m", "fedq_lowcost.cli", "gen-mdp"], capture_output=True)
        assert out.returncode == 2
