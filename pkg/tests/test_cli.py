from __future__ import annotations

import csv
import io
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from causalviews import cli, ecs, models
from causalviews import coarse_grain as cg

pytestmark = pytest.mark.filterwarnings("ignore::causalviews.madelung.DegeneracyWarning")


@pytest.fixture(autouse=True)
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    return tmp_path


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# causalviews ") and "config_hash=" in lines[0]
    return list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))


def manifest(root, name):
    return json.loads((root / name / "manifest.json").read_text())


class TestGenerate:
    def test_example(self, out_root):
        argv = "generate --d 1 --layers 50 --epl 20 --n-pre 2 --seed 42 --out gen".split()
        assert cli.main(argv) == 0
        c = ecs.CausalSet.from_dict(json.loads((out_root / "gen" / "causal_set.json").read_text()))
        # recompute the residual independently of the written report
        net = np.zeros((c.n_events, c.d))
        np.add.at(net, c.dst, c.p)
        np.subtract.at(net, c.src, c.p)
        interior = (np.bincount(c.dst, minlength=c.n_events) > 0) & (np.bincount(c.src, minlength=c.n_events) > 0)
        assert np.abs(net[interior]).max() < 1e-12
        rows = read_csv(out_root / "gen" / "residuals.csv")
        assert len(rows) == c.n_events

    def test_byte_identical(self, out_root):
        for name in ("a", "b"):
            assert cli.main(["generate", "--layers", "10", "--epl", "5", "--seed", "3", "--out", name]) == 0
        for f in ("causal_set.json", "residuals.csv"):
            assert (out_root / "a" / f).read_bytes() == (out_root / "b" / f).read_bytes()

    def test_default_output_dir_uses_hash(self, out_root):
        man = cli.run({"command": "generate", "layers": 5, "epl": 3})
        assert (out_root / f"generate-{man.config_hash[:12]}" / "manifest.json").exists()


class TestConfig:
    def test_schema_violation(self, capsys):
        assert cli.main(["generate", "--layers", "-1"]) == cli.EXIT_CONFIG
        assert "config error" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"layers": 5, "bogus": 1}))
        assert cli.main(["generate", "--config", str(cfg)]) == cli.EXIT_CONFIG

    def test_flags_override_file(self, tmp_path, out_root):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"layers": 5, "epl": 4, "seed": 1}))
        assert cli.main(["generate", "--config", str(cfg), "--epl", "6", "--out", "o"]) == 0
        m = manifest(out_root, "o")
        assert m["config"]["layers"] == 5 and m["config"]["epl"] == 6

    def test_print_schema(self, capsys):
        assert cli.main(["variety", "--print-schema"]) == 0
        schema = json.loads(capsys.readouterr().out)
        assert schema["additionalProperties"] is False and "N" in schema["properties"]

    def test_hash_ignores_output(self):
        a = cli.resolve_config("generate", {"output": "x"})
        b = cli.resolve_config("generate", {"output": "y"})
        assert cli.config_hash(a) == cli.config_hash(b)

    def test_command_mismatch(self):
        with pytest.raises(cli.ConfigError):
            cli.resolve_config("generate", {"command": "energy"})


class TestVariety:
    def test_matches_module(self, out_root):
        argv = "variety --model gaussian --N 10000 --L 14.18 --d 1 --seed 1 --out v".split()
        assert cli.main(argv) == 0
        row = read_csv(out_root / "v" / "variety.csv")[0]
        rep, _ = cg.model_variety(models.Gaussian(), 10000, 14.18, 1)
        assert float(row["discrete"]) == rep.discrete
        assert float(row["fisher_term"]) == rep.fisher_term

    def test_empty_shell_length(self, capsys):
        argv = "variety --model gaussian --N 10000 --L 1.0 --d 1 --seed 1".split()
        assert cli.main(argv) == cli.EXIT_CONFIG
        assert "gives r=4" in capsys.readouterr().err

    def test_convergence(self, out_root):
        argv = "variety --model cosine --N-list 500,1000,2000 --r 4 --out c".split()
        assert cli.main(argv) == 0
        rows = read_csv(out_root / "c" / "convergence.csv")
        assert [int(r["N"]) for r in rows] == [500, 1000, 2000]


class TestEnergyEmbed:
    def test_energy_stdout(self, capsys, out_root):
        assert cli.main(["energy", "--layers", "6", "--epl", "4", "--out", "e"]) == 0
        text = capsys.readouterr().out
        assert "T," in text or "T=" in text
        assert (out_root / "e" / "energy.json").exists()

    def test_embed_round_trip(self, out_root):
        assert cli.main(["embed", "--layers", "6", "--epl", "5", "--gauge-event", "0", "--out", "z"]) == 0
        assert manifest(out_root, "z")["metrics"]["round_trip_error"] < 1e-10

    def test_embed_order1(self, out_root):
        assert cli.main(["embed", "--layers", "6", "--epl", "5", "--order", "1", "--g-prime", "0.3", "--out", "z1"]) == 0
        assert manifest(out_root, "z1")["metrics"]["max_longitudinal_correction"] < 1e-12


class TestEvolveCompare:
    def test_evolve(self, out_root):
        argv = "evolve --mode quantum --dt 0.001 --steps 20 --grid=-10,10,128 --snapshot-every 10 --out ev".split()
        assert cli.main(argv) == 0
        m = manifest(out_root, "ev")
        assert abs(m["metrics"]["mass_drift"]) < 1e-12
        assert any(p.endswith("snapshots.csv") for p in m["outputs"])

    def test_dt_guard_is_config_error(self):
        argv = "evolve --dt 1.0 --steps 1 --grid=-10,10,128".split()
        assert cli.main(argv) == cli.EXIT_CONFIG

    def test_instability_exit(self, capsys):
        argv = "evolve --mode quantum+correction --correction 1e-4 --dt 0.0004 --steps 20000 --grid=-10,10,512".split()
        assert cli.main(argv) == cli.EXIT_NUMERIC
        err = capsys.readouterr().err
        assert "diagnostics: step=" in err

    def test_compare(self, out_root):
        argv = "compare --dt 0.003 --steps 200 --grid=-10,10,256 --out cmp".split()
        assert cli.main(argv) == 0
        doc = json.loads((out_root / "cmp" / "comparison.json").read_text())
        assert doc["meta"]["command"] == "compare"
        assert doc["l2_density"] < 1e-3


class TestPipeline:
    def test_default_small(self, out_root):
        man = cli.run({"command": "pipeline", "layers": 30, "epl": 40, "output": "p"})
        assert man.status == "ok"
        names = {p.split("/")[-1] for p in man.outputs}
        assert {"causal_set.json", "embedding.csv", "summary.csv"} <= names
        for p in man.outputs:
            assert (out_root / "p" / p.split("/")[-1]).exists()
        assert man.metrics["l2_density"] < 1e-3

    def test_default_demo_runtime(self):
        t0 = time.perf_counter()
        man = cli.run({"command": "pipeline", "output": "demo"})
        elapsed = time.perf_counter() - t0
        assert man.config["layers"] * man.config["epl"] == 10_000 and man.config["d"] == 1
        assert elapsed < 300 and man.status == "ok"

    def test_g_prime_zero_classical(self):
        man = cli.run({"command": "pipeline", "layers": 20, "epl": 30, "g_prime": 0.0, "output": "pc"})
        assert man.metrics["mode"] == "classical"

    def test_stage_failure_manifest(self, out_root):
        with pytest.raises(cli.StageError) as info:
            cli.run({"command": "pipeline", "layers": 20, "epl": 30, "dt": 10.0, "output": "bad"})
        m = manifest(out_root, "bad")
        assert m["status"] == "failed" and m["failed_stage"] == info.value.stage == "compare_evolutions"
        assert any(p.endswith("causal_set.json") for p in m["outputs"])

    def test_hbar_zero_rejected(self):
        with pytest.raises(cli.ConfigError):
            cli.run({"command": "pipeline", "layers": 20, "epl": 30, "hbar": 0.0, "output": "h0"})


def test_sweep(out_root):
    cfg = {
        "command": "sweep",
        "base": {"command": "generate", "layers": 5, "epl": 3},
        "grid": {"seed": [1, 2], "n_pre": [1, 2]},
        "workers": 2,
        "output": "sw",
    }
    man = cli.run(cfg)
    assert man.metrics == {"runs": 4, "failed": 0}
    rows = read_csv(out_root / "sw" / "sweep.csv")
    assert len(rows) == 4 and "param.seed" in rows[0] and "metric.n_events" in rows[0]
    assert (out_root / "sw" / "run_003" / "manifest.json").exists()


def test_module_entry_point(out_root):
    proc = subprocess.run(
        [sys.executable, "-m", "causalviews", "generate", "--layers", "4", "--epl", "3", "--out", "m"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (out_root / "m" / "manifest.json").exists()
