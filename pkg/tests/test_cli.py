import csv
import json
import subprocess
import sys

import pytest

from persona.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main

from conftest import TINY


def _sets(extra=()):
    out = []
    for k, v in {**TINY, "train_dam.epochs": "1", "train_editor.epochs": "1"}.items():
        out += ["--set", f"{k}={v}"]
    for kv in extra:
        out += ["--set", kv]
    return out


def test_help_exits_zero(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "train-editor" in capsys.readouterr().out
    assert main(["sweep", "--help"]) == EXIT_OK


def test_version(capsys):
    assert main(["--version"]) == EXIT_OK
    assert capsys.readouterr().out.startswith("persona ")


@pytest.mark.parametrize("argv", [
    ["--bogus", "run"],
    [],
    ["frobnicate"],
    ["sweep", "--axis", "colour"],
    ["--set", "persona.nope=1", "gen-data"],
    ["--set", "persona.groups", "gen-data"],
    ["--config", "/nonexistent/cfg.ini", "gen-data"],
])
def test_usage_errors_exit_one(argv, tmp_path, capsys):
    assert main(["--output-dir", str(tmp_path)] + argv) == EXIT_USAGE
    assert capsys.readouterr().err


def test_bad_condition_is_usage_error(tmp_path):
    assert main(["--output-dir", str(tmp_path), "simulate", "--conditions", "magic"]) == EXIT_USAGE


def test_missing_prerequisite_is_runtime_error(tmp_path, capsys):
    assert main(["--output-dir", str(tmp_path), *_sets(), "train-editor"]) == EXIT_RUNTIME
    assert "train-dam" in capsys.readouterr().err


def test_staged_pipeline(tmp_path):
    base = ["--output-dir", str(tmp_path), *_sets()]
    for stage in ("gen-data", "train-dam", "train-editor", "partition", "build-groups"):
        assert main(base + [stage]) == EXIT_OK, stage
    assert main(base + ["simulate", "--conditions", "baseline,persona_m"]) == EXIT_OK
    assert main(base + ["eval"]) == EXIT_OK
    assert main(base + ["latency", "--requests", "5"]) == EXIT_OK
    seed = tmp_path / "seed0"
    for rel in ("data/interactions.csv", "data/labels.csv", "checkpoints/dam.ckpt", "checkpoints/editor.ckpt",
                "checkpoints/protoset.ckpt", "partition.csv", "simulation/baseline_predictions.jsonl",
                "simulation/persona_m_syncs.jsonl", "logs/train_dam.jsonl", "latency.json"):
        assert (seed / rel).is_file(), rel
    rows = list(csv.DictReader(open(tmp_path / "report" / "report_results.csv")))
    assert [r["condition"] for r in rows] == ["baseline", "persona_m"]
    assert list((tmp_path / "report").glob("*.png"))
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert [c["command"] for c in manifest["commands"]][:2] == ["gen-data", "train-dam"]
    assert "seed0/checkpoints/protoset.ckpt" in manifest["artifacts"]
    assert (tmp_path / "config.ini").is_file()
    # every device window is served at least once
    assert json.loads((seed / "latency.json").read_text())["requests"] == 30


def test_staged_results_are_reproducible(tmp_path):
    outs = []
    for name in ("a", "b"):
        base = ["--output-dir", str(tmp_path / name), *_sets()]
        assert main(base + ["run", "--conditions", "baseline,persona_s,persona_m"]) == EXIT_OK
        outs.append((tmp_path / name / "report" / "report_results.csv").read_text())
    assert outs[0] == outs[1]


def test_config_file_and_env(tmp_path, monkeypatch):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[data]\n" + "".join(f"{k.split('.')[1]} = {v}\n" for k, v in TINY.items()
                                        if k.startswith("data.")))
    monkeypatch.setenv("PERSONA_OUTPUT_DIR", str(tmp_path / "env_out"))
    assert main(["--config", str(cfg), "gen-data"]) == EXIT_OK
    written = (tmp_path / "env_out" / "config.ini").read_text()
    assert "n_devices = 30" in written


def test_sweep_uses_default_thresholds(tmp_path):
    base = ["--output-dir", str(tmp_path), *_sets(["group_prototype.epochs=0", "group_editor.epochs=0"])]
    assert main(base + ["sweep", "--axis", "threshold"]) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "sweep_threshold" / "sweep_threshold_sweep.csv")))
    values = [r["value"] for r in rows if r["condition"] == "persona_m" and r["metric"] == "ndcg5"]
    assert values == ["T=0.1", "T=0.5", "T=1", "T=5"]
    assert list((tmp_path / "sweep_threshold").glob("*.png"))


def test_console_module_entry(tmp_path):
    res = subprocess.run([sys.executable, "-m", "persona.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "persona" in res.stdout


def test_options_after_subcommand(tmp_path):
    assert main(["gen-data", "--output-dir", str(tmp_path), *_sets(), "--seed", "3"]) == EXIT_OK
    assert (tmp_path / "seed3" / "data" / "interactions.csv").is_file()
