import json
import shutil
import subprocess
import sys

import pytest

from indigo.cli import COMMANDS, main


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_help_lists_every_command(capsys):
    code, out, _ = _run(capsys, "--help")
    assert code == 0
    for name in COMMANDS:
        assert name in out


def test_usage_errors_exit_1(capsys):
    assert _run(capsys, "fly")[0] == 1
    assert _run(capsys, "train", "--jobs", "0")[0] == 1
    code, _, err = _run(capsys, "train", "--bogus")
    assert code == 1 and "usage" in err


def test_config_errors_exit_1(capsys, tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[loss]\nlambda = 2.0\n")
    code, _, err = _run(capsys, "train", "--config", bad, "--output-dir", tmp_path)
    assert code == 1 and "loss.lambda" in err
    assert _run(capsys, "train", "--config", tmp_path / "nope.toml")[0] == 1


def test_bad_env_seed_exit_1(capsys, monkeypatch, tiny_toml, tmp_path):
    monkeypatch.setenv("INDIGO_SEED", "seven")
    code, _, err = _run(capsys, "train", "--config", tiny_toml, "--output-dir", tmp_path)
    assert code == 1 and "INDIGO_SEED" in err


def test_runtime_failure_exit_2(capsys, tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[data]\nroot = "' + str(tmp_path / "missing") + '"\n')
    assert _run(capsys, "train", "--config", cfg, "--output-dir", tmp_path)[0] == 2


def test_train_then_eval(capsys, monkeypatch, tiny_toml, tmp_path):
    monkeypatch.setenv("INDIGO_SEED", "3")
    code, out, _ = _run(capsys, "train", "--config", tiny_toml, "--output-dir", tmp_path)
    assert code == 0
    summary = json.loads(out)
    assert sorted(summary["per_domain"]) == ["cartoon", "photo", "sketch"]
    assert (tmp_path / "train/photo/3/checkpoint.zip").is_file()
    assert not (tmp_path / "train/photo/0").exists()
    code, out, _ = _run(capsys, "eval", "--config", tiny_toml, "--output-dir", tmp_path)
    assert code == 0 and json.loads(out) == summary


def test_seed_flag_wins_over_env(capsys, monkeypatch, tiny_toml, tmp_path):
    monkeypatch.setenv("INDIGO_SEED", "3")
    assert _run(capsys, "limited-sources", "--config", tiny_toml, "--output-dir", tmp_path, "--seed", "5")[0] == 0
    assert (tmp_path / "limited-sources/sketch/5/report.json").is_file()


@pytest.mark.parametrize("command,artifact", [
    ("gen-data", "gen-data/data/manifest.json"),
    ("pretrain-stub", "pretrain-stub/stub.zip"),
    ("export-attn", "export-attn/photo/0/attention.json"),
    ("export-emb", "export-emb/photo/0/embeddings.npz"),
    ("sweep-lambda", "sweep-lambda/series.json"),
    ("ablate-layers", "ablate-layers/K=12/report.json"),
    ("limited-data", "limited-data/data_fraction=0.5/report.json"),
])
def test_commands_write_their_outputs(capsys, tiny_toml, tmp_path, command, artifact):
    code, out, _ = _run(capsys, command, "--config", tiny_toml, "--output-dir", tmp_path, "--seed", "0")
    assert code == 0
    json.loads(out)
    assert (tmp_path / artifact).is_file()


def test_console_script_entry_point():
    exe = shutil.which("indigo")
    cmd = [exe] if exe else [sys.executable, "-m", "indigo.cli"]
    proc = subprocess.run(cmd + ["--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "sweep-lambda" in proc.stdout
    assert subprocess.run(cmd + ["nope"], capture_output=True).returncode == 1
