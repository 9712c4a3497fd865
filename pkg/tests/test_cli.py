import csv
import json
import shutil
import subprocess

import numpy as np
import pytest

from budgetforge import cli
from budgetforge.config import KEYS, RunConfig, blob_sha, parse_value, read_config_file
from budgetforge.env import check_ledger
from budgetforge.errors import ConfigError

SMALL = ["--questions", "40", "--experts", "8", "--dimension", "8"]
FAST = ["--epochs", "2", "--restarts", "1", "--episodes", "3", "--batch-size", "8"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert cli.main(["gen", *SMALL, "--seed", "7", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    d = tmp_path_factory.mktemp("model")
    assert cli.main(["train", "--data", str(dataset), "--seed", "0", "--budget", "3", "--out", str(d), *FAST]) == 0
    return d


def test_gen_writes_files_and_is_deterministic(dataset, tmp_path, capsys):
    again = tmp_path / "again"
    assert cli.main(["gen", *SMALL, "--seed", "7", "--out", str(again)]) == 0
    out = capsys.readouterr().out
    for f in ("questions.jsonl", "experts.jsonl", "embeddings.bfem", "capability.json", "manifest.json"):
        assert f in out
        assert (again / f).read_bytes() == (dataset / f).read_bytes()
    assert (again / "config.ini").is_file() and (again / "run.json").is_file()


def test_gen_invalid_spec_exit_code(tmp_path, capsys):
    code = cli.main(["gen", "--questions", "2", "--topics", "4", "--seed", "1", "--out", str(tmp_path / "x")])
    assert code == ConfigError.exit_code
    assert "ConfigError" in capsys.readouterr().err


def test_required_flags(tmp_path, capsys):
    assert cli.main(["train", "--seed", "1", "--out", str(tmp_path)]) == ConfigError.exit_code
    assert "--budget" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["train", "--help"])
    helptext = capsys.readouterr().out
    for flag in ("--seed", "--budget", "--out"):
        assert flag in helptext
    assert "[required]" in helptext


def test_config_file_and_overrides(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\nseed = 4\nbudget = 10, 25\n[allocator]\nagents = 3\n")
    values = read_config_file(ini)
    cfg = RunConfig.resolve("sweep", values, {"agents": "7", "out": str(tmp_path)})
    assert cfg.seed == 4 and cfg.budget == (10.0, 25.0) and cfg.agents == 7
    assert cfg.seeds == (1, 2, 3)
    back = tmp_path / "back.ini"
    back.write_text(cfg.snapshot())
    assert RunConfig.resolve("sweep", read_config_file(back), {}).values == cfg.values


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.resolve("sweep", {}, {"seed": "1", "out": "x", "budget": "10,10"})
    with pytest.raises(ConfigError):
        RunConfig.resolve("sweep", {}, {"seed": "1", "out": "x", "budget": "-1"})
    with pytest.raises(ConfigError):
        parse_value("agents", "ten")
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nflavour = sour\n")
    with pytest.raises(ConfigError):
        read_config_file(bad)
    assert set(KEYS) >= {"seed", "budget", "out", "seeds", "agents", "gamma"}


@pytest.mark.skipif(shutil.which("git") is None, reason="git not installed")
def test_blob_sha_matches_git():
    for data in (b"", b"hello\n", bytes(range(256))):
        ref = subprocess.run(["git", "hash-object", "--stdin"], input=data, capture_output=True, check=True)
        assert blob_sha(data) == ref.stdout.decode().strip()


def test_train_untrained_checkpoints(dataset, tmp_path):
    out = tmp_path / "m"
    code = cli.main(["train", "--data", str(dataset), "--seed", "1", "--budget", "2", "--out", str(out),
                     "--epochs", "0", "--episodes", "0"])
    assert code == 0
    for f in ("matcher/matcher.json", "qnets/qnets.json", "matcher_report.json", "allocator_report.json",
              "config.ini", "run.json"):
        assert (out / f).is_file()
    assert json.loads((out / "allocator_report.json").read_text())["episodes"] == 0


def test_train_missing_embeddings(dataset, tmp_path):
    broken = tmp_path / "broken"
    broken.mkdir()
    for f in ("questions.jsonl", "experts.jsonl"):
        (broken / f).write_bytes((dataset / f).read_bytes())
    code = cli.main(["train", "--data", str(broken), "--seed", "1", "--budget", "2", "--out", str(tmp_path / "o")])
    assert code == 3


def test_evaluate_missing_checkpoint(dataset, tmp_path):
    code = cli.main(["evaluate", "--data", str(dataset), "--seed", "0", "--budget", "3",
                     "--out", str(tmp_path / "e")])
    assert code == 4


def test_evaluate_single_method(dataset, tmp_path):
    out = tmp_path / "e"
    assert cli.main(["evaluate", "--data", str(dataset), "--seed", "0", "--budget", "3", "--out", str(out),
                     "--methods", "random"]) == 0
    doc = json.loads((out / "evaluate.json").read_text())
    assert list(doc["methods"]) == ["random"]
    rows = (out / "evaluate.txt").read_text().strip().splitlines()
    assert len(rows) == 3  # header, rule, one method


def test_evaluate_table_matches_reports(dataset, trained, tmp_path):
    out = tmp_path / "e"
    assert cli.main(["evaluate", "--data", str(dataset), "--seed", "0", "--budget", "3", "--out", str(out),
                     "--checkpoint", str(trained)]) == 0
    doc = json.loads((out / "evaluate.json").read_text())
    for method, row in doc["methods"].items():
        scores = [json.loads((out / "reports" / method / f"seed{s}.json").read_text())["final_score"]
                  for s in (1, 2, 3)]
        assert row["n"] == 3
        assert row["mean"] == pytest.approx(np.mean(scores), abs=1e-12)
        assert row["std"] == pytest.approx(np.std(scores, ddof=1), abs=1e-12)
        for s in (1, 2, 3):
            assert check_ledger(json.loads((out / "reports" / method / f"seed{s}.json").read_text())) == []


def test_evaluate_rejects_budget_list(dataset, trained, tmp_path):
    code = cli.main(["evaluate", "--data", str(dataset), "--seed", "0", "--budget", "1,2", "--out", str(tmp_path),
                     "--checkpoint", str(trained)])
    assert code == ConfigError.exit_code


def test_sweep_zero_budget_and_outputs(dataset, trained, tmp_path, monkeypatch):
    monkeypatch.setenv("BUDGETFORGE_THREADS", "2")
    out = tmp_path / "s"
    assert cli.main(["sweep", "--data", str(dataset), "--seed", "0", "--budget", "0,2", "--out", str(out),
                     "--checkpoint", str(trained)]) == 0
    doc = json.loads((out / "sweep.json").read_text())
    assert len(doc["cells"]) == 2 * 4 * 3 and all(c["status"] == "ok" for c in doc["cells"])
    initial = {s: json.loads((out / "reports" / "b0" / "random" / f"seed{s}.json").read_text())["initial_score"]
               for s in (1, 2, 3)}
    for c in doc["cells"]:
        if c["budget"] == 0:
            assert c["score"] == initial[c["seed"]]
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 24 and set(rows[0]) == {"budget", "method", "seed", "score", "status"}


def test_sweep_duplicate_budgets(dataset, tmp_path):
    code = cli.main(["sweep", "--data", str(dataset), "--seed", "0", "--budget", "5,5", "--out", str(tmp_path)])
    assert code == ConfigError.exit_code


def test_sweep_thread_setting(monkeypatch):
    monkeypatch.setenv("BUDGETFORGE_THREADS", "3")
    assert cli.threads() == 3
    monkeypatch.setenv("BUDGETFORGE_THREADS", "many")
    with pytest.raises(ConfigError):
        cli.threads()


def test_sweep_records_failed_cells(dataset, tmp_path, monkeypatch):
    real = cli.run_cell

    def flaky(ds, cap, cfg, method, budget, seed, *rest):
        if method == "cost_greedy" and seed == 2:
            raise ConfigError("boom")
        return real(ds, cap, cfg, method, budget, seed, *rest)

    monkeypatch.setattr(cli, "run_cell", flaky)
    out = tmp_path / "s"
    assert cli.main(["sweep", "--data", str(dataset), "--seed", "0", "--budget", "1", "--out", str(out),
                     "--methods", "random,cost_greedy"]) == 0
    cells = json.loads((out / "sweep.json").read_text())["cells"]
    failed = [c for c in cells if c["status"] == "failed"]
    assert len(cells) == 6 and len(failed) == 1 and "boom" in failed[0]["error"]
    assert json.loads((out / "sweep.json").read_text())["summary"]["cost_greedy"]["1"]["n"] == 2
