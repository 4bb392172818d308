import csv
import json
from pathlib import Path

import pytest

from modmoe.cli import config_hash, main

TINY = str(Path(__file__).resolve().parents[1] / "configs" / "tiny.json")
STAGES = ["prepare", "tokenizer", "teacher", "distill", "router"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    for st in STAGES:
        assert main([st, "--config", TINY, "--seed", "7", "--out", str(out)]) == 0
    for setup in ("ple", "moe-ce"):
        assert main(["moe-train", "--config", TINY, "--seed", "7", "--out", str(out), "--setup", setup]) == 0
    assert main(["moe-eval", "--config", TINY, "--out", str(out), "--setup", "moe-ce", "--settings-grid", "full"]) == 0
    return out


def test_distill_without_teacher(tmp_path, capsys):
    code, _, err = run(capsys, "distill", "--config", TINY, "--seed", "1", "--out", str(tmp_path))
    assert code != 0
    assert err.strip().splitlines()[-1] == "error: missing artifact: teacher checkpoint"


def test_invalid_config_key(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"teacher.n_layerz": 3}))
    code, _, err = run(capsys, "prepare", "--config", str(bad), "--seed", "1", "--out", str(tmp_path))
    assert code != 0 and "invalid config key: teacher.n_layerz" in err


def test_bad_config_value(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"teacher.n_layers": "four"}))
    code, _, err = run(capsys, "prepare", "--config", str(bad), "--seed", "1", "--out", str(tmp_path))
    assert code != 0 and "teacher.n_layers" in err


def test_seed_required_for_training(tmp_path, capsys):
    code, _, err = run(capsys, "prepare", "--config", TINY, "--out", str(tmp_path))
    assert code != 0 and "--seed" in err


def test_bad_thread_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("MODMOE_NUM_THREADS", "zero")
    code, _, err = run(capsys, "prepare", "--config", TINY, "--seed", "1", "--out", str(tmp_path))
    assert code != 0 and "MODMOE_NUM_THREADS" in err


def test_pipeline_manifests(pipeline):
    manifests = sorted((pipeline / "manifests").glob("*.json"))
    listed = []
    for m in manifests:
        data = json.loads(m.read_text())
        assert {"stage", "config_hash", "config", "seed", "versions", "outputs"} <= set(data)
        listed.extend(data["outputs"])
    assert len(listed) == len(set(listed))
    files = {p.relative_to(pipeline).as_posix() for p in pipeline.rglob("*") if p.is_file()}
    assert files - {m.relative_to(pipeline).as_posix() for m in manifests} == set(listed)
    for m in manifests:
        data = json.loads(m.read_text())
        assert data["config_hash"] == config_hash(data["config"])


def test_settings_grid_csv(pipeline):
    rows = list(csv.reader((pipeline / "moe" / "moe-ce" / "eval" / "settings_grid.csv").open()))
    assert rows[0] == ["routable", "use_common", "ppl_en", "ppl_fr", "ppl_de", "ppl_py", "ppl_all"]
    assert len(rows) == 18
    assert ["none", "true"] == rows[-1][:2]


def test_moe_eval_single_setting(pipeline, capsys):
    code, out, _ = run(capsys, "moe-eval", "--config", TINY, "--out", str(pipeline), "--setup", "ple",
                       "--routable", "en,py", "--use-common", "false")
    assert code == 0
    assert (pipeline / "moe" / "ple" / "eval" / "en+py_noce.csv").exists()
    code, _, err = run(capsys, "moe-eval", "--config", TINY, "--out", str(pipeline), "--setup", "ple",
                       "--use-common", "true")
    assert code != 0 and "common" in err


def test_study_forgetting_is_deterministic(pipeline, tmp_path, capsys):
    tables = []
    for _ in range(2):
        assert main(["study", "forgetting", "--config", TINY, "--seed", "7", "--out", str(pipeline)]) == 0
        tables.append((pipeline / "study" / "forgetting_fk.csv").read_bytes())
    capsys.readouterr()
    assert tables[0] == tables[1]
    assert b"A_sequential,py,N/A" in tables[0]
