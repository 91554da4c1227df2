import json
import shutil
import subprocess
import sys

import pytest

from raincast import cli
from raincast.pipeline import STAGES, UPSTREAM, PipelineConfig, sha256_file
from raincast.synthetic import write_dataset


def _edit(path, fn):
    cfg = json.loads(path.read_text())
    fn(cfg)
    path.write_text(json.dumps(cfg))


@pytest.fixture(scope="module")
def done(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = write_dataset(root / "data")
    _edit(cfg, lambda c: c["training"]["base"].update(max_epochs=1))
    assert cli.main(["all", "--config", str(cfg)]) == 0
    return cfg


@pytest.fixture
def clone(done, tmp_path):
    shutil.copytree(done.parent, tmp_path / "data")
    return tmp_path / "data" / "config.json"


@pytest.mark.slow
def test_all_stages_complete_with_chained_manifests(done):
    out = done.parent / "out"
    for s in STAGES:
        man = json.loads((out / s / "manifest.json").read_text())
        assert man["stage"] == s and set(man["inputs"]) == set(UPSTREAM[s])
        for u, digest in man["inputs"].items():
            assert digest == sha256_file(out / u / "manifest.json")
        for name, digest in man["outputs"].items():
            assert sha256_file(out / s / name) == digest
    assert (out / "train" / "model_c1_f1.bin").exists()
    assert any(p.suffix == ".ppm" for p in (out / "render-map").iterdir())


def test_forecast_artifacts_sane(done):
    import csv

    out = done.parent / "out"
    rows = list(csv.DictReader(open(out / "map-extremes" / "forecasts.csv")))
    assert rows and all(float(r["mapped"]) >= 0 for r in rows)
    op = [r for r in rows if r["kind"] == "operational"]
    assert {int(r["horizon"]) for r in op} == set(range(1, 13))
    ev = list(csv.DictReader(open(out / "evaluate" / "evaluation.csv")))
    assert {r["metric"] for r in ev} == {"accuracy", "rmse", "nse", "smape"}


def test_rerun_is_cache_hit(done, capsys):
    assert cli.main(["all", "--config", str(done)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines == [f"{s}: skipped" for s in STAGES]


def test_predict_without_train_names_checkpoint(clone, capsys):
    shutil.rmtree(clone.parent / "out" / "train")
    assert cli.main(["predict", "--config", str(clone)]) == 3
    err = capsys.readouterr().err
    assert "checkpoint" in err and "train" in err


def test_missing_checkpoint_file(clone, capsys):
    shutil.rmtree(clone.parent / "out" / "predict")
    (clone.parent / "out" / "train" / "model_c2_f2.bin").unlink()
    assert cli.main(["predict", "--config", str(clone)]) == 3
    assert "model_c2_f2.bin" in capsys.readouterr().err


def test_config_change_needs_force(clone, capsys):
    _edit(clone, lambda c: c["screening"].update(r_threshold=0.45))
    assert cli.main(["ingest", "--config", str(clone)]) == 2
    assert "--force" in capsys.readouterr().err
    assert cli.main(["ingest", "--config", str(clone), "--force"]) == 0


def test_seed_change_needs_force(clone):
    assert cli.main(["cluster", "--config", str(clone), "--seed", "7"]) == 2
    assert cli.main(["cluster", "--config", str(clone)]) == 0


def test_tampered_output_triggers_rerun(clone, capsys):
    p = clone.parent / "out" / "graph" / "graphs.json"
    p.write_text(p.read_text() + " ")
    assert cli.main(["graph", "--config", str(clone)]) == 0
    assert capsys.readouterr().out.strip() == "graph: ran"
    assert cli.main(["train", "--config", str(clone)]) == 0
    assert capsys.readouterr().out.strip() == "train: skipped"


def test_output_dir_env_override(clone, tmp_path, monkeypatch):
    monkeypatch.setenv("RAINCAST_OUTPUT_DIR", str(tmp_path / "elsewhere"))
    assert PipelineConfig.load(clone).output_dir == str(tmp_path / "elsewhere")
    assert cli.main(["ingest", "--config", str(clone)]) == 0
    assert (tmp_path / "elsewhere" / "ingest" / "manifest.json").exists()


@pytest.mark.parametrize("mutate", [
    lambda c: c["evt"].update(Q=97.5),
    lambda c: c["evt"].update(Q=85),
    lambda c: c["training"].update(grid={"heads": [3]}),
    lambda c: c["training"].update(grid={"dropout": [0.9]}),
    lambda c: c["training"].update(objective="mae"),
    lambda c: c["data"].update(stations="nope.csv"),
    lambda c: c["evt"].update(families={"1": "polar"}),
])
def test_config_errors_exit_2(tmp_path, mutate, capsys):
    cfg = write_dataset(tmp_path)
    _edit(cfg, mutate)
    assert cli.main(["ingest", "--config", str(cfg)]) == 2
    assert "config error" in capsys.readouterr().err


def test_cli_argument_errors(tmp_path, capsys):
    assert cli.main(["ingest"]) == 2
    bad = tmp_path / "c.json"
    bad.write_text("{not json")
    assert cli.main(["ingest", "--config", str(bad)]) == 2
    assert cli.main(["ingest", "--config", str(tmp_path / "absent.json")]) == 2
    with pytest.raises(SystemExit):
        cli.main(["bogus", "--config", str(bad)])


def test_entry_point_version():
    r = subprocess.run([sys.executable, "-m", "raincast.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "0.1.0" in r.stdout
