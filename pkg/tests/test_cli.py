import json
import subprocess
import sys
from dataclasses import replace

import pytest

from hetseg.cli import main
from hetseg.config import MetricOptions, RunConfig
from hetseg.core import ConfigError
from hetseg.model import ModelConfig

TINY = {
    "phantom": {"shape": [16, 16, 16], "lesion_radius_mm": [1.0, 1.5], "n_lesions_t1": [1, 2]},
    "model": {"depth": 2, "base_width": 4, "patch_size": [16, 16, 16]},
    "train": {"n_epoch": 2, "folds": 1},
    "series_subjects": 1,
    "series_timepoints": 3,
}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(TINY))
    return p


def test_run_config_round_trip(tmp_path):
    cfg = RunConfig(model=ModelConfig(depth=2, base_width=4, patch_size=(16, 16, 16)), seed=3)
    cfg.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json") == cfg
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"model": {"depth": 5, "patch_size": [48, 48, 48]}})
    with pytest.raises(ConfigError):
        MetricOptions(connectivity=4)
    seeded = cfg.with_seed(9)
    assert seeded.phantom.seed == seeded.train.seed == 9


def test_synth_prints_summary_and_honours_subjects(tmp_path, cfg_file, capsys):
    assert main(["--config", str(cfg_file), "--out", str(tmp_path / "s"), "synth", "--subjects", "3"]) == 0
    out = capsys.readouterr().out
    assert "PH-VAN" in out and "cross_sectional" in out
    doc = json.loads((tmp_path / "s" / "PH-2015" / "manifest.json").read_text())
    assert len(doc["records"]) == 3


def test_synth_uses_cache_env(tmp_path, cfg_file, monkeypatch):
    monkeypatch.setenv("SEGHEH_CACHE", str(tmp_path / "cache"))
    assert main(["--config", str(cfg_file), "synth", "--subjects", "1"]) == 0
    assert (tmp_path / "cache" / "suite.json").exists()


def test_seed_flag_overrides_file(tmp_path, cfg_file):
    main(["--config", str(cfg_file), "--seed", "5", "--out", str(tmp_path / "s"), "synth", "--subjects", "1"])
    saved = RunConfig.load(tmp_path / "s" / "run_config.json")
    assert saved.seed == 5 and saved.phantom.seed == 5


def test_full_pipeline(tmp_path, cfg_file, capsys):
    base = ["--config", str(cfg_file), "--deterministic"]
    s, ck, ev = tmp_path / "s", tmp_path / "ck", tmp_path / "ev"
    assert main(base + ["--out", str(s), "synth", "--subjects", "3"]) == 0
    assert main(base + ["--out", str(ck), "train", "--suite", str(s), "--ablate-loss", "long,vol"]) == 0
    saved = RunConfig.load(ck / "run_config.json")
    assert saved.train.weights.lambda_long == 0 and saved.train.weights.lambda_vol == 0
    assert saved.train.weights.lambda_spat == 1
    assert main(base + ["--out", str(ev), "eval", "--suite", str(s), "--checkpoints", str(ck), "--compare", str(ck)]) == 0
    report = json.loads((ev / "report.json").read_text())
    assert {r["dataset"] for r in report["rows"]} == {"PH-2015", "PH-2016", "PH-SEG2", "PH-SEG2+", "PH-VAN"}
    assert "comparison" in report and (ev / "trajectories.svg").exists()
    assert "ρ = " in (ev / "trajectories.svg").read_text()
    capsys.readouterr()
    assert main(["--out", str(tmp_path / "rep"), "report", f"a={ev / 'report.json'}", f"b={ev / 'report.json'}"]) == 0
    assert (tmp_path / "rep" / "ablation_dice.svg").exists()
    inf = tmp_path / "inf"
    assert main(base + ["--out", str(inf), "infer", "--checkpoints", str(ck), "--manifest", str(s / "PH-SEG2" / "manifest.json")]) == 0
    assert len(list(inf.rglob("*.nii"))) == 3 * 4


def test_train_dataset_subset(tmp_path, cfg_file):
    s, ck = tmp_path / "s", tmp_path / "ck"
    main(["--config", str(cfg_file), "--out", str(s), "synth", "--subjects", "2"])
    assert main(["--config", str(cfg_file), "--out", str(ck), "train", "--suite", str(s), "--datasets", "PH-2015,PH-VAN"]) == 0
    assert json.loads((ck / "checkpoints.json").read_text())["datasets"] == ["PH-2015", "PH-VAN"]
    assert main(["--config", str(cfg_file), "--out", str(ck), "train", "--suite", str(s), "--datasets", "NOPE"]) == 1
    assert main(["--config", str(cfg_file), "--out", str(ck), "train", "--suite", str(s), "--ablate-loss", "dice"]) == 1


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--loss", "vol", "--instances", "3"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("PASS vol") and "dice" not in out
    assert main(["gradcheck", "--loss", "nope"]) == 1


def test_gradcheck_failure_exits_2(monkeypatch):
    from hetseg import gradcheck

    def broken(rng, shape):
        fn, arrays, wrt = gradcheck.dice_case(rng, shape)
        return (lambda **kw: (fn(**kw)[0], {"pred": -fn(**kw)[1]["pred"]})), arrays, wrt

    monkeypatch.setitem(gradcheck.CASES, "dice", broken)
    assert main(["gradcheck", "--loss", "dice", "--instances", "1"]) == 2


def test_bad_config_exits_1(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"model": {"depth": 5, "patch_size": [48, 48, 48]}}))
    assert main(["--config", str(p), "gradcheck", "--loss", "vol", "--instances", "1"]) == 1
    assert "error:" in capsys.readouterr().err


def test_console_script_is_installed():
    r = subprocess.run([sys.executable, "-m", "hetseg.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gradcheck" in r.stdout
