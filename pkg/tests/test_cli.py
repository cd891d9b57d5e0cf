import json

import pytest
import yaml

from refinelab import pipeline
from refinelab.checkpoint import CheckpointError
from refinelab.cli import main, run
from refinelab.config import ConfigError, build_config, flag_overrides, load_config
from refinelab.metrics import read_csv

TINY = {
    "experiment_id": "tiny",
    "dataset": {"n_train": 60, "n_test": 40},
    "attack": {"poison_rate": 0.2},
    "classifier": {"arch": "convnet", "arch_kwargs": {"widths": [4, 8]}, "epochs": 1, "batch_size": 16,
                   "lr": 0.05, "decay_epochs": []},
    "refine": {"epochs": 1, "batch_size": 16, "width": 4, "depth": 1, "optimizer": "adam", "lr": 1e-3,
               "decay_epochs": []},
    "adaptive": {"gamma": 0.2, "inner_steps": 1},
    "blackbox": {"surrogate_arch": "convnet", "distill": {"arch_kwargs": {"widths": [4]}, "epochs": 1,
                                                          "batch_size": 16, "lr": 0.05, "decay_epochs": []}},
    "sweep": {"pad_sizes": [0, 2]},
    "diagnostics": {"max_points": 16},
}


@pytest.fixture()
def cfg_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump({**TINY, "out": str(tmp_path / "run")}))
    return path


def test_defaults_use_full_length_schedules():
    cfg = build_config()
    assert cfg.classifier.epochs == 150 and cfg.refine.decay_factor == 0.8
    assert cfg.refine.tau == 0.1 and cfg.refine.lam == 0.5
    assert cfg.sweep.pad_sizes == [0, 2, 4, 6]


def test_invalid_config_lists_offending_keys():
    with pytest.raises(ConfigError) as info:
        build_config({"refine": {"tau": -1, "bogus": 3}, "attack": {"variant": "wanet"}})
    assert set(info.value.keys) == {"refine.tau", "refine.bogus", "attack.variant"}


def test_flags_override_config(cfg_file):
    cfg = load_config(cfg_file, flag_overrides(seed=7, lam=0.9, tau=0.2, no_scl=True, pad_sizes=[0, 4]))
    assert cfg.seeds.data == cfg.seeds.mapping == 7
    assert (cfg.refine.lam, cfg.refine.tau, cfg.ablation.no_scl) == (0.9, 0.2, True)
    assert cfg.sweep.pad_sizes == [0, 4]
    assert cfg.classifier.epochs == 1  # config value beats default


def test_epoch_flag_trims_milestones():
    cfg = build_config({}, flag_overrides(epochs=50))
    assert cfg.classifier.decay_epochs == [] and cfg.refine.epochs == 50
    cfg = build_config({}, flag_overrides(epochs=120))
    assert cfg.classifier.decay_epochs == [100]


def test_config_hash_ignores_output_dir():
    a, b = build_config({"out": "x"}), build_config({"out": "y"})
    assert a.config_hash() == b.config_hash()
    assert build_config({"refine": {"lam": 0.3}}).config_hash() != a.config_hash()


def test_data_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("REFINELAB_DATA_ROOT", str(tmp_path))
    cfg = build_config({"dataset": {"format": "folders", "root": "cifar"}})
    assert cfg.descriptor().root == str(tmp_path / "cifar")


def test_missing_upstream_checkpoint(cfg_file, capsys):
    with pytest.raises(pipeline.DependencyError, match="classifier.ckpt"):
        run("eval", cfg_file)
    assert main(["eval", "--config", str(cfg_file)]) == 3
    assert "classifier.ckpt" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("refine:\n  tau: 0\n")
    assert main(["defend", "--config", str(path)]) == 2
    assert "refine.tau" in capsys.readouterr().err


def test_full_stage_chain(cfg_file, tmp_path):
    out = tmp_path / "run"
    assert main(["attack", "--config", str(cfg_file)]) == 0
    assert main(["defend", "--config", str(cfg_file)]) == 0
    for d in ("none", "refine", "shrinkpad"):
        assert main(["eval", "--config", str(cfg_file), "--defense", d]) == 0
    rows = read_csv(out / "metrics.csv")
    assert {r["defense"] for r in rows} == {"none", "refine", "shrinkpad_S0", "shrinkpad_S2"}
    for r in rows:
        assert r["config_hash"] and json.loads(r["seeds"])["mapping"] == 0 and r["code_version"]
    report = json.loads((out / "reports" / "badnets__refine.json").read_text())
    assert report["config"]["experiment_id"] == "tiny" and report["diagnostics"]["alpha"] == "not estimated"

    # re-evaluating upserts instead of duplicating
    assert main(["eval", "--config", str(cfg_file), "--defense", "none"]) == 0
    assert len(read_csv(out / "metrics.csv")) == len(rows)

    assert main(["ablate", "--config", str(cfg_file)]) == 0
    ablation = read_csv(out / "ablation.csv")
    assert [r["defense"] for r in ablation] == ["none", "refine", "refine_no_hrf", "refine_no_scl"]

    assert main(["sweep", "--config", str(cfg_file), "--pad-sizes", "0,2,4"]) == 0
    assert [r["pad_size"] for r in read_csv(out / "sweep.csv")] == ["0", "2", "4"]

    assert main(["report", "--config", str(cfg_file)]) == 0
    first = (out / "summary.md").read_text(), (out / "summary.csv").read_text()
    assert main(["report", "--config", str(cfg_file)]) == 0
    assert ((out / "summary.md").read_text(), (out / "summary.csv").read_text()) == first
    assert "config " in first[0]


def test_ablate_reuses_matching_defense(cfg_file, tmp_path):
    run("attack", cfg_file)
    path = run("defend", cfg_file)
    stamp = path.stat().st_mtime_ns
    cfg = load_config(cfg_file)
    assert pipeline.run_defend(cfg, variant="full", reuse=True) == path
    assert path.stat().st_mtime_ns == stamp


def test_adaptive_and_blackbox_stages(cfg_file, tmp_path):
    out = tmp_path / "run"
    run("attack", cfg_file)
    rows = run("adaptive", cfg_file)
    assert [r["attack"] for r in rows] == ["badnets+adaptive"] * 2
    assert (out / "adaptive" / "classifier.ckpt").is_file() and (out / "adaptive" / "defense.ckpt").is_file()
    rows = run("blackbox", cfg_file)
    assert [r["defense"] for r in rows] == ["oracle_none", "blackbox_refine"]
    assert (out / "blackbox" / "surrogate.ckpt").is_file()


def test_eval_rejects_wrong_checkpoint_kind(cfg_file, tmp_path):
    out = tmp_path / "run"
    run("attack", cfg_file)
    (out / "defense.ckpt").write_bytes((out / "classifier.ckpt").read_bytes())
    with pytest.raises(CheckpointError):
        run("eval", cfg_file)


def test_runs_are_deterministic(tmp_path):
    rows = []
    for name in ("a", "b"):
        cfg = build_config({**TINY, "out": str(tmp_path / name)})
        pipeline.run_attack(cfg)
        pipeline.run_defend(cfg)
        pipeline.run_eval(cfg, "none")
        pipeline.run_eval(cfg, "refine")
        rows.append((tmp_path / name / "metrics.csv").read_text())
    assert rows[0] == rows[1]
