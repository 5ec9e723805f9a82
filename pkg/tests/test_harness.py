import csv
import math

import numpy as np
import pytest
import torch

from repil.bench import GridWorldConfig
from repil.dataio import write_dataset
from repil.bench import generate_demonstrations
from repil.harness import (
    FAILURE_MARKER, ConfigError, ExperimentConfig, SuiteConfig, report_suite, run_experiment,
    run_suite)
from repil.harness.cli import main
from repil.models import load_checkpoint

TINY_TASK = {"grid_size": 4, "render_size": 16, "n_train_layouts": 6, "n_test_layouts": 4,
             "max_episode_steps": 8, "min_start_goal_distance": 2}
FAST_BC = {"training_batches": 12, "batch_size": 8, "augmentation": "default"}
FAST_EVAL = {"n_episodes": 4}


def _cfg(name, **kw) -> dict:
    d = {"name": name, "task": dict(TINY_TASK), "data": {"n_demos": 3}, "eval": dict(FAST_EVAL)}
    if "gail" not in kw:
        d["bc"] = dict(FAST_BC)
    d.update(kw)
    return d


@pytest.fixture(autouse=True)
def _output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("REPIL_OUTPUT_ROOT", str(tmp_path / "runs"))


# ---------------------------------------------------------------------------- config


def test_config_roundtrip_and_defaults():
    cfg = ExperimentConfig.from_dict(_cfg("a", regime="pretrain",
                                          repl={"algorithm": "TemporalCPC", "training_batches": 3}))
    assert cfg.repl.name == "TemporalCPC" and cfg.repl.offset == 8
    assert cfg.repl.training_batches == 3 and cfg.aux_weight == 1.0
    assert ExperimentConfig.from_toml(cfg.to_toml()) == cfg
    assert len(cfg.bc.augmentation.ops) == 4
    none = ExperimentConfig.from_dict(_cfg("b", bc={**FAST_BC, "augmentation": "none"}))
    assert none.bc.augmentation.ops == ()


@pytest.mark.parametrize("bad", [
    {"colour": 1},
    {"task": {**TINY_TASK, "walls": 3}},
    {"bc": {**FAST_BC, "lr": 1.0}},
    {"regime": "joint"},                                      # joint needs repl
    {"regime": "control", "repl": {"algorithm": "VAE"}},      # control forbids repl
    {"regime": "sometimes"},
    {"repl": {"algorithm": "BYOL"}, "regime": "pretrain"},
    {"regime": "pretrain", "repl": {"algorithm": "VAE", "momentum_rate": 0.5}},
    {"eval": {"n_episodes": 0}},
])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(_cfg("x", **bad))


def test_joint_requires_bc():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"name": "x", "regime": "joint", "repl": {"algorithm": "VAE"},
                                    "gail": {}})


# ---------------------------------------------------------------------------- regimes


def _bc_losses(cfg: dict):
    art = run_experiment(ExperimentConfig.from_dict(cfg))
    return [r["total"] if "bc" not in r else r["bc"] for r in art.il_history], art


@pytest.mark.parametrize("algorithm", ["SimCLR", "VAE"])
def test_zero_batch_pretrain_and_zero_weight_joint_match_control(algorithm):
    control, c_art = _bc_losses(_cfg("control", seed=3))
    pre, p_art = _bc_losses(_cfg("pre", seed=3, regime="pretrain",
                                 repl={"algorithm": algorithm, "training_batches": 0}))
    joint, _ = _bc_losses(_cfg("joint", seed=3, regime="joint", aux_weight=0.0,
                               repl={"algorithm": algorithm, "batch_size": 8}))
    assert len(control) == 12
    assert pre == control
    assert joint == control
    for k, v in c_art.policy.head.state_dict().items():
        assert torch.equal(p_art.policy.head.state_dict()[k], v)


def test_joint_loss_identity_and_outputs():
    cfg = ExperimentConfig.from_dict(_cfg("joint", regime="joint", aux_weight=0.5,
                                          repl={"algorithm": "Dynamics", "batch_size": 4}))
    art = run_experiment(cfg)
    for r in art.il_history:
        assert math.isfinite(r["repl"])
        assert r["total"] == pytest.approx(r["bc"] + 0.5 * r["repl"], rel=1e-6)
    assert {"encoder.ckpt", "policy.ckpt", "repl_loss.csv", "bc_metrics.csv", "results.csv",
            "config.toml"} <= set(art.files)


def test_alternating_joint_mode_runs():
    cfg = ExperimentConfig.from_dict(_cfg("alt", regime="joint", joint_mode="alternate",
                                          repl={"algorithm": "SimCLR", "batch_size": 4}))
    art = run_experiment(cfg)
    assert len(art.il_history) == 12 and all(math.isfinite(r["total"]) for r in art.il_history)


def test_pretrain_pipeline_outputs_and_determinism():
    cfg = ExperimentConfig.from_dict(_cfg("vae", regime="pretrain", repl={
        "algorithm": "VAE", "training_batches": 5, "batch_size": 4}))
    art = run_experiment(cfg)
    files = set(art.files)
    assert {"encoder.ckpt", "policy.ckpt", "repl_loss.csv", "bc_metrics.csv", "results.csv",
            "config.toml"} <= files
    assert FAILURE_MARKER not in files
    _, groups = load_checkpoint(art.run_dir / "encoder.ckpt")
    assert list(groups) == ["encoder"]
    assert not any(k.startswith("logvar_head") for k in groups["encoder"])
    first = (art.run_dir / "results.csv").read_bytes()
    # the frozen config reproduces the run bit for bit
    again = ExperimentConfig.load(art.run_dir / "config.toml")
    assert again == cfg
    run_experiment(again)
    assert (art.run_dir / "results.csv").read_bytes() == first
    rows = list(csv.DictReader((art.run_dir / "results.csv").open()))
    assert [r["task"] for r in rows] == ["gridworld", "gridworld-test"]
    # encoder shapes match a control policy's
    control = run_experiment(ExperimentConfig.from_dict(_cfg("control")))
    assert ({k: v.shape for k, v in control.policy.encoder.state_dict().items()}
            == {k: v.shape for k, v in art.policy.encoder.state_dict().items()})


def test_gail_pipeline_smoke():
    gail = {"n_parallel_envs": 2, "steps_per_round": 8, "epochs_per_round": 1,
            "minibatch_size": 8, "disc_batch_size": 8, "total_env_steps": 32}
    cfg = ExperimentConfig.from_dict(_cfg("g", gail=gail, regime="pretrain",
                                          repl={"algorithm": "InverseDynamics",
                                                "training_batches": 2, "batch_size": 4}))
    art = run_experiment(cfg)
    assert len(art.il_history) == 2
    assert {"gail_metrics.csv", "discriminator.ckpt", "policy.ckpt"} <= set(art.files)


def test_failure_leaves_marker(tmp_path):
    cfg = ExperimentConfig.from_dict(_cfg("broken", data={"demos_path": str(tmp_path / "nope")}))
    with pytest.raises(Exception):
        run_experiment(cfg)
    assert (cfg.run_dir / FAILURE_MARKER).exists()
    assert (cfg.run_dir / "config.toml").exists()


# ---------------------------------------------------------------------------- suite and CLI


def _suite_dict(tmp_path):
    return {
        "name": "s",
        "n_seeds": 2,
        "defaults": {"task": dict(TINY_TASK), "data": {"n_demos": 3}, "eval": dict(FAST_EVAL),
                     "bc": dict(FAST_BC)},
        "experiments": [
            {"name": "control"},
            {"name": "control-noaug", "bc": {"augmentation": "none"}},
            {"name": "simclr", "regime": "pretrain",
             "repl": {"algorithm": "SimCLR", "training_batches": 2, "batch_size": 4}},
            {"name": "broken", "data": {"demos_path": str(tmp_path / "missing.repil")}},
        ],
    }


def test_suite_counts_crash_and_report(tmp_path):
    suite = SuiteConfig.from_dict(_suite_dict(tmp_path))
    assert suite.baseline == "control"
    result = run_suite(suite)
    assert result.n_runs == 8 and len(result.failures) == 2
    table = result.table
    assert table.tasks == ["gridworld", "gridworld-test"]
    assert table.algorithms == ["control", "control-noaug", "simclr", "broken"]
    assert table.cells[("gridworld", "broken")] is None
    assert table.cells[("gridworld", "simclr")].n == 2
    md = (suite.suite_dir / "table.md").read_text()
    assert "missing" in md
    rebuilt, missing = report_suite(suite.suite_dir)
    assert rebuilt.to_markdown() == table.to_markdown()
    assert sorted(missing) == [("broken", 0), ("broken", 1)]
    # identical seeds reproduce the identical table
    assert run_suite(suite).table.to_markdown() == md


def test_suite_requires_control_baseline():
    with pytest.raises(ConfigError):
        SuiteConfig.from_dict({"experiments": [
            {"name": "p", "regime": "pretrain", "repl": {"algorithm": "VAE"}}]})


def _write_toml(path, d):
    import tomli_w
    path.write_text(tomli_w.dumps(d))
    return str(path)


def test_cli_commands_and_exit_codes(tmp_path, capsys):
    cfg = _write_toml(tmp_path / "bc.toml", _cfg("cli-bc"))
    assert main(["bc", cfg]) == 0
    assert "return" in capsys.readouterr().out
    assert main(["gail", cfg]) == 2  # wrong trainer for this config
    bad = _write_toml(tmp_path / "bad.toml", _cfg("bad", mystery=1))
    assert main(["bc", bad]) == 2
    rt = _write_toml(tmp_path / "rt.toml", _cfg("cli-repl", regime="pretrain", repl={
        "algorithm": "Dynamics", "training_batches": 2, "batch_size": 4}))
    assert main(["repl-train", rt]) == 0
    out_root = tmp_path / "runs"
    ckpt = out_root / "cli-repl" / "encoder.ckpt"
    assert ckpt.exists()

    task = GridWorldConfig(**TINY_TASK)
    ds_path = tmp_path / "demos.repil"
    write_dataset(generate_demonstrations(task, 2, rng=np.random.default_rng(0)), ds_path)
    assert main(["analyze", "saliency", str(ckpt), str(ds_path), "--out",
                 str(tmp_path / "sal"), "--frames", "2"]) == 0
    assert sorted(p.name for p in (tmp_path / "sal").iterdir()) == ["saliency_0.pgm",
                                                                     "saliency_1.pgm"]
    emb = tmp_path / "emb.csv"
    assert main(["analyze", "embeddings", str(ckpt), str(ds_path), "--out", str(emb)]) == 0
    assert emb.read_text().splitlines()[0].endswith("action,discretized_return,trajectory_id")

    suite = _write_toml(tmp_path / "suite.toml", _suite_dict(tmp_path))
    assert main(["suite", suite, "--seeds", "1"]) == 1  # "broken" crashes
    ok = _suite_dict(tmp_path)
    ok["name"] = "ok"
    ok["experiments"] = ok["experiments"][:2]
    assert main(["suite", _write_toml(tmp_path / "ok.toml", ok), "--seeds", "1"]) == 0
    assert main(["report", str(out_root / "ok")]) == 0
    assert main(["report", str(out_root / "s")]) == 1
    assert main(["report", str(tmp_path / "nowhere")]) == 2
