"""
Tests of the three-stage pipeline on a tiny configuration.

Each stage trains for one epoch on three scenes, which is enough to check
the stage boundaries, the checkpoint pairing and determinism. The ablation
sweeps and the default-size comparison against the baseline train many
stages and carry the ``slow`` marker.
"""

import logging
import os
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from lanediff.checkpoint import PARAMS_FILE
from lanediff.checkpoint import load_checkpoint
from lanediff.config import DiffusionConfig
from lanediff.config import RunConfig
from lanediff.errors import ConfigError
from lanediff.errors import NumericalError
from lanediff.metrics import METRICS
from lanediff.metrics import MetricReport
from lanediff.nn import ParamStore
from lanediff.pipeline import baseline
from lanediff.pipeline import compare
from lanediff.pipeline import evaluate
from lanediff.pipeline import make_scenes
from lanediff.pipeline import scene_seed
from lanediff.pipeline import stage1
from lanediff.pipeline import stage2
from lanediff.pipeline import stage3
from lanediff.pipeline import stage_dir
from lanediff.pipeline import sweep
from lanediff.pipeline import train_epochs


def blob(cfg, stage):
    with open(os.path.join(stage_dir(cfg, stage), PARAMS_FILE), "rb") as f:
        return f.read()


@pytest.fixture
def trained_stage1(tiny_config):
    """Tiny configuration with a trained stage I checkpoint."""
    stage1(tiny_config)
    return tiny_config


def test_scene_seeds_are_disjoint_between_splits(tiny_config):
    seeds = {split: {scene_seed(tiny_config, split, i) for i in range(100)} for split in ("train", "val", "test")}
    assert not seeds["train"] & seeds["val"]
    assert not seeds["val"] & seeds["test"]
    with pytest.raises(ValueError, match="Unknown scene split"):
        scene_seed(tiny_config, "holdout", 0)


def test_make_scenes(tiny_config):
    scenes = make_scenes(tiny_config, "val")
    assert len(scenes) == 2
    for scene in scenes:
        assert scene.clean.shape == scene.degraded.shape == (16, 8)
        assert len(scene.graph) >= 2
    again = make_scenes(tiny_config, "val")
    np.testing.assert_array_equal(again[0].degraded, scenes[0].degraded)


def test_stage_chain(trained_stage1):
    cfg = trained_stage1
    first = load_checkpoint(stage_dir(cfg, "I"))
    assert first.extras["epochs"] == 1
    assert set(first.report["aggregate"]) == set(METRICS)

    second = stage2(cfg)
    assert second.stage == "II"
    assert "val_rel_mse_generated" in second.extras
    for name, value in first.params.items():
        np.testing.assert_array_equal(second.params[name], value)

    third = stage3(cfg)
    for name, value in second.params.items():
        np.testing.assert_array_equal(third.params[name], value)
    assert third.count("refine.") > 0 and third.count("dec3.") > 0

    base = baseline(cfg)
    assert base.count("base.") > 0
    assert base.count("denoiser.") == 0

    report = evaluate(stage_dir(cfg, "III"), cfg, out=os.path.join(cfg.paths.out, "eval"))
    assert len(report.per_scene) == 2
    assert all(0.0 <= v <= 1.0 for v in report.aggregate.values())
    loaded = MetricReport.from_json(os.path.join(cfg.paths.out, "eval", "report.json"))
    assert loaded.meta["stage"] == "III"


def test_later_stages_require_their_predecessor(tiny_config):
    with pytest.raises(ConfigError, match="Stage I checkpoint required"):
        stage2(tiny_config)
    with pytest.raises(ConfigError, match="Stage II checkpoint required"):
        stage3(tiny_config)
    with pytest.raises(ConfigError, match="Stage I checkpoint required"):
        baseline(tiny_config)


def test_changed_model_is_rejected(trained_stage1):
    cfg = replace(trained_stage1, model=replace(trained_stage1.model, channels=6, norm_groups=3))
    with pytest.raises(ConfigError, match="configuration hashes to"):
        stage2(cfg)
    with pytest.raises(ConfigError, match="does not match the configuration"):
        evaluate(stage_dir(cfg, "I"), cfg)


def test_diffusion_settings_do_not_invalidate_stage1(trained_stage1):
    cfg = replace(trained_stage1, diffusion=replace(trained_stage1.diffusion, T=2))
    assert stage2(cfg, epochs=0).stage == "II"


def test_resume_without_epochs_is_a_no_op(trained_stage1):
    cfg = trained_stage1
    before = blob(cfg, "I")
    ckpt = stage1(cfg, resume=True)
    assert ckpt.extras["epochs"] == 1
    assert blob(cfg, "I") == before

    more = stage1(cfg, resume=True, epochs=1)
    assert more.extras["epochs"] == 2
    assert len(more.extras["history"]) == 2


def test_training_is_deterministic(tiny_config, tmp_path):
    other = replace(tiny_config, paths=replace(tiny_config.paths, out=str(tmp_path / "other")))
    reports = []
    for cfg in (tiny_config, other):
        stage1(cfg)
        stage2(cfg)
        stage3(cfg)
        out = os.path.join(cfg.paths.out, "eval")
        evaluate(stage_dir(cfg, "III"), cfg, out=out)
        with open(os.path.join(out, "report.json"), "rb") as f:
            reports.append(f.read())
    for stage in ("I", "II", "III"):
        assert blob(tiny_config, stage) == blob(other, stage), stage
    assert reports[0] == reports[1]


def test_full_chain_paradigm(trained_stage1):
    cfg = replace(trained_stage1, diffusion=DiffusionConfig(T=3, paradigm="overall", sample_runs=1))
    assert stage2(cfg).stage == "II"
    too_long = replace(cfg, diffusion=DiffusionConfig(T=6, paradigm="overall", memory_steps=5))
    with pytest.raises(ConfigError, match="exceeds the memory budget"):
        stage2(too_long)


def test_evaluate_rejects_empty_scene_sets(trained_stage1):
    with pytest.raises(ValueError, match="empty scene set"):
        evaluate(stage_dir(trained_stage1, "I"), trained_stage1, scenes=[])
    with pytest.raises(ConfigError, match="Cannot evaluate"):
        evaluate(stage_dir(trained_stage1, "III"), trained_stage1)


def test_train_epochs_rolls_back_on_non_finite_loss(rng):
    store = ParamStore({"net.w": np.array([1.0, 2.0]), "frozen.w": np.array([3.0])})
    calls = []

    def loss_fn(params, i, rng):
        calls.append(i)
        loss = float(np.sum(params["net.w"] ** 2))
        if len(calls) > 2:
            return float("nan"), {}
        return loss, {"net.w": 2.0 * params["net.w"], "frozen.w": np.ones(1)}

    with pytest.raises(NumericalError, match="Non-finite toy loss"):
        train_epochs(store, loss_fn, 2, 3, 0.1, 1, 0.0, rng, ("net.",), "toy")
    # two good steps happened, the third batch left the store untouched
    assert np.all(np.abs(store["net.w"]) < [1.0, 2.0])
    np.testing.assert_array_equal(store["frozen.w"], [3.0])


def test_train_epochs_history(rng, caplog):
    store = ParamStore({"net.w": np.array([1.0, -1.0])})

    def loss_fn(params, i, rng):
        return float(np.sum(params["net.w"] ** 2)), {"net.w": 2.0 * params["net.w"]}

    with caplog.at_level(logging.INFO):
        history = train_epochs(store, loss_fn, 4, 3, 0.05, 2, 0.0, rng, ("net.",), "toy")
    assert len(history) == 3
    assert history[-1] < history[0]
    assert "toy epoch 3/3" in caplog.text
    assert store["net.w"].dtype == np.float64
    np.testing.assert_array_equal(store["net.w"], np.float32(store["net.w"]))


@pytest.mark.slow
def test_refine_sweep(tiny_config):
    table = sweep(tiny_config, "refine")
    assert list(table["setting"]) == ["no_refine", "concat_fc", "concat_ed", "add_fc", "add_ed"]
    counts = dict(zip(table["setting"], table["refine_params"], strict=True))
    assert counts["no_refine"] == 0
    assert counts["add_fc"] < counts["concat_fc"] < counts["concat_ed"]
    assert os.path.exists(os.path.join(tiny_config.paths.out, "sweep_refine.csv"))


@pytest.mark.slow
def test_t_sweep(tiny_config):
    table = sweep(tiny_config, "T")
    assert list(table["setting"]) == ["Sampling T=5", "Sampling T=15", "Sampling T=30", "Overall T=5"]
    assert table[list(METRICS)].notna().all().all()


def test_compare_reports_both_arms_and_their_margin(tiny_config):
    summary = compare(tiny_config, seeds=2)
    assert list(summary.index) == ["III", "baseline", "margin"]
    assert list(summary.columns) == list(METRICS)
    np.testing.assert_allclose(summary.loc["margin"], summary.loc["III"] - summary.loc["baseline"])
    per_seed = pd.read_csv(os.path.join(tiny_config.paths.out, "compare_seeds.csv"))
    assert sorted(zip(per_seed["seed"], per_seed["arm"], strict=True)) == [
        (7, "III"),
        (7, "baseline"),
        (8, "III"),
        (8, "baseline"),
    ]
    first = replace(tiny_config, paths=replace(tiny_config.paths, out=os.path.join(tiny_config.paths.out, "seed0")))
    before = blob(first, "III")
    again = compare(tiny_config, seeds=2)
    assert blob(first, "III") == before
    pd.testing.assert_frame_equal(again, summary)
    with pytest.raises(ValueError, match="at least one seed"):
        compare(tiny_config, seeds=0)
    with pytest.raises(ValueError, match="held-out"):
        compare(tiny_config, split="train")


@pytest.mark.slow
def test_stage3_beats_the_baseline(tmp_path):
    cfg = RunConfig.desk()
    cfg = replace(cfg, paths=replace(cfg.paths, out=str(tmp_path)))
    summary = compare(cfg, seeds=3)
    assert summary.loc["margin", "geo_f1"] > 0
    assert summary.loc["margin", "topo_f1"] > 0
