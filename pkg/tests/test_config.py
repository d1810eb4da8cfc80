"""
Tests of the run configuration: TOML loading, validation and the
stage-scoped model hash.
"""

import os
from dataclasses import replace

import pytest

from lanediff import __datapath__
from lanediff.config import DiffusionConfig
from lanediff.config import ModelConfig
from lanediff.config import RefineConfig
from lanediff.config import RunConfig
from lanediff.config import TrainConfig
from lanediff.config import threads
from lanediff.errors import ConfigError
from lanediff.scene import SceneConfig


def write(tmp_path, text):
    path = tmp_path / "run.toml"
    path.write_text(text)
    return path


def test_shipped_defaults_match_desk_preset():
    cfg = RunConfig.from_toml(os.path.join(__datapath__, "desk.toml"))
    assert cfg == RunConfig.desk()


def test_partial_file_keeps_defaults(tmp_path):
    cfg = RunConfig.from_toml(write(tmp_path, "seed = 3\n[diffusion]\nT = 5\nkappa = 1\n"))
    assert cfg.seed == 3
    assert cfg.diffusion.T == 5
    assert cfg.diffusion.kappa == 1.0
    assert isinstance(cfg.diffusion.kappa, float)
    assert cfg.diffusion.p == DiffusionConfig().p
    assert cfg.model == ModelConfig()


def test_full_preset(tmp_path):
    cfg = RunConfig.from_toml(write(tmp_path, 'preset = "full"\n[train]\nbatch = 4\n'))
    assert cfg.model.token_dim == 256
    assert cfg.model.layers == 6
    assert cfg.train.batch == 4
    assert cfg.train.lr == RunConfig.full().train.lr
    assert cfg.paths.out == "runs/full"


@pytest.mark.parametrize(
    "text, match",
    [
        ("[scenery]\nlane_count = [1, 2]\n", "Unknown configuration sections"),
        ("[scene]\nlanes = 2\n", r"Unknown keys in section \[scene\]"),
        ("scene = 3\n", "must be a table"),
        ("[diffusion]\nT = 1\n", r"Invalid section \[diffusion\]"),
        ('[refine]\nvariant = "concat_mlp"\n', r"Invalid section \[refine\]"),
        ("seed = -1\n", "non-negative integer"),
        ('preset = "huge"\n', "Unknown preset"),
        ("[scene\n", "Invalid TOML"),
    ],
)
def test_invalid_files(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig.from_toml(write(tmp_path, text))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="File not found"):
        RunConfig.from_toml(tmp_path / "nope.toml")


def test_snapshot_is_json_ready():
    snap = RunConfig.desk().snapshot()
    assert snap["scene"]["window"] == [[-15.0, 15.0], [-30.0, 30.0]]
    assert snap["model"]["denoiser_widths"] == [16, 32]
    assert RunConfig.from_dict(snap) == RunConfig.desk()


def test_model_hash_is_stage_scoped():
    base = RunConfig.desk()
    hashes = {stage: base.model_hash(stage) for stage in ("I", "II", "III", "baseline")}
    assert hashes["baseline"] == hashes["I"]
    assert len(set(hashes.values())) == 3

    refined = replace(base, refine=RefineConfig(variant="add_fc"))
    assert refined.model_hash("I") == hashes["I"]
    assert refined.model_hash("II") == hashes["II"]
    assert refined.model_hash("III") != hashes["III"]

    diffused = replace(base, diffusion=DiffusionConfig(T=10))
    assert diffused.model_hash("I") == hashes["I"]
    assert diffused.model_hash("II") != hashes["II"]
    assert diffused.model_hash("III") != hashes["III"]

    resized = replace(base, model=ModelConfig(channels=4))
    assert all(resized.model_hash(s) != hashes[s] for s in hashes)


def test_model_hash_ignores_training_settings():
    base = RunConfig.desk()
    other = replace(base, train=TrainConfig(epochs=(1, 1, 1)), seed=9, scene=replace(base.scene, lane_count=(1, 1)))
    assert other.model_hash() == base.model_hash()
    resolution = replace(base, scene=SceneConfig(resolution=1.875))
    assert resolution.model_hash("I") != base.model_hash("I")


def test_model_hash_of_unknown_stage():
    with pytest.raises(ValueError, match="Unknown stage"):
        RunConfig.desk().model_hash("IV")


def test_threads(monkeypatch):
    monkeypatch.delenv("LANEDIFF_THREADS", raising=False)
    assert threads() == 1
    monkeypatch.setenv("LANEDIFF_THREADS", "4")
    assert threads() == 4
    monkeypatch.setenv("LANEDIFF_THREADS", "many")
    with pytest.raises(ConfigError, match="must be an integer"):
        threads()
    monkeypatch.setenv("LANEDIFF_THREADS", "0")
    with pytest.raises(ConfigError, match="at least 1"):
        threads()


def test_section_validation():
    with pytest.raises(ValueError, match="positive integer"):
        ModelConfig(channels=0)
    with pytest.raises(ValueError, match="even"):
        ModelConfig(embed_dim=5)
    with pytest.raises(ValueError, match="do not divide"):
        ModelConfig(channels=6, norm_groups=4)
    with pytest.raises(ValueError, match="weight_mode"):
        DiffusionConfig(weight_mode="paper")
    with pytest.raises(ValueError, match="paradigm"):
        DiffusionConfig(paradigm="joint")
    with pytest.raises(ValueError, match="three non-negative"):
        TrainConfig(epochs=(1, 1))
    with pytest.raises(ValueError, match="three positive"):
        TrainConfig(lr=(1e-3, 0.0, 1e-3))
