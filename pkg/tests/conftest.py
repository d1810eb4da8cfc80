"""
Shared fixtures of the lanediff test suite.

End-to-end training tests carry the ``slow`` marker and only run with
``LANEDIFF_SLOW=1``.
"""

import os

import numpy as np
import pytest

from lanediff.config import DiffusionConfig
from lanediff.config import ModelConfig
from lanediff.config import PathsConfig
from lanediff.config import RunConfig
from lanediff.config import TrainConfig
from lanediff.lane_graph import Polyline
from lanediff.lane_graph import SegmentGraph
from lanediff.metrics import MetricConfig
from lanediff.scene import DegradeConfig
from lanediff.scene import SceneConfig


def pytest_collection_modifyitems(config, items):
    if os.environ.get("LANEDIFF_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="end-to-end training, set LANEDIFF_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def straight_lane():
    """A single 30 m lane along the y axis, points every 2 m."""
    y = np.arange(-15.0, 15.1, 2.0)
    return SegmentGraph([Polyline(np.column_stack([np.zeros_like(y), y]))])


@pytest.fixture
def y_split():
    """
    Trunk from (0, -20) to (0, 0) splitting into a left and a right branch.

    Segment 0 is the trunk, segments 1 and 2 the branches; the adjacency is
    0 -> 1 and 0 -> 2.
    """
    trunk = Polyline(np.column_stack([np.zeros(11), np.linspace(-20.0, 0.0, 11)]))
    left = Polyline(np.column_stack([np.linspace(0.0, -4.0, 11), np.linspace(0.0, 20.0, 11)]))
    right = Polyline(np.column_stack([np.linspace(0.0, 4.0, 11), np.linspace(0.0, 20.0, 11)]))
    return SegmentGraph.from_pairs([trunk, left, right], [(0, 1), (0, 2)])


@pytest.fixture
def tiny_config(tmp_path):
    """
    A run configuration small enough for unit tests of the pipeline.

    A 3.75 m resolution gives 16 x 8 rasters.
    """
    return RunConfig(
        scene=SceneConfig(resolution=3.75, lane_count=(2, 2), junction_prob=0.5),
        degrade=DegradeConfig(boxes=(0, 1), sigma=0.05, dropout=0.0),
        model=ModelConfig(
            channels=4,
            token_dim=8,
            layers=1,
            queries=4,
            n_points=6,
            embed_dim=4,
            decoder_dim=8,
            pos_dim=2,
            norm_groups=2,
            denoiser_widths=(4, 8),
            denoiser_groups=2,
            temb_dim=4,
        ),
        diffusion=DiffusionConfig(T=3, sample_runs=2),
        train=TrainConfig(train_scenes=3, val_scenes=2, epochs=(1, 1, 1), batch=2),
        eval=MetricConfig(pair_samples=20, spacing=1.0),
        paths=PathsConfig(out=str(tmp_path / "run")),
        seed=7,
    )
