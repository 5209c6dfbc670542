from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Dict

import numpy as np
import pytest

from lrlc_core.tensor_ops import numeric_mode
from lrlc_experiments.config import DATA_ROOT_ENV
from support import IMAGE_SIZE, TEST_EXAMPLES, TRAIN_EXAMPLES, VALIDATION_SIZE, bar_images, write_mnist


def pytest_collection_modifyitems(config: pytest.Config, items: list) -> None:
    if os.environ.get(DATA_ROOT_ENV):
        return
    skip = pytest.mark.skip(reason=f"set {DATA_ROOT_ENV} to a directory holding real MNIST files")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def test_mode():
    with numeric_mode(test_mode=True) as mode:
        yield mode


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def data_root(tmp_path: Path) -> Path:
    """Dataset root holding a tiny two-class bar-orientation set in MNIST IDX format."""

    generator = np.random.default_rng(7)
    train_labels = np.tile([0, 1], TRAIN_EXAMPLES // 2)
    test_labels = np.tile([0, 1], TEST_EXAMPLES // 2)
    root = tmp_path / "data"
    write_mnist(
        root / "mnist",
        bar_images(train_labels, IMAGE_SIZE, generator),
        train_labels,
        bar_images(test_labels, IMAGE_SIZE, generator),
        test_labels,
    )
    return root


@pytest.fixture
def raw_config(data_root: Path, tmp_path: Path) -> Dict[str, Any]:
    return {
        "name": "bars",
        "output_dir": str(tmp_path / "run"),
        "data": {"name": "mnist", "root": str(data_root), "validation_size": VALIDATION_SIZE},
        "model": {"depth": 3, "channels": 4},
        "training": {"epochs": 1, "batch_size": 16, "warmup_epochs": 0, "test_mode": True},
        "sweep": {"kinds": ["conv", "lrlc"], "ranks": [2], "placements": ["third"], "seeds": [0]},
    }


@pytest.fixture
def config_file(raw_config: Dict[str, Any], tmp_path: Path) -> Path:
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(raw_config), encoding="utf-8")
    return path
