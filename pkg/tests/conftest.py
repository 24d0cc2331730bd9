import math
from pathlib import Path

import numpy as np
import pytest

from expertnet.data import Dataset, ingest_dataset, synth_dataset

TESTS_DIR = Path(__file__).parent
REPO_DIR = TESTS_DIR.parent


@pytest.fixture(scope="session")
def synth_tree(tmp_path_factory):
    """A 4-class, 100-per-class, 32x32 grating tree (seed 7), shared."""
    root = tmp_path_factory.mktemp("synth") / "data"
    synth_dataset(root, classes=4, per_class=100, size=32, seed=7)
    return root


@pytest.fixture(scope="session")
def tiny_tree(tmp_path_factory):
    """A small 2-class tree for fast training tests."""
    root = tmp_path_factory.mktemp("tiny") / "data"
    synth_dataset(root, classes=2, per_class=12, size=32, seed=3)
    return root


@pytest.fixture()
def overfit_dataset(tmp_path):
    """35 train-tagged synthetic samples (4 classes, 9 per class, drop one)."""
    root = tmp_path / "overfit"
    synth_dataset(root, classes=4, per_class=9, size=32, seed=5)
    ds = ingest_dataset(root, size=(32, 32))
    ds = Dataset(ds.samples[:35], ds.class_names, ["train"] * 35)
    return ds


def smooth_disk_image(size=64, cycles=2.5):
    """Smooth oriented pattern vignetted inside the inscribed disk: rotating
    it never pushes content out of frame, so round trips only measure
    interpolation loss."""
    yy, xx = np.meshgrid(np.arange(size, dtype=float),
                         np.arange(size, dtype=float), indexing="ij")
    radius = np.hypot(yy - (size - 1) / 2, xx - (size - 1) / 2)
    taper = np.clip((size * 0.41 - radius) / (size * 0.09), 0.0, 1.0)
    taper = 0.5 - 0.5 * np.cos(np.pi * taper)
    wave = 0.5 + 0.4 * np.sin(2 * math.pi * cycles * (0.6 * xx + 0.8 * yy) / size)
    return (taper * wave).astype(np.float32)[None]
