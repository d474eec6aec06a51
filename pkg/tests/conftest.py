import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))  # make `oracles` importable

from latentproto.core import load_dataset
from latentproto.synthdata import SynthConfig, generate


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """A small generated dataset shared by tests that only read it."""
    root = tmp_path_factory.mktemp("synth")
    generate(SynthConfig(images=12, image_size=64, seed=7), root)
    return root


@pytest.fixture(scope="session")
def synth_dataset(synth_root):
    return load_dataset(synth_root, synth_root / "splits.json")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_feature(rng, c=None, h=None, w=None, dtype=torch.float64):
    c = c or int(rng.integers(2, 17))
    h = h or int(rng.integers(2, 9))
    w = w or int(rng.integers(2, 9))
    return torch.from_numpy(rng.standard_normal((c, h, w))).to(dtype)
