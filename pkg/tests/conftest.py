import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sofsim.data import FeatureArrays, build_windows  # noqa: E402
from sofsim.sofgan import TINY, ModelConfig, train  # noqa: E402
from sofsim.synthetic import toy_tracks, tracks_to_records  # noqa: E402

TOY_TRAIN = 500
TOY_TEST = 200
TOY_EPOCHS = 200
# training headings span +-30 degrees; the held-out set covers every heading,
# so rotation augmentation is what lets the model generalise
TRAIN_HEADINGS = math.pi / 6


@dataclass
class ToySets:
    train: list
    test: list
    test_feats: FeatureArrays
    turning: np.ndarray


@dataclass
class ToyRun:
    model: object
    history: list
    checkpoint: Path
    wall_time: float


def make_toy_sets(seed: int = 0, n_train: int = TOY_TRAIN, n_test: int = TOY_TEST) -> ToySets:
    rng = np.random.default_rng(seed)
    train_tracks, _ = toy_tracks(n_train, rng, heading_range=TRAIN_HEADINGS)
    test_tracks, kinds = toy_tracks(n_test, rng)
    train_set = build_windows(tracks_to_records(train_tracks))
    test_set = build_windows(tracks_to_records(test_tracks))
    return ToySets(train_set, test_set, FeatureArrays.from_batches(test_set), kinds > 0)


@pytest.fixture(scope="session")
def toy_sets() -> ToySets:
    return make_toy_sets()


@pytest.fixture(scope="session")
def toy_run(toy_sets, tmp_path_factory) -> ToyRun:
    """The default-size model trained once per session on the toy set."""
    path = tmp_path_factory.mktemp("toy") / "model.ckpt"
    start = time.perf_counter()
    model, history = train(toy_sets.train, ModelConfig(), TOY_EPOCHS, seed=0, checkpoint=path)
    return ToyRun(model, history, path, time.perf_counter() - start)


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    """A TINY model trained for one epoch on a handful of toy tracks."""
    tracks, _ = toy_tracks(16, np.random.default_rng(0))
    path = tmp_path_factory.mktemp("tiny") / "tiny.ckpt"
    train(build_windows(tracks_to_records(tracks)), TINY, 1, seed=0, checkpoint=path)
    return path
