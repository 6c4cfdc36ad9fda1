import numpy as np
import pytest

from optical_signature import pipeline
from optical_signature.channel_sim import SceneConfig
from optical_signature.descriptor import generate_key
from optical_signature.tracks import SynthConfig, synth_track


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run full-size acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


SMALL_SCENE = SceneConfig(cell_px=16.0, offset_px=(16.0, 16.0), texture_seed=3)


@pytest.fixture(scope="session")
def key():
    return generate_key(seed=7)


@pytest.fixture(scope="session")
def small_scene():
    return SMALL_SCENE


@pytest.fixture(scope="session")
def track():
    """Two content windows at the core frame rate."""
    return synth_track(SynthConfig(duration_s=9.0), seed=11)


@pytest.fixture(scope="session")
def embedded(track, key, small_scene):
    cfg = pipeline.EmbedConfig(scene=small_scene, adaptive=False, date=100, unit_id=3)
    return pipeline.embed(track, key, cfg)


@pytest.fixture(scope="session")
def nominal_frames(embedded, small_scene):
    return pipeline.simulate(embedded.schedules, small_scene, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
