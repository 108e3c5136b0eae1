import numpy as np
import pytest

from persona import experiments as E
from persona.config import RunConfig
from persona.editor import init_editor
from persona.model import BackboneSpec, init_device_model

TINY = {
    "data.n_devices": "30",
    "data.seq_len": "40",
    "data.vocab_size": "120",
    "data.n_clusters": "6",
    "data.n_archetypes": "3",
    "persona.groups": "3",
    "persona.window": "10",
    "persona.kmeans_restarts": "2",
    "train_dam.epochs": "2",
    "train_editor.epochs": "2",
    "group_prototype.epochs": "1",
    "group_editor.epochs": "1",
}


def tiny_config(**extra) -> RunConfig:
    return RunConfig().with_overrides({**TINY, **{k.replace("__", "."): str(v) for k, v in extra.items()}})


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_run(tiny_cfg):
    """One small trained pipeline shared by the slower tests (treat as read-only)."""
    return E.run_pipeline(tiny_cfg, 0, ("baseline", "persona_s", "persona_m"))


@pytest.fixture
def small_model():
    return init_device_model(BackboneSpec(30, 6, 6, "mean"), [5], seed=3)


@pytest.fixture
def small_editor(small_model):
    return init_editor(30, small_model.adaptive.shapes, seed=4, embed_dim=8, item_dim=5, head_scale=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
