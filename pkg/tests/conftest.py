import numpy as np
import pytest

from config import build_config, compose_document
from gan_models import Activation, MlpSpec, ParamVector

TINY_OVERRIDES = [
    "data.n_per_client=64",
    "data.reference_size=64",
    "model.z_dim=4",
    "model.g_hidden=[8]",
    "model.d_hidden=[8]",
    "training.n_clients=3",
    "training.rounds=3",
    "training.batch_size=16",
    "training.eval_every=2",
    "training.eval_samples=64",
    "detection.warmup=1",
    "detection.n_trees=20",
]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config(tmp_path):
    """Build a small resolved RunConfig; extra overrides win over the tiny defaults."""

    def make(*overrides, preset=None, file_doc=None):
        doc = compose_document(file_doc or {}, preset, [*TINY_OVERRIDES, f"output_root={tmp_path / 'runs'}", *overrides])
        return build_config(doc)

    return make


@pytest.fixture
def tiny_gan():
    """Generator 3->5->2 and discriminator 2->4->1 with random parameters."""

    def make(head=Activation.SIGMOID, seed=0, activation=Activation.TANH):
        g_spec = MlpSpec((3, 5, 2), activation, Activation.IDENTITY, init_seed=seed)
        d_spec = MlpSpec((2, 4, 1), activation, head, init_seed=seed + 1)
        r = np.random.default_rng(seed)
        g = ParamVector(g_spec, r.normal(0.0, 0.5, g_spec.n_params))
        d = ParamVector(d_spec, r.normal(0.0, 0.5, d_spec.n_params))
        return g, d

    return make
