import numpy as np
import pytest

from gear.data import SyntheticSpec, generate_synthetic, synthetic_manifest, to_arrays
from gear.model import GearModel
from gear.training import TrainConfig


@pytest.fixture(scope="session")
def tiny_spec():
    return SyntheticSpec(n_train=64, n_test=48, d_a=4, d_v=4, l_t=5, l_a=3, l_v=3, n_filler=6, seed=3)


@pytest.fixture(scope="session")
def tiny_data(tiny_spec):
    train, test = generate_synthetic(tiny_spec)
    return synthetic_manifest(tiny_spec), train, test


@pytest.fixture()
def tiny_cfg():
    return TrainConfig(d_s=8, heads=2, d_text=6, d_hidden=6, batch_size=8, max_epochs=3,
                       swap_epoch=1, patience=3)


@pytest.fixture()
def tiny_model(tiny_data, tiny_cfg):
    manifest, _, _ = tiny_data
    return GearModel(tiny_cfg.model_config(manifest), seed=5)


@pytest.fixture()
def batch4(tiny_data):
    manifest, train, _ = tiny_data
    return to_arrays(train[:4], manifest)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
