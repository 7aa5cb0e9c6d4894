import numpy as np
import pytest

from moeptq.calib_balance import synthetic_calibration
from moeptq.model import MoEConfig, OutlierSpec, generate_synthetic

OUTLIER_CHANNELS = (3, 17, 40)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_model():
    return generate_synthetic(MoEConfig(d=16, n=4, k=2, hidden=24, layers=2, vocab=64), seed=3)


@pytest.fixture(scope="session")
def outlier_model():
    cfg = MoEConfig(d=64, n=8, k=2, hidden=128, layers=2, vocab=256)
    return generate_synthetic(cfg, seed=0, outliers=OutlierSpec.uniform(OUTLIER_CHANNELS, 20.0), skew=1.5)


@pytest.fixture(scope="session")
def outlier_calib(outlier_model):
    return synthetic_calibration(outlier_model, seed=0, num_seqs=32, seq_len=64)
