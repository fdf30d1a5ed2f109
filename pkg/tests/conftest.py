import numpy as np
import pytest

from sineseg.volume_io import Volume, VolumeMeta


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def make_volume(values, modality="CT", spacing=(1.0, 1.0, 1.0), units=""):
    values = np.asarray(values, dtype=np.float32)
    meta = VolumeMeta(values.shape, spacing, modality, units)
    return Volume(meta, values)
