import warnings

import numpy as np
import pytest

from glasslab.rs import ValidatedZoneWarning


@pytest.fixture(autouse=True)
def _quiet_validated_zone():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ValidatedZoneWarning)
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
