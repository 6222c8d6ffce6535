import hypothesis
import numpy as np
import pytest

from skillplay.core import Config, validate_config

hypothesis.settings.register_profile("ci", max_examples=200, deadline=None)
hypothesis.settings.load_profile("ci")


@pytest.fixture
def cfg() -> Config:
    return validate_config({})


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240801)
