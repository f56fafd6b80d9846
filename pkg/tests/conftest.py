import os

import pytest
from hypothesis import HealthCheck, settings

from tbqkd import default_setup

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=400)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def defaults():
    return default_setup()


@pytest.fixture
def ideal_link(defaults):
    """Lossless, noiseless, perfect-visibility link (dead time kept)."""
    from dataclasses import replace
    _, link = defaults
    return replace(link, channel_loss=0.0, dark_rate=0.0, e_intrinsic_z=0.0, visibility_x=1.0,
                   crosstalk_coeff=0.0, baseline_noise=0.0)
