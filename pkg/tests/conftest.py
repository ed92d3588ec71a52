import numpy as np
import pytest

from fpfilter import coeffs, hitting


@pytest.fixture(scope="session")
def ou_drift():
    return coeffs.DriftSpec.affine(0.0, -1.0)


@pytest.fixture(scope="session")
def clipped_obs():
    return coeffs.ObsSpec.linear_clipped(0.5, 2.0)


@pytest.fixture(scope="session")
def point_init():
    return coeffs.InitialLaw.point(1.0)


@pytest.fixture(scope="session")
def ou_hitting():
    return hitting.HittingModel.ou(1.0)


def assert_within_sigma(value, target, sigma, n_sigma=3.0, label=""):
    gap = abs(value - target)
    assert gap <= n_sigma * sigma, (
        f"{label}: {value} vs {target} differs by {gap:.3g} "
        f"> {n_sigma} sigma = {n_sigma * sigma:.3g}")
