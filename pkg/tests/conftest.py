"""Shared fixtures and forward-render oracles.

The oracles here build profiles directly from the closed-form kernel, so the
estimator tests never depend on the code paths they are checking.
"""

import numpy as np
import pytest

from latticefit.lsf import LsfModel
from latticefit.pipeline import Frame, NoiseEstimate, Profile
from latticefit.simulate import SimConfig
from latticefit.stats import LatticeCalib

PIXEL_NM = 294.6
SIGMA_SP_NM = 810.0
SIGMA_PX = SIGMA_SP_NM / PIXEL_NM      # 2.7494 px
LAMBDA_NM = 865.9
SITE_NM = LAMBDA_NM / 2.0              # 432.95 nm
SITE_PX = SITE_NM / PIXEL_NM           # 1.4696 px


@pytest.fixture
def lattice() -> LatticeCalib:
    return LatticeCalib()


@pytest.fixture
def lsf_paper() -> LsfModel:
    """Gaussian kernel at the measured spot width."""
    return LsfModel(form="gaussian", sigma_px=SIGMA_PX)


@pytest.fixture
def lsf_narrow() -> LsfModel:
    """Narrower kernel whose tails vanish well inside short windows."""
    return LsfModel(form="gaussian", sigma_px=1.6)


def render_profile(lsf: LsfModel, m: int, a0: float, atoms) -> np.ndarray:
    """Oracle: y[i] = a0 + sum_k amp_k * L(i - xi_k) on an m-px window."""
    x = np.arange(m, dtype=float)
    y = np.full(m, float(a0))
    for amp, xi in atoms:
        y += amp * lsf.evaluate(x - xi)
    return y


def quiet_frame(width=64, height=8, value=100.0, pixel_scale=PIXEL_NM) -> Frame:
    return Frame(values=np.full((height, width), value), pixel_scale=pixel_scale)


def bright_config(**overrides) -> SimConfig:
    """Deterministic-geometry simulator config for high-confidence renders."""
    base = dict(thermal_jitter_nm=0.0, drift_nm_per_s=0.0)
    base.update(overrides)
    return SimConfig(**base)


def noiseless_config(**overrides) -> SimConfig:
    base = dict(shot_noise=False, readout_sigma=0.0,
                thermal_jitter_nm=0.0, drift_nm_per_s=0.0)
    base.update(overrides)
    return SimConfig(**base)


def flat_noise(baseline: float, sigma: float) -> NoiseEstimate:
    return NoiseEstimate(baseline=baseline, sigma=sigma)


def profile_of(values) -> Profile:
    return Profile(np.asarray(values, dtype=float))
