"""Synthetic fluorescence frames with exact ground truth.

Atoms load onto lattice sites from a Gaussian distribution, pairs sharing a
site are removed (light-induced loss), an optional mid-exposure loss gives an
atom a fractional survival, and each frame renders elliptical Gaussian spots
over a constant baseline with Poisson shot noise and Gaussian readout noise.
The manifest of true sites, positions, and survivals is the oracle used by
every quantitative test.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .pipeline import Frame, SENSOR_MAX

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    """All simulator knobs; defaults follow the measured imaging constants."""

    width: int = 128
    height: int = 24
    pixel_scale: float = 294.6        # nm per pixel in the object plane
    sigma_sp_hor: float = 810.0       # horizontal spot width, nm
    sigma_ver: float = 1000.0         # vertical spot width, nm
    site_nm: float = 432.95           # lattice constant lambda/2
    lattice_offset_nm: float = 0.0    # object-plane position of site 0
    I_a: float = 60000.0              # integrated counts of one atom
    baseline: float = 400.0           # stray-light background counts per pixel
    shot_noise: bool = True
    readout_sigma: float = 20.0       # Gaussian readout noise, counts
    loading_center_nm: float | None = None   # default: frame center
    loading_sigma_nm: float = 9.5 * 432.95
    mean_atoms: float = 4.0
    fixed_n: int | None = None
    on_site_loss: bool = True
    mid_exposure_loss_prob: float = 0.0
    thermal_jitter_nm: float = 23.0
    drift_nm_per_s: float = 12.0
    frames_per_sequence: int = 3
    exposure: float = 1.0             # seconds
    n_sequences: int = 1

    def __post_init__(self):
        if min(self.width, self.height) <= 0:
            raise ValueError("frame size must be positive")
        if min(self.pixel_scale, self.sigma_sp_hor, self.sigma_ver, self.site_nm,
               self.I_a, self.loading_sigma_nm) <= 0:
            raise ValueError("lengths and I_a must be positive")
        if not 0 <= self.mid_exposure_loss_prob <= 1:
            raise ValueError("mid_exposure_loss_prob must be in [0, 1]")

    @property
    def center_nm(self) -> float:
        if self.loading_center_nm is not None:
            return self.loading_center_nm
        return self.width / 2.0 * self.pixel_scale


@dataclass(frozen=True)
class AtomTruth:
    site: int
    position_nm: float


@dataclass
class SequenceTruth:
    """Ground truth for one sequence: atoms plus per-frame survival fractions.

    survival has shape (frames_per_sequence, n_atoms); an atom lost during
    exposure k carries its sampled fraction in row k, 1 before, 0 after.
    """

    sequence_id: str
    atoms: list[AtomTruth]
    survival: np.ndarray
    seed: int | None = None

    def frame_truth(self, k: int) -> list[tuple[int, float, float]]:
        return [
            (a.site, a.position_nm, float(self.survival[k, i]))
            for i, a in enumerate(self.atoms)
        ]


def sample_loading(config: SimConfig, rng: np.random.Generator) -> SequenceTruth:
    """Draw one loading realization.

    The atom count is Poisson (or fixed_n); site indices come from the
    discretized Gaussian loading distribution. With on_site_loss every atom on
    a multiply-occupied site is removed. With probability
    mid_exposure_loss_prob an atom is lost during a uniformly chosen exposure
    of the sequence, with survival fraction uniform in (0, 1) for that frame.
    """
    n = config.fixed_n if config.fixed_n is not None else int(rng.poisson(config.mean_atoms))
    center_idx = (config.center_nm - config.lattice_offset_nm) / config.site_nm
    sigma_idx = config.loading_sigma_nm / config.site_nm
    sites = np.round(rng.normal(center_idx, sigma_idx, size=n)).astype(int)

    if config.on_site_loss and n > 0:
        values, counts = np.unique(sites, return_counts=True)
        lost = set(values[counts >= 2].tolist())
        sites = np.array([s for s in sites if s not in lost], dtype=int)

    atoms = [
        AtomTruth(site=int(s), position_nm=float(s * config.site_nm + config.lattice_offset_nm))
        for s in sites
    ]
    f = config.frames_per_sequence
    survival = np.ones((f, len(atoms)))
    for i in range(len(atoms)):
        if config.mid_exposure_loss_prob > 0 and rng.random() < config.mid_exposure_loss_prob:
            loss_frame = int(rng.integers(f))
            survival[loss_frame, i] = rng.uniform(0.0, 1.0)
            survival[loss_frame + 1:, i] = 0.0
    return SequenceTruth(sequence_id="", atoms=atoms, survival=survival)


def render_frame(
    atoms: list[tuple[float, float]],
    config: SimConfig,
    rng: np.random.Generator | None = None,
    time_offset_s: float = 0.0,
    frame_id: str = "",
    sequence_id: str = "",
) -> Frame:
    """Render one frame from (position_nm, survival) atoms.

    Expected counts are baseline + sum of elliptical Gaussian spots whose
    vertical factor is normalized to sum exactly 1 over the frame rows, so
    vertical binning of a noiseless render reproduces
    survival * I_a * L(x - xi) + height * baseline identically. The horizontal
    center is perturbed by thermal jitter and by drift * time_offset. Noise:
    Poisson on the expected counts (shot_noise) plus Gaussian readout noise,
    clipped to the sensor range.
    """
    if rng is None:
        rng = np.random.default_rng()
    sx = config.sigma_sp_hor / config.pixel_scale
    sy = config.sigma_ver / config.pixel_scale
    cols = np.arange(config.width, dtype=float)
    rows_y = np.arange(config.height, dtype=float)
    v = np.exp(-0.5 * ((rows_y - (config.height - 1) / 2.0) / sy) ** 2)
    v /= v.sum()

    expected = np.full((config.height, config.width), float(config.baseline))
    for position_nm, surv in atoms:
        if surv <= 0:
            continue
        center = position_nm + config.drift_nm_per_s * time_offset_s
        if config.thermal_jitter_nm > 0:
            center += rng.normal(0.0, config.thermal_jitter_nm)
        cx = center / config.pixel_scale
        if not (0 <= cx < config.width):
            log.warning("spot at %.1f px outside frame of width %d", cx, config.width)
        h = np.exp(-0.5 * ((cols - cx) / sx) ** 2) / (sx * math.sqrt(2.0 * math.pi))
        expected += surv * config.I_a * np.outer(v, h)

    if config.shot_noise:
        values = rng.poisson(expected).astype(float)
    else:
        values = expected.copy()
    if config.readout_sigma > 0:
        values += rng.normal(0.0, config.readout_sigma, size=values.shape)
    np.clip(values, 0.0, SENSOR_MAX, out=values)
    return Frame(
        values=values,
        pixel_scale=config.pixel_scale,
        frame_id=frame_id,
        sequence_id=sequence_id,
        exposure=config.exposure,
    )


@dataclass
class Campaign:
    """Rendered dataset: frames plus the ground-truth manifest."""

    frames: list[Frame]
    truths: list[SequenceTruth]
    manifest: dict


def run_campaign(config: SimConfig, seed: int) -> Campaign:
    """Render n_sequences loading realizations, frames_per_sequence each.

    Every sequence draws from its own child of the master seed, so serial and
    parallel execution produce identical datasets; the same seed always yields
    the same campaign.
    """
    master = np.random.SeedSequence(seed)
    children = master.spawn(config.n_sequences)
    frames: list[Frame] = []
    truths: list[SequenceTruth] = []
    for s, child in enumerate(children):
        rng = np.random.default_rng(child)
        truth = sample_loading(config, rng)
        truth.sequence_id = f"s{s:05d}"
        truth.seed = seed
        truths.append(truth)
        for k in range(config.frames_per_sequence):
            atoms = [
                (a.position_nm, float(truth.survival[k, i]))
                for i, a in enumerate(truth.atoms)
            ]
            frames.append(render_frame(
                atoms, config, rng,
                time_offset_s=k * config.exposure,
                frame_id=f"{truth.sequence_id}_f{k}",
                sequence_id=truth.sequence_id,
            ))
    manifest = {
        "seed": seed,
        "config": asdict(config),
        "sequences": [
            {
                "sequence_id": t.sequence_id,
                "atoms": [asdict(a) for a in t.atoms],
                "survival": t.survival.tolist(),
            }
            for t in truths
        ],
    }
    return Campaign(frames=frames, truths=truths, manifest=manifest)
