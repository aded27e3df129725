"""Pair-separation statistics over atom records.

Distances within a frame, distance averaging across the frames of a
sequence, lattice-peak histogram fits with the per-peak reliability F_n, the
single-atom loading distribution, and the independent-loading pair model
Q(d).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import curve_fit
from scipy.special import erf

from .errors import CalibrationError, DataError
from .estimator import AtomRecord

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LatticeCalib:
    """Laser wavelength and the lattice constant lambda/2, in nm."""

    lambda_nm: float = 865.9
    site_nm: float | None = None

    def __post_init__(self):
        if self.site_nm is None:
            object.__setattr__(self, "site_nm", self.lambda_nm / 2.0)
        elif abs(self.site_nm - self.lambda_nm / 2.0) > 1e-9 * self.site_nm:
            raise ValueError("site_nm must equal lambda_nm / 2")


@dataclass(frozen=True)
class DistanceSample:
    """One measured pair separation."""

    distance_nm: float
    n_sites: int
    frames_averaged: int = 1
    pair: tuple = ()


@dataclass(frozen=True)
class PeakFit:
    """Fitted histogram peak at d_n = n * site_nm.

    Unpopulated peaks carry amplitude 0 with sigma_n and F_n undefined (None).
    """

    n: int
    center_nm: float
    sigma_n: float | None
    amplitude: float
    F_n: float | None


@dataclass(frozen=True)
class LoadingModel:
    """Gaussian single-atom loading distribution P(x); Q0 counts analyzed pairs."""

    center_nm: float
    sigma_P_nm: float
    Q0: float = 0.0

    def __post_init__(self):
        if not self.sigma_P_nm > 0:
            raise ValueError("sigma_P_nm must be positive")


def _retained(records: list[AtomRecord]) -> list[AtomRecord]:
    """Atoms of ROIs in which every atom passes the reliability criterion."""
    by_roi: dict[tuple, list[AtomRecord]] = {}
    for r in records:
        by_roi.setdefault((r.frame_id, r.roi_id), []).append(r)
    out: list[AtomRecord] = []
    for group in by_roi.values():
        if all(r.reliable for r in group):
            out.extend(group)
    out.sort(key=lambda r: r.position_nm)
    return out


def assign_site_separation(distance_nm: float, lattice: LatticeCalib) -> int:
    """Nearest site multiple for a distance; half-integers round up."""
    if distance_nm < 0:
        raise ValueError("distance must be non-negative")
    return int(math.floor(distance_nm / lattice.site_nm + 0.5))


def pairwise_distances(
    records: list[AtomRecord],
    lattice: LatticeCalib = LatticeCalib(),
) -> list[DistanceSample]:
    """All unordered pair distances among one frame's retained atoms.

    Retained atoms are those of ROIs in which all atoms pass the reliability
    criterion; N retained atoms yield exactly N(N-1)/2 samples.
    """
    frame_ids = {r.frame_id for r in records}
    if len(frame_ids) > 1:
        raise ValueError("pairwise_distances expects the records of a single frame")
    atoms = _retained(records)
    samples = []
    for i in range(len(atoms)):
        for j in range(i + 1, len(atoms)):
            d = abs(atoms[j].position_nm - atoms[i].position_nm)
            samples.append(DistanceSample(
                distance_nm=d,
                n_sites=assign_site_separation(d, lattice),
                frames_averaged=1,
                pair=(atoms[i].frame_id, i, j),
            ))
    return samples


def collect_distances(
    records: list[AtomRecord],
    lattice: LatticeCalib = LatticeCalib(),
) -> list[DistanceSample]:
    """pairwise_distances applied to every frame present in records."""
    by_frame: dict[str, list[AtomRecord]] = {}
    for r in records:
        by_frame.setdefault(r.frame_id, []).append(r)
    out: list[DistanceSample] = []
    for fid in sorted(by_frame):
        out.extend(pairwise_distances(by_frame[fid], lattice))
    return out


def _match_one_to_one(prev: np.ndarray, nxt: np.ndarray, radius: float) -> dict[int, int]:
    """Greedy nearest matching between two sorted position sets within radius."""
    pairs = []
    for i, p in enumerate(prev):
        for j, q in enumerate(nxt):
            d = abs(q - p)
            if d <= radius:
                pairs.append((d, i, j))
    pairs.sort()
    used_i, used_j, match = set(), set(), {}
    for d, i, j in pairs:
        if i in used_i or j in used_j:
            continue
        match[i] = j
        used_i.add(i)
        used_j.add(j)
    return match


def match_and_average(
    records: list[AtomRecord],
    frames_required: int = 3,
    lattice: LatticeCalib = LatticeCalib(),
) -> list[DistanceSample]:
    """Distances averaged over the successive frames of one sequence.

    Atoms are chained across frames by nearest position within half a lattice
    site; only atoms present in all frames_required frames contribute. The
    averaged distance of a pair is the mean of its per-frame distances.
    """
    if frames_required < 1:
        raise ValueError("frames_required must be >= 1")
    seq_ids = {r.sequence_id for r in records}
    if len(seq_ids) > 1:
        raise ValueError("match_and_average expects the records of a single sequence")
    by_frame: dict[str, list[AtomRecord]] = {}
    for r in records:
        by_frame.setdefault(r.frame_id, []).append(r)
    frame_ids = sorted(by_frame)[:frames_required]
    if len(frame_ids) < frames_required:
        log.info("sequence has %d frames < frames_required %d", len(by_frame), frames_required)
        return []
    positions = [np.array([a.position_nm for a in _retained(by_frame[f])]) for f in frame_ids]

    chains = [[i] for i in range(len(positions[0]))]
    current = positions[0].copy()
    radius = lattice.site_nm / 2.0
    for f in range(1, frames_required):
        match = _match_one_to_one(current, positions[f], radius)
        kept = sorted(match)
        chains = [chains[c] + [match[c]] for c in kept]
        current = np.array([positions[f][match[c]] for c in kept])
        dropped = len(positions[f]) - len(chains)
        if dropped:
            log.info("frame %s: %d atoms unmatched", frame_ids[f], dropped)

    seq_id = next(iter(seq_ids)) if seq_ids else ""
    samples = []
    for i in range(len(chains)):
        for j in range(i + 1, len(chains)):
            per_frame = [
                abs(positions[f][chains[j][f]] - positions[f][chains[i][f]])
                for f in range(frames_required)
            ]
            d = float(np.mean(per_frame))
            samples.append(DistanceSample(
                distance_nm=d,
                n_sites=assign_site_separation(d, lattice),
                frames_averaged=frames_required,
                pair=(seq_id, i, j),
            ))
    return samples


def histogram_counts(
    samples: list[DistanceSample],
    lattice: LatticeCalib,
    n_max: int,
) -> tuple[np.ndarray, np.ndarray]:
    """(bin_centers, counts) with site_nm/4 bins whose centers hit n*site_nm."""
    bw = lattice.site_nm / 4.0
    n_bins = 4 * n_max + 3
    centers = np.arange(n_bins) * bw
    edges = np.concatenate([[0.0], centers[:-1] + bw / 2.0, [centers[-1] + bw / 2.0]])
    d = np.array([s.distance_nm for s in samples])
    counts, _ = np.histogram(d, bins=edges)
    return centers, counts.astype(float)


def fit_distance_histogram(
    samples: list[DistanceSample],
    lattice: LatticeCalib,
    n_max: int,
) -> list[PeakFit]:
    """Per-peak Gaussian fit of the distance histogram with fixed centers.

    A sum of Gaussians centered at n*site_nm (n = 1..n_max) is least-squares
    fitted to the binned histogram; amplitudes are bounded below by 0 and
    widths constrained to [5 nm, site_nm/2]. Peaks holding fewer than 3
    samples get amplitude 0 with undefined width, excluded from F_n.
    """
    if len(samples) < 10:
        raise DataError(f"need >= 10 distance samples, got {len(samples)}")
    centers, counts = histogram_counts(samples, lattice, n_max)
    site = lattice.site_nm
    pops = {n: 0 for n in range(1, n_max + 1)}
    for s in samples:
        if 1 <= s.n_sites <= n_max:
            pops[s.n_sites] += 1
    fit_ns = [n for n in range(1, n_max + 1) if pops[n] >= 3]

    results: dict[int, PeakFit] = {}
    if fit_ns:
        def model(d, *params):
            out = np.zeros_like(d)
            for k, n in enumerate(fit_ns):
                A, s_n = params[2 * k], params[2 * k + 1]
                out = out + A * np.exp(-((d - n * site) ** 2) / (2.0 * s_n**2))
            return out

        p0, lo, hi = [], [], []
        for n in fit_ns:
            sel = np.abs(centers - n * site) <= site / 2
            p0.extend([max(counts[sel].max(), 1.0), site / 6.0])
            lo.extend([0.0, 5.0])
            hi.extend([np.inf, site / 2.0])
        try:
            popt, _ = curve_fit(model, centers, counts, p0=p0, bounds=(lo, hi), maxfev=20000)
        except RuntimeError as exc:
            raise DataError(f"histogram fit did not converge: {exc}") from exc
        for k, n in enumerate(fit_ns):
            A, s_n = float(popt[2 * k]), float(popt[2 * k + 1])
            results[n] = PeakFit(
                n=n, center_nm=n * site, sigma_n=s_n, amplitude=A,
                F_n=reliability_Fn(s_n, lattice),
            )
    out = []
    for n in range(1, n_max + 1):
        out.append(results.get(n, PeakFit(n=n, center_nm=n * site, sigma_n=None,
                                          amplitude=0.0, F_n=None)))
    return out


def reliability_Fn(sigma_n: float, lattice: LatticeCalib) -> float:
    """Probability that a distance near d_n is assigned the correct n.

    Area of the peak Gaussian within +-lambda/4 of its center:
    F_n = erf((lambda/4) / (sqrt(2) sigma_n)).
    """
    if not sigma_n > 0:
        raise ValueError("sigma_n must be positive")
    return float(erf((lattice.lambda_nm / 4.0) / (math.sqrt(2.0) * sigma_n)))


def fit_loading(single_atoms, lattice: LatticeCalib = LatticeCalib()) -> LoadingModel:
    """Gaussian fit of the absolute-position histogram of single atoms.

    Accepts AtomRecords or raw positions in nm; needs >= 30 samples.
    """
    positions = np.array([
        r.position_nm if isinstance(r, AtomRecord) else float(r) for r in single_atoms
    ])
    if len(positions) < 30:
        raise DataError(f"need >= 30 single-atom positions, got {len(positions)}")
    spread = float(positions.std())
    if spread <= 0:
        raise CalibrationError("degenerate spread: all positions identical")
    bw = lattice.site_nm
    edges = np.arange(positions.min() - bw, positions.max() + 2 * bw, bw)
    counts, _ = np.histogram(positions, bins=edges)
    mids = 0.5 * (edges[:-1] + edges[1:])

    def gauss(x, A, c, s):
        return A * np.exp(-((x - c) ** 2) / (2.0 * s**2))

    try:
        popt, _ = curve_fit(
            gauss, mids, counts,
            p0=(float(counts.max()), float(positions.mean()), spread),
            maxfev=10000,
        )
    except RuntimeError as exc:
        raise CalibrationError(f"loading fit did not converge: {exc}") from exc
    return LoadingModel(center_nm=float(popt[1]), sigma_P_nm=abs(float(popt[2])), Q0=0.0)


def fit_pair_occurrences(
    samples: list[DistanceSample],
    lattice: LatticeCalib = LatticeCalib(),
    n_max: int = 40,
) -> LoadingModel:
    """Fit Q(d) to a distance histogram: Q0 and sigma_P of independent loading."""
    if len(samples) < 10:
        raise DataError(f"need >= 10 distance samples, got {len(samples)}")
    centers, counts = histogram_counts(samples, lattice, n_max)
    bw = lattice.site_nm / 4.0
    density = counts / bw

    def q(d, q0, s):
        return 2.0 * q0 * np.exp(-(d**2) / (4.0 * s**2)) / (2.0 * math.sqrt(math.pi) * s)

    d_arr = np.array([s.distance_nm for s in samples])
    s0 = max(float(np.sqrt(np.mean(d_arr**2) / 2.0)), bw)
    try:
        popt, _ = curve_fit(q, centers, density, p0=(float(len(samples)), s0), maxfev=10000)
    except RuntimeError as exc:
        raise DataError(f"pair-occurrence fit did not converge: {exc}") from exc
    return LoadingModel(center_nm=0.0, sigma_P_nm=abs(float(popt[1])), Q0=float(popt[0]))


def pair_model_Q(model: LoadingModel, d) -> np.ndarray:
    """Expected pair occurrences per unit distance for independent loading.

    Q(d) = 2 Q0 exp(-d^2 / (4 sigma_P^2)) / (2 sqrt(pi) sigma_P); integrates
    to Q0 over d >= 0.
    """
    d = np.asarray(d, dtype=float)
    s = model.sigma_P_nm
    return 2.0 * model.Q0 * np.exp(-(d**2) / (4.0 * s**2)) / (2.0 * math.sqrt(math.pi) * s)
