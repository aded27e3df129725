"""Spike-model estimation for one region of interest.

The ROI signal is modeled as a0 + sum_k a_k * L(x - xi_k) + noise. The stages
are: atom number N from cumulative integration, positions from trigonometric
moments of the deconvolved signal (matrix-pencil solve), amplitudes from
linear least squares, joint Levenberg-Marquardt refinement, and a per-atom
reliability flag comparing a_k against the calibrated single-atom signal I_a.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.linalg import hankel, svd

from .errors import ConditioningError, CountSignalError, InsufficientBackgroundError, \
    UnderResolvedError
from .lsf import LsfModel, lsf_fourier
from .pipeline import Frame, NoiseEstimate, SegmentParams, bin_vertical, \
    estimate_background, segment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnalysisCalib:
    """Calibration constants shared by all estimation stages."""

    I_a: float
    lsf: LsfModel
    pixel_scale: float
    reliability_tol: float = 0.20
    mode_cutoff: float = 1e-3
    count_tolerance: float = 0.3

    def __post_init__(self):
        if not self.I_a > 0:
            raise ValueError("I_a must be positive")
        if not 0 < self.reliability_tol < 1:
            raise ValueError("reliability_tol must be in (0, 1)")
        if not 0 < self.mode_cutoff < 1:
            raise ValueError("mode_cutoff must be in (0, 1)")


@dataclass
class SpikeFit:
    """Fitted spike-model parameters for one ROI.

    atoms is a list of (amplitude, position_px) pairs sorted by position;
    positions are in window coordinates of the ROI.
    """

    a0: float
    atoms: list[tuple[float, float]]
    residual_rms: float
    converged: bool = True

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array([a for a, _ in self.atoms], dtype=float)

    @property
    def positions(self) -> np.ndarray:
        return np.array([x for _, x in self.atoms], dtype=float)


@dataclass
class AtomRecord:
    """One recovered atom with its object-plane position in nm."""

    frame_id: str
    sequence_id: str
    roi_id: int
    position_nm: float
    amplitude: float
    reliable: bool
    diagnostics: dict = field(default_factory=dict)


class CountResult(NamedTuple):
    n: int
    cumulative: np.ndarray
    total: float
    ambiguous: bool


def count_atoms(roi_values: np.ndarray, noise: NoiseEstimate, calib: AnalysisCalib) -> CountResult:
    """Atom number from the integrated excess signal in units of I_a.

    N = round(sum(I - a0) / I_a) with half-integers rounding up; the
    cumulative curve (in units of I_a) is returned for step diagnostics. A
    total deviating from the nearest integer by more than count_tolerance
    keeps its N but is flagged ambiguous.
    """
    y = np.asarray(roi_values, dtype=float)
    cumulative = np.cumsum(y - noise.baseline) / calib.I_a
    total = float(cumulative[-1]) if len(cumulative) else 0.0
    if total < -calib.count_tolerance:
        raise CountSignalError(
            f"integrated ROI signal {total:.3f} I_a is below -{calib.count_tolerance} I_a; "
            "baseline likely misestimated"
        )
    n = max(int(math.floor(total + 0.5)), 0)
    ambiguous = abs(total - n) > calib.count_tolerance
    return CountResult(n=n, cumulative=cumulative, total=total, ambiguous=ambiguous)


def _usable_mode_count(lsf: LsfModel, T: int, mode_cutoff: float) -> int:
    """Largest j such that |L_hat(i/T)| >= mode_cutoff for all i <= j."""
    j = np.arange(1, T // 2)
    if len(j) == 0:
        return 0
    mags = np.abs(lsf_fourier(lsf, j / T))
    below = np.nonzero(mags < mode_cutoff)[0]
    return int(below[0]) if len(below) else len(j)


def locate_spikes(
    roi_values: np.ndarray,
    a0: float,
    n_atoms: int,
    lsf: LsfModel,
    mode_cutoff: float = 1e-3,
    noise_sigma: float = 0.0,
) -> np.ndarray:
    """Spike positions from trigonometric moments of the deconvolved ROI.

    The zero-meaned window is Fourier transformed (zero-padded to the next
    power of two, length T); coefficients are deconvolved by the LSF transform
    to give moments m_j ~ sum_k a_k exp(-2 pi i j xi_k / T), restricted to
    modes with |L_hat| >= mode_cutoff. A matrix-pencil (generalized
    eigenvalue) solve on the Hankel matrix of the moment sequence yields N
    unit-magnitude roots; positions are their arguments mapped into the window.

    With noise_sigma > 0 the deconvolution is Wiener-regularized,
    m_j = Y_j conj(L_hat) / (|L_hat|^2 + mu^2) with mu the noise-to-signal
    ratio of the Fourier coefficients; modes whose deconvolved content would
    be noise-dominated are thereby tapered smoothly instead of amplified.
    noise_sigma = 0 reproduces the plain division exactly.

    Returns n_atoms positions (px, window coordinates), sorted ascending.
    """
    y = np.asarray(roi_values, dtype=float) - a0
    m = len(y)
    if n_atoms == 0:
        return np.empty(0)
    if n_atoms < 0:
        raise ValueError("n_atoms must be non-negative")
    T = 1 << (max(m, 2) - 1).bit_length()
    j_max = _usable_mode_count(lsf, T, mode_cutoff)
    if 2 * j_max + 1 < 2 * n_atoms + 1:
        raise UnderResolvedError(
            f"{2 * j_max + 1} usable Fourier modes cannot resolve {n_atoms} spikes"
        )

    Y = np.fft.fft(y, T)
    total = float(Y[0].real)
    if not np.any(y != 0.0):
        raise UnderResolvedError("ROI carries no signal above the baseline")

    j = np.arange(-j_max, j_max + 1)
    Yj = np.where(j >= 0, Y[j % T], np.conj(Y[(-j) % T]))
    Lh = np.asarray(lsf_fourier(lsf, j / T))
    if noise_sigma > 0:
        if total <= 0:
            raise UnderResolvedError("no integrated excess signal to deconvolve")
        mu = noise_sigma * math.sqrt(m) / total
    else:
        mu = 0.0
    moments = Yj * np.conj(Lh) / (np.abs(Lh) ** 2 + mu**2)

    P = len(moments)
    L = P // 2
    H = hankel(moments[: P - L], moments[P - L - 1:])
    _, _, Vh = svd(H)
    # Row space of H is spanned by the conjugates of the right singular
    # vectors, hence no conjugation here; conjugating would mirror positions.
    Vs = Vh[:n_atoms, :].T
    z = np.linalg.eigvals(np.linalg.pinv(Vs[:-1, :]) @ Vs[1:, :])
    z = z / np.abs(z)

    xi = (-T * np.angle(z) / (2.0 * np.pi)) % T
    center = m / 2.0
    xi = center + ((xi - center + T / 2.0) % T) - T / 2.0
    xi = np.clip(xi, 0.0, m - 1e-9)
    return np.sort(xi)


def fit_amplitudes(
    roi_values: np.ndarray,
    a0: float,
    positions: np.ndarray,
    lsf: LsfModel,
) -> np.ndarray:
    """Linear least-squares amplitudes at fixed baseline and positions."""
    y = np.asarray(roi_values, dtype=float) - a0
    positions = np.asarray(positions, dtype=float)
    if len(positions) == 0:
        return np.empty(0)
    order = np.argsort(positions)
    sorted_pos = positions[order]
    gaps = np.diff(sorted_pos)
    if len(gaps) and gaps.min() < 1e-6:
        k = int(np.argmin(gaps))
        raise ConditioningError(
            f"positions {sorted_pos[k]:.6f} and {sorted_pos[k + 1]:.6f} are "
            "closer than 1e-6 px",
            pair=(float(sorted_pos[k]), float(sorted_pos[k + 1])),
        )
    x = np.arange(len(y), dtype=float)
    B = lsf.evaluate(x[:, None] - positions[None, :])
    amps, *_ = np.linalg.lstsq(B, y, rcond=None)
    if not np.all(np.isfinite(amps)):
        raise ConditioningError("amplitude solve produced non-finite values")
    return amps


def _model_and_jacobian(x, p, n, lsf, want_jac=True):
    a0 = p[0]
    amps = p[1:1 + n]
    xis = p[1 + n:]
    diffs = x[:, None] - xis[None, :]
    L = lsf.evaluate(diffs)
    model = a0 + L @ amps
    if not want_jac:
        return model, None
    J = np.empty((len(x), 1 + 2 * n))
    J[:, 0] = -1.0
    J[:, 1:1 + n] = -L
    J[:, 1 + n:] = lsf.derivative(diffs) * amps[None, :]
    return model, J


def refine(
    roi_values: np.ndarray,
    initial: SpikeFit,
    lsf: LsfModel,
    calib: AnalysisCalib,
    max_iter: int = 50,
) -> SpikeFit:
    """Joint Levenberg-Marquardt refinement of a0, amplitudes and positions.

    Damped normal-equation steps are accepted only when they lower the cost,
    so the final residual never exceeds the initial one. Convergence is a
    relative cost decrease < 1e-10 or a position step < 1e-6 px within
    max_iter iterations; if no acceptable step exists away from a stationary
    point, the initial fit is returned with converged = False.
    """
    y = np.asarray(roi_values, dtype=float)
    x = np.arange(len(y), dtype=float)
    n = len(initial.atoms)
    if n < 1:
        raise ValueError("refine needs at least one spike")
    p = np.concatenate([[initial.a0], initial.amplitudes, initial.positions])
    pos_lo, pos_hi = -2.0, len(y) + 1.0

    model, _ = _model_and_jacobian(x, p, n, lsf, want_jac=False)
    r = y - model
    cost = float(r @ r)
    initial_cost = cost
    lam = 1e-3
    converged = False
    accepted_any = False

    for _ in range(max_iter):
        model, J = _model_and_jacobian(x, p, n, lsf)
        r = y - model
        g = J.T @ r
        G = J.T @ J
        diag = np.diag(G).copy()
        floor = 1e-8 * max(float(diag.mean()), 1e-30)
        step = None
        for _ in range(30):
            A = G + lam * (np.diag(diag) + floor * np.eye(len(p)))
            try:
                cand = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            p_new = p + cand
            xis_new = p_new[1 + n:]
            if np.any(xis_new < pos_lo) or np.any(xis_new > pos_hi):
                lam *= 10.0
                continue
            model_new, _ = _model_and_jacobian(x, p_new, n, lsf, want_jac=False)
            r_new = y - model_new
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                step = cand
                p = p_new
                rel_drop = (cost - cost_new) / max(cost, 1e-300)
                cost = cost_new
                lam = max(lam * 0.3, 1e-12)
                accepted_any = True
                break
            lam *= 10.0
        if step is None:
            # Stationary (or numerically so): no damped step improves the cost.
            grad_scale = float(np.max(np.abs(g))) / max(cost, 1e-300)
            converged = accepted_any or cost == 0.0 or grad_scale < 1e-6
            break
        if rel_drop < 1e-10 or float(np.max(np.abs(step[1 + n:]))) < 1e-6:
            converged = True
            break

    if not accepted_any and not converged:
        return SpikeFit(
            a0=initial.a0,
            atoms=sorted(initial.atoms, key=lambda t: t[1]),
            residual_rms=math.sqrt(initial_cost / len(y)),
            converged=False,
        )
    a0 = float(p[0])
    atoms = sorted(zip(p[1:1 + n].tolist(), p[1 + n:].tolist()), key=lambda t: t[1])
    return SpikeFit(
        a0=a0,
        atoms=[(float(a), float(xi)) for a, xi in atoms],
        residual_rms=math.sqrt(cost / len(y)),
        converged=converged,
    )


def check_reliability(fit: SpikeFit, calib: AnalysisCalib) -> list[bool]:
    """Per-atom flags: amplitude within reliability_tol of I_a."""
    return [abs(a - calib.I_a) / calib.I_a < calib.reliability_tol for a, _ in fit.atoms]


def _merge_close(atoms: list[tuple[float, float]], radius_px: float) -> list[tuple[float, float]]:
    """Collapse spikes closer than radius_px into single summed-amplitude spikes.

    Two spikes landing on top of each other are one physical signal (a
    degenerate fit or a double occupancy); their merged amplitude then fails
    the reliability comparison against a single I_a.
    """
    atoms = sorted(atoms, key=lambda t: t[1])
    merged = True
    while merged and len(atoms) > 1:
        merged = False
        for k in range(len(atoms) - 1):
            (a1, x1), (a2, x2) = atoms[k], atoms[k + 1]
            if x2 - x1 < radius_px:
                total = a1 + a2
                pos = (a1 * x1 + a2 * x2) / total if total > 0 else 0.5 * (x1 + x2)
                atoms[k:k + 2] = [(total, pos)]
                merged = True
                break
    return atoms


def analyze_frame(
    frame: Frame,
    calib: AnalysisCalib,
    seg_params: SegmentParams = SegmentParams(),
    rows: tuple[int, int] | None = None,
    merge_radius_px: float = 0.5,
) -> list[AtomRecord]:
    """Full single-frame pipeline: bin, segment, count, locate, fit, filter.

    Stage errors are contained per ROI: a failing ROI contributes no records
    and a logged diagnostic, and never aborts the frame. Returned records are
    ordered by (roi_id, position).
    """
    profile = bin_vertical(frame, rows)
    first = estimate_background(profile, [])
    rois = segment(profile, first, seg_params)
    try:
        noise = estimate_background(profile, rois)
    except InsufficientBackgroundError:
        noise = first
    rois = segment(profile, noise, seg_params)

    records: list[AtomRecord] = []
    for roi in rois:
        y = profile.intensities[roi.start:roi.end]
        try:
            count = count_atoms(y, noise, calib)
        except CountSignalError as exc:
            log.warning("frame %s roi %d: %s", frame.frame_id, roi.roi_id, exc)
            continue
        if count.ambiguous:
            log.info(
                "frame %s roi %d: ambiguous count (total %.3f I_a); skipped",
                frame.frame_id, roi.roi_id, count.total,
            )
            continue
        if count.n == 0:
            continue
        try:
            xi = locate_spikes(
                y, noise.baseline, count.n, calib.lsf,
                mode_cutoff=calib.mode_cutoff, noise_sigma=noise.sigma,
            )
            amps = fit_amplitudes(y, noise.baseline, xi, calib.lsf)
        except (UnderResolvedError, ConditioningError) as exc:
            log.warning("frame %s roi %d: %s", frame.frame_id, roi.roi_id, exc)
            continue
        amps = np.clip(amps, 0.05 * calib.I_a, None)
        init = SpikeFit(
            a0=noise.baseline,
            atoms=sorted(zip(amps.tolist(), xi.tolist()), key=lambda t: t[1]),
            residual_rms=0.0,
        )
        fit = refine(y, init, calib.lsf, calib)

        atoms = [(a, x) for a, x in fit.atoms if 0.0 <= x < roi.width]
        dropped = len(fit.atoms) - len(atoms)
        atoms = _merge_close(atoms, merge_radius_px)
        n_merged = len(fit.atoms) - dropped - len(atoms)
        kept = [(a, x) for a, x in atoms if a > 0]
        if dropped or len(atoms) - len(kept):
            log.info(
                "frame %s roi %d: dropped %d out-of-window and %d non-positive spikes",
                frame.frame_id, roi.roi_id, dropped, len(atoms) - len(kept),
            )
        for a, x in kept:
            reliable = abs(a - calib.I_a) / calib.I_a < calib.reliability_tol
            position_nm = (profile.origin + roi.start + x) * calib.pixel_scale
            records.append(AtomRecord(
                frame_id=frame.frame_id,
                sequence_id=frame.sequence_id,
                roi_id=roi.roi_id,
                position_nm=float(position_nm),
                amplitude=float(a),
                reliable=bool(reliable),
                diagnostics={
                    "residual_rms": fit.residual_rms,
                    "converged": fit.converged,
                    "count_total": count.total,
                    "merged_spikes": n_merged,
                },
            ))
    records.sort(key=lambda r: (r.roi_id, r.position_nm))
    return records
