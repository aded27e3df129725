"""Exception types shared across the package."""


class LatticefitError(Exception):
    """Base class for all package errors."""


class InsufficientBackgroundError(LatticefitError):
    """Too few background samples to estimate baseline and noise."""


class UnderResolvedError(LatticefitError):
    """Not enough usable Fourier modes (or no signal) to place the requested spikes."""


class ConditioningError(LatticefitError):
    """Linear system too ill-conditioned to solve, e.g. near-duplicate spike positions."""

    def __init__(self, message: str, pair: tuple[float, float] | None = None):
        super().__init__(message)
        self.pair = pair


class CountSignalError(LatticefitError):
    """Integrated ROI signal is significantly negative; baseline misestimate."""


class CalibrationError(LatticefitError):
    """Calibration input unusable (no samples, degenerate spread, fit failure)."""


class DataError(LatticefitError):
    """Malformed or unreadable input data."""
