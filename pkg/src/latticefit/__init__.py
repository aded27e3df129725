"""Sub-diffraction localization of single atoms in a 1D optical lattice.

Recovers individual atom positions from fluorescence images by fitting a
spike-convolution model: segmentation, atom counting by cumulative
integration, trigonometric-moment position estimates, linear least-squares
amplitudes, Levenberg-Marquardt refinement, and a per-atom reliability
filter; plus pair-separation statistics and a ground-truth simulator.
"""

from .errors import (
    CalibrationError,
    ConditioningError,
    CountSignalError,
    DataError,
    InsufficientBackgroundError,
    LatticefitError,
    UnderResolvedError,
)
from .estimator import (
    AnalysisCalib,
    AtomRecord,
    CountResult,
    SpikeFit,
    analyze_frame,
    check_reliability,
    count_atoms,
    fit_amplitudes,
    locate_spikes,
    refine,
)
from .lsf import LsfModel, fit_lsf, load_lsf, lsf_fourier, save_lsf, stack_isolated
from .pipeline import (
    Frame,
    NoiseEstimate,
    Profile,
    Roi,
    SegmentParams,
    bin_vertical,
    estimate_background,
    segment,
)
from .simulate import AtomTruth, Campaign, SequenceTruth, SimConfig, render_frame, \
    run_campaign, sample_loading
from .stats import (
    DistanceSample,
    LatticeCalib,
    LoadingModel,
    PeakFit,
    assign_site_separation,
    collect_distances,
    fit_distance_histogram,
    fit_loading,
    fit_pair_occurrences,
    histogram_counts,
    match_and_average,
    pair_model_Q,
    pairwise_distances,
    reliability_Fn,
)

__version__ = "0.1.0"
