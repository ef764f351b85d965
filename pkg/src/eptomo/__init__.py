"""Electron-photon joint state tomography, entanglement analysis and simulation.

Basis convention used throughout the package (electron factor first)::

    index 0: |L, H>    index 1: |L, V>    index 2: |R, H>    index 3: |R, V>

Every 4x4 operator in the package is expressed in this ordering.
"""

from eptomo.qmat import (
    bell_state,
    herm_eigh,
    herm_eigvals,
    partial_transpose,
    state_fidelity,
    tensor,
    werner_state,
)
from eptomo.polopt import (
    CountRecord,
    MeasurementEffect,
    WaveplateSetting,
    electron_phase_effect,
    joint_effect_set,
    photon_effect,
    scan_effect_set,
    waveplate_jones,
)
from eptomo.mle import QubitMLETomography, bloch, bloch_angle, mle_qubit
from eptomo.bayes import (
    BayesianStateTomography,
    ChainConfig,
    PosteriorSamples,
    log_likelihood,
    pcn_step,
    rho_from_params,
    run_chains,
)
from eptomo.diagnostics import autocorrelation, effective_sample_size, gelman_rubin
from eptomo.entangle import (
    CoherenceSpec,
    LocalChannelSpec,
    bell_fidelity_opt,
    coherence_correct,
    concurrence,
    entanglement_of_formation,
    ppt_min_eigenvalue,
)
from eptomo.events import (
    CoincidenceGate,
    FringeFitter,
    background_subtract,
    coincidence_histogram,
    extract_fringe,
    find_coincidence_window,
    fit_fringe,
)
from eptomo.simkit import ExperimentTruth, simulate_counts, simulate_events, simulate_scan

__version__ = "0.1.0"
