"""Information rates of two-dimensional finite-state input channels.

The free energy per symbol of the channel posterior is approximated with the
cluster variation method (generalized belief propagation on sliding-window
region graphs) and turned into a Monte-Carlo estimate of the symmetric
information rate.  Exact oracles cover small lattices.
"""

from .exact_oracle import (
    OracleGuardError,
    bpsk_awgn_mutual_information,
    brute_force_log_partition,
    strip_dp_log_partition,
)
from .factor_model import FactorGraph, LogConstantLedger, build_factor_graph, build_pairwise_view
from .gbp_engine import GBPConfig, FreeEnergyEstimate, kikuchi_free_energy, region_beliefs, run_gbp
from .lattice_channel import (
    InputPrior,
    InvalidSpecError,
    LatticeSpec,
    Topology,
    build_interference_matrix,
    realize_channel,
    snr_to_sigma2,
)
from .rate_estimator import Engine, RateEstimate, TrialResult, monte_carlo_sir, rms_error_vs_exact
from .region_graph import RegionGraph, build_region_graph, validate_region_graph

__version__ = "0.1.0"

__all__ = [
    "Engine",
    "FactorGraph",
    "FreeEnergyEstimate",
    "GBPConfig",
    "InputPrior",
    "InvalidSpecError",
    "LatticeSpec",
    "LogConstantLedger",
    "OracleGuardError",
    "RateEstimate",
    "RegionGraph",
    "Topology",
    "TrialResult",
    "bpsk_awgn_mutual_information",
    "brute_force_log_partition",
    "build_factor_graph",
    "build_interference_matrix",
    "build_pairwise_view",
    "build_region_graph",
    "kikuchi_free_energy",
    "monte_carlo_sir",
    "realize_channel",
    "region_beliefs",
    "rms_error_vs_exact",
    "run_gbp",
    "snr_to_sigma2",
    "strip_dp_log_partition",
    "validate_region_graph",
]
