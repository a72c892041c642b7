"""Relative localization with UWB: PDoA bearing on a tetrahedral antenna
array, double-sided two-way ranging, and the ranging-packet protocol that
carries both over a shared channel."""

from .errors import *  # noqa: F401,F403
from .geometry import AntennaArray, baseline_matrix, build_custom, build_orthogonal, build_rta, paper_matrix
from .channel import NoiseModel, TruePose, synth_iq, synth_phases, synth_twr
from .estimator import (
    CalibrationTable,
    EstimatorConfig,
    RelativeEstimate,
    calibrate_bias,
    estimate_aoa,
    estimate_aoa_batch,
    estimate_relative,
    twr_range,
)
from .protocol import Frame, FrameType, NodeConfig, RppState, crc16, depacketize, packetize, rpp_step
from .sim import (
    ExperimentConfig,
    lowpass_filter,
    measure_throughput,
    run_covariance_experiment,
    run_trajectory_experiment,
)

__version__ = "0.1.0"
