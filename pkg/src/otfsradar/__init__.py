"""OTFS-based joint radar and communication: simulation, detection and estimation."""
from .errors import CalibrationError, ConfigurationError, DomainError, SingularFisherError
from .otfs import OtfsConfig, PulseShape, generate_symbols, isfft, psi_approx, psi_exact, sfft
from .channel import LinkBudget, Scenario, Target, UlaArray, simulate_rx, steering_vector
from .beamforming import build_schedule, design_codebook, synth_fista
from .detector import CfarConfig, SearchGrid, detect_all
from .estimator import estimate_all
from .crlb import ParamVector, crlb, fisher_matrix

__all__ = [
    "CalibrationError", "ConfigurationError", "DomainError", "SingularFisherError",
    "OtfsConfig", "PulseShape", "generate_symbols", "isfft", "psi_approx", "psi_exact", "sfft",
    "LinkBudget", "Scenario", "Target", "UlaArray", "simulate_rx", "steering_vector",
    "build_schedule", "design_codebook", "synth_fista",
    "CfarConfig", "SearchGrid", "detect_all", "estimate_all",
    "ParamVector", "crlb", "fisher_matrix",
]
