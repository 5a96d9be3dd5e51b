"""Phase collapse in scattering networks.

Morlet filter banks, complex periodic convolutions, phase-collapsing and
phase-preserving nonlinearities, learned scattering networks with exact
gradients, and numerical checks of the underlying inequalities.
"""

from .estimators import LearnedScatteringClassifier, ScatteringTransform, check_images
from .exceptions import (
    ConfigError,
    DegenerateInputError,
    DivergenceError,
    DomainError,
    FormatError,
    GridError,
    ParameterError,
    PhaseCollapseError,
    SizeError,
)
from .filterbank import Filter, FilterBank, MorletParams, build_bank, spectral_stats
from .learn import Model, SGDConfig, train
from .network import NetworkConfig, ScatteringNetwork
from .theory import TheoremReport

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DegenerateInputError", "DivergenceError", "DomainError", "Filter",
    "FilterBank", "FormatError", "GridError", "LearnedScatteringClassifier", "Model",
    "MorletParams", "NetworkConfig", "ParameterError", "PhaseCollapseError", "SGDConfig",
    "ScatteringNetwork", "ScatteringTransform", "SizeError", "TheoremReport", "build_bank",
    "check_images", "spectral_stats", "train",
]
