"""Simulation and control toolkit for a tweezer atom array beside a nanophotonic chip."""
from .core import (ChipGeometry, Config, ConfigError, ImagingParams, MCParams, ModelError,
                   PlannerParams, RateTable, TweezerArray, TwoPhotonParams, dump_config,
                   load_config, make_rng, parse_config)

__version__ = "0.1.0"

__all__ = [
    "ChipGeometry", "Config", "ConfigError", "ImagingParams", "MCParams", "ModelError",
    "PlannerParams", "RateTable", "TweezerArray", "TwoPhotonParams", "dump_config",
    "load_config", "make_rng", "parse_config", "__version__",
]
