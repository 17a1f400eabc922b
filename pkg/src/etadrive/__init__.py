"""Asynchronous dual-rate driving policy on a numpy autodiff core.

Subpackages and modules:

- ``tensor`` / ``nn``: reverse-mode autodiff and layers
- ``toyworld``: deterministic driving world, renderer, expert and scenarios
- ``models``: encoders, feature forecaster and action decoder
- ``losses``: action, mask and forecast objectives
- ``scheduler``: cost model, batch planning and the asynchronous runtime
- ``harness``: data collection, sampling, training and evaluation
- ``cli``: the ``etadrive`` command
"""

from .errors import ConfigError, ContractError, DimensionError, NumericError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "DimensionError", "NumericError", "__version__"]
