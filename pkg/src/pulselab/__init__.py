"""System-parameter representation learning for time series from dynamical systems."""

from .estimators import LinearProbe, PulseEncoder
from .model import PulseConfig, PulseModel
from .train import TrainConfig, Variant

__all__ = ["LinearProbe", "PulseConfig", "PulseEncoder", "PulseModel", "TrainConfig", "Variant"]
__version__ = "0.1.0"
