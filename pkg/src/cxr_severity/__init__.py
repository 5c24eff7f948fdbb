"""Light-weight CNN for two-level airspace severity grading of chest X-rays."""

from .errors import CxrError
from .model import NetworkSpec, PEPEBlockSpec, build_network, predict_severity
from .tensor import Tape, Tensor, backward

__all__ = ["CxrError", "NetworkSpec", "PEPEBlockSpec", "Tape", "Tensor", "backward",
           "build_network", "predict_severity"]
__version__ = "0.1.0"
