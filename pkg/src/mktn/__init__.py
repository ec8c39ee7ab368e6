"""Multi-pair temporal sentence grounding with cross-pair knowledge transfer."""

from .config import Ablations, ModelConfig
from .model import MKTN

__version__ = "0.1.0"

__all__ = ["Ablations", "ModelConfig", "MKTN", "__version__"]
