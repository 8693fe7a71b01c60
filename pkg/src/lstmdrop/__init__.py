"""Deep LSTM language models with dropout on non-recurrent connections only."""
from .dropout import DropoutConfig
from .kernels import BACKEND
from .model import LayerParams, LstmState, ModelParams
from .training import PRESETS, TrainConfig

__version__ = "0.1.0"

__all__ = ["BACKEND", "DropoutConfig", "LayerParams", "LstmState", "ModelParams",
           "PRESETS", "TrainConfig"]
