"""Two-stage recurrent classifier with input-space domain adaptation and
loss-distribution divergence metrics, on a float64 numpy autodiff core."""

from .dataio import Dataset, ShiftSpec, Trial, Window, WindowConfig
from .divergence import DivergenceReport, HistogramConfig, LossDistribution
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DriftbenchError,
    NumericError,
    ParseError,
    SegmentationError,
    ShapeError,
    SpecError,
    TrainingError,
)
from .model import AdapterParams, ClassifierParams, ModelConfig
from .tensor import Tensor
from .trainer import TrainConfig, TrainReport

__version__ = "0.1.0"
