"""Diffusion-model anomaly detection for multivariate KPI time series."""

from .errors import DataError, NumericError
from .nd import Tensor, fft_causal_convolve, gradient_of_scalar
from .optim import AdamState, adam_step, init_adam

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "NumericError",
    "Tensor",
    "fft_causal_convolve",
    "gradient_of_scalar",
    "AdamState",
    "adam_step",
    "init_adam",
]
