"""Hierarchical autoregressive raw-audio modeling on a self-contained
numpy autodiff engine: quantizer, tiered model, TBPTT trainer, sampler,
synthetic corpora, and a command-line front end."""

import os as _os

# SAMPLERNN_THREADS caps BLAS parallelism; it only takes effect if set
# before numpy first loads, hence here rather than in the CLI.
_threads = _os.environ.get("SAMPLERNN_THREADS", "").strip()
if _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)
del _os, _threads

from .autograd import Tensor, no_grad
from .model import SampleRnn, TierConfig, TierState, count_params
from .quantize import NormStats, QuantizerConfig, dequantize, quantize

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "SampleRnn",
    "TierConfig",
    "TierState",
    "count_params",
    "QuantizerConfig",
    "NormStats",
    "quantize",
    "dequantize",
    "__version__",
]
