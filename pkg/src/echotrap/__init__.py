"""Runaway repetitive decoding in attention models, at desk scale.

A toy attention encoder-decoder plus the decoding-time machinery the
phenomenon depends on: length-normalized beam search with shallow LM fusion,
a Poisson output-length predictor with multiple-of-prediction truncation,
and attention/output diagnostics.
"""

from echotrap.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
