"""RGB-D scene labeling with bidirectional LSTM context fusion.

A desk-scale, numpy-backed implementation: HHA depth encoding, dual
convolutional feature paths, vertical context + horizontal fusion LSTM scans,
end-to-end SGD training, and Jaccard-style evaluation, all verified by
gradient checks and synthetic-scene experiments.
"""

from . import precision
from .autodiff import Tape, Tensor

__all__ = ["Tape", "Tensor", "precision"]
__version__ = "0.1.0"
