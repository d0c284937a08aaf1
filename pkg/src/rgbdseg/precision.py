"""Global numeric precision switch (64-bit default, 32-bit for speed)."""

import numpy as np

_BITS = 64


def set_precision(bits):
    """Select 32- or 64-bit floats for all tensors created afterwards."""
    global _BITS
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits!r}")
    _BITS = bits


def precision_bits():
    return _BITS


def active_dtype():
    return np.float64 if _BITS == 64 else np.float32
