"""Input validation helpers, in the spirit of ``sklearn.utils.validation``."""

import numpy as np

from .errors import DimensionMismatch, InvalidSparsity, NonFiniteTensor


def check_matrix(a, name="matrix", ndim=2):
    """Return ``a`` as a C-contiguous float64 array of the given rank.

    Rejects NaN/Inf entries and wrong ranks.
    """
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise DimensionMismatch(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteTensor(f"{name} contains non-finite entries")
    return arr


def check_vector(a, name="vector", length=None):
    arr = check_matrix(a, name, ndim=1)
    if length is not None and arr.shape[0] != length:
        raise DimensionMismatch(f"{name} has length {arr.shape[0]}, expected {length}")
    return arr


def check_fraction(value, name="sparsity", *, allow_one=True):
    value = float(value)
    upper_ok = value <= 1.0 if allow_one else value < 1.0
    if not (value >= 0.0 and upper_ok):
        bound = "[0, 1]" if allow_one else "[0, 1)"
        raise InvalidSparsity(f"{name} must lie in {bound}, got {value}")
    return value


def frozen(arr):
    """Mark an array read-only so shared instances cannot be mutated."""
    arr.setflags(write=False)
    return arr
