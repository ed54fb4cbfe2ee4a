"""Input validation helpers shared by the estimators and free functions."""

import math

import numpy as np

from .exceptions import (
    ConfigInvalid,
    DimensionMismatch,
    LambdaOutOfRange,
    NonFiniteValue,
    NonPositiveScale,
)


def check_vector(v, name="vector"):
    """Return ``v`` as a finite 1-D float64 array."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DimensionMismatch(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{name} contains NaN or Inf")
    return arr


def check_matrix(m, name="matrix", n_cols=None):
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if n_cols is not None and arr.shape[1] != n_cols:
        raise DimensionMismatch(f"{name} has {arr.shape[1]} columns, expected {n_cols}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{name} contains NaN or Inf")
    return arr


def check_same_dim(a, b):
    if a.shape[-1] != b.shape[-1]:
        raise DimensionMismatch(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def check_positive(x, name):
    x = float(x)
    if not math.isfinite(x) or x <= 0.0:
        raise NonPositiveScale(f"{name} must be finite and > 0, got {x}")
    return x


def check_lambda(lam):
    lam = float(lam)
    if not (0.0 <= lam <= 1.0):
        raise LambdaOutOfRange(f"lambda must lie in [0, 1], got {lam}")
    return lam


def check_fraction(x, key, lo=0.0, hi=1.0, open_lo=False, open_hi=False):
    """Range check used by config dataclasses; error names the config key."""
    try:
        x = float(x)
    except (TypeError, ValueError):
        raise ConfigInvalid(f"{key}: expected a number, got {x!r}") from None
    bad_lo = x <= lo if open_lo else x < lo
    bad_hi = x >= hi if open_hi else x > hi
    if bad_lo or bad_hi or not math.isfinite(x):
        lb = "(" if open_lo else "["
        rb = ")" if open_hi else "]"
        raise ConfigInvalid(f"{key}: {x} outside {lb}{lo}, {hi}{rb}")
    return x


def check_int(x, key, minimum=None):
    if isinstance(x, bool) or not isinstance(x, (int, np.integer)):
        raise ConfigInvalid(f"{key}: expected an integer, got {x!r}")
    if minimum is not None and x < minimum:
        raise ConfigInvalid(f"{key}: must be >= {minimum}, got {x}")
    return int(x)
