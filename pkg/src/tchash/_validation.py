"""Input checks shared by the estimators.

These wrap numpy conversion and raise the package's own exception types so
callers can catch a dimension problem without caring which module found it.
"""

import numpy as np

from .errors import DimensionMismatch, EmptyInput


def check_matrix(X, *, n_features=None, name="X", allow_empty=False):
    """Return ``X`` as a finite 2-D float array."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1 and n_features is not None and X.size == n_features:
        X = X[None]
    if X.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {X.shape}")
    if not allow_empty and X.shape[0] == 0:
        raise EmptyInput(f"{name} has no rows")
    if n_features is not None and X.shape[1] != n_features:
        raise DimensionMismatch(f"{name} has {X.shape[1]} features, expected {n_features}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinity")
    return X


def check_vector(x, *, size=None, name="x"):
    """Return ``x`` as a finite 1-D float array."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-D, got shape {x.shape}")
    if size is not None and x.size != size:
        raise DimensionMismatch(f"{name} has length {x.size}, expected {size}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains NaN or infinity")
    return x


def check_blocks(X, *, n_frames=None, n_features=None, name="blocks"):
    """Return ``X`` as a float array of shape ``(n, N, S)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise DimensionMismatch(f"{name} must be (n, N, S), got shape {X.shape}")
    if n_frames is not None and X.shape[1] != n_frames:
        raise DimensionMismatch(f"{name} has {X.shape[1]} frames per block, expected {n_frames}")
    if n_features is not None and X.shape[2] != n_features:
        raise DimensionMismatch(f"{name} has {X.shape[2]} features, expected {n_features}")
    return X


def check_positive(value, name, *, strict=True):
    if strict and not value > 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
    if not strict and not value >= 0:
        raise ValueError(f"{name} must be non-negative, got {value!r}")
    return value
