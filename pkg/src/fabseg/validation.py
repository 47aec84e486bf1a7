"""Input validation for image stacks and binary label masks."""

import numpy as np

from .exceptions import InvalidArgument, ShapeError


def check_images(X, size=None):
    """Return ``X`` as a ``(n, H, W, 3)`` uint8 array; a single image gains a leading axis."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ShapeError(f"expected images shaped (n, H, W, 3), got {X.shape}")
    if X.shape[0] == 0:
        raise ShapeError("no images given")
    if X.dtype != np.uint8:
        if np.issubdtype(X.dtype, np.floating) or X.min() < 0 or X.max() > 255:
            raise InvalidArgument(f"images must hold uint8 values, got dtype {X.dtype}")
        X = X.astype(np.uint8)
    if size is not None and tuple(X.shape[1:3]) != tuple(size):
        raise ShapeError(f"images are {X.shape[1:3]}, the model expects {tuple(size)}")
    return X


def check_masks(y, X, channels=None):
    """Binary masks aligned with images ``X``: ``(n, H, W)`` or ``(n, H, W, channels)``."""
    y = np.asarray(y)
    if X.shape[0] == 1 and y.ndim == (2 if channels is None else 3):
        y = y[None]
    expected = X.shape[:3] if channels is None else (*X.shape[:3], channels)
    if y.shape != expected:
        raise ShapeError(f"labels shaped {y.shape}, expected {expected}")
    if not np.isin(y, (0, 1)).all():
        raise InvalidArgument("labels must be binary (0/1)")
    return y.astype(np.uint8)
