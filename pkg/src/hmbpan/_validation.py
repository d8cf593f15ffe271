"""Input checks shared by the estimators and the functional API."""

import numpy as np

from .raster import Raster


def check_raster(r, name="raster"):
    if not isinstance(r, Raster):
        raise TypeError(f"{name} must be a Raster, got {type(r).__name__}")
    return r


def check_fusion_input(lrms, pan, s):
    check_raster(lrms, "lrms")
    check_raster(pan, "pan")
    if pan.bands != 1:
        raise ValueError(f"pan must have one band, got {pan.bands}")
    if lrms.bands < 2:
        raise ValueError(f"lrms needs at least two bands, got {lrms.bands}")
    if (pan.width, pan.height) != (s * lrms.width, s * lrms.height):
        raise ValueError(
            f"pan {pan.width}x{pan.height} is not {s}x lrms {lrms.width}x{lrms.height}"
        )


def check_fusion_pairs(X):
    """Normalize ``X`` to a list of ``(lrms, pan)`` pairs.

    Returns ``(pairs, single)`` where ``single`` records that a bare pair was
    passed, so callers can unwrap their output symmetrically.
    """
    if hasattr(X, "lrms") and hasattr(X, "pan"):
        return [(X.lrms, X.pan)], True
    if isinstance(X, tuple) and len(X) == 2 and all(isinstance(x, Raster) for x in X):
        return [X], True
    pairs = []
    for item in X:
        if hasattr(item, "lrms") and hasattr(item, "pan"):
            item = (item.lrms, item.pan)
        lr, pan = item
        pairs.append((check_raster(lr, "lrms"), check_raster(pan, "pan")))
    if not pairs:
        raise ValueError("no (lrms, pan) pairs given")
    return pairs, False


def check_same_geometry(a, b, what="rasters"):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{what} differ in geometry: {a.data.shape} vs {b.data.shape}")


def as_pixel_matrix(X):
    """``(n_pixels, n_bands)`` float array from a Raster or array-like."""
    if isinstance(X, Raster):
        return X.data.reshape(X.bands, -1).T.copy()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError(f"expected a non-empty (n_samples, n_features) array, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or Inf")
    return X
