"""Component-substitution and ratio baselines: IHS, Brovey, GS, SFIM.

All four take an LRMS raster and a PAN ``s`` times larger, upsample the MS
bicubically to PAN geometry and inject PAN detail. The PAN is first matched
to the mean and standard deviation of the MS intensity where the method
calls for it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import raster as rs
from ._validation import check_fusion_input, check_fusion_pairs

__all__ = [
    "FusionInput",
    "DegenerateInputError",
    "ihs_fuse",
    "brovey_fuse",
    "gs_fuse",
    "sfim_fuse",
    "METHODS",
    "ClassicalPansharpener",
]


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class FusionInput:
    lrms: rs.Raster
    pan: rs.Raster
    s: int = 4
    bands: tuple = None

    def __post_init__(self):
        check_fusion_input(self.lrms, self.pan, self.s)


def _upsampled(fin):
    return rs.resample_array(fin.lrms.data, fin.pan.height, fin.pan.width)


def _intensity_bands(fin):
    if fin.bands is None:
        return list(range(fin.lrms.bands))
    return [fin.lrms.band_roles.index(rs.BandRole(b)) for b in fin.bands]


def _match_pan(pan, intensity):
    sd = pan.std()
    if sd == 0:
        raise DegenerateInputError("PAN has zero variance; mean/std matching is undefined")
    return (pan - pan.mean()) * (intensity.std() / sd) + intensity.mean()


def _result(fin, data, degenerate=0):
    out = fin.lrms.with_data(data)
    out.meta["degenerate_pixels"] = int(degenerate)
    return out


def ihs_fuse(fin: FusionInput) -> rs.Raster:
    """Generalized IHS: add ``P' - I`` to every upsampled band."""
    ms = _upsampled(fin)
    intensity = ms[_intensity_bands(fin)].mean(axis=0)
    matched = _match_pan(fin.pan.data[0], intensity)
    return _result(fin, ms + (matched - intensity))


def brovey_fuse(fin: FusionInput) -> rs.Raster:
    """Brovey ratio ``ms * P' / I``; pixels with ``I <= eps`` pass through."""
    ms = _upsampled(fin)
    intensity = ms[_intensity_bands(fin)].mean(axis=0)
    matched = _match_pan(fin.pan.data[0], intensity)
    eps = 1e-9 * fin.lrms.span
    ok = intensity > eps
    ratio = np.divide(matched, intensity, out=np.ones_like(intensity), where=ok)
    return _result(fin, np.where(ok, ms * ratio, ms), np.count_nonzero(~ok))


def gs_gains(ms, intensity):
    """Injection gains ``cov(ms_b, I) / var(I)`` per band."""
    var = intensity.var()
    if var == 0:
        raise DegenerateInputError("synthetic intensity has zero variance")
    centred = intensity - intensity.mean()
    return np.array([((b - b.mean()) * centred).mean() / var for b in ms])


def gs_fuse(fin: FusionInput) -> rs.Raster:
    """Gram-Schmidt spectral sharpening with the band mean as first vector."""
    if fin.lrms.bands < 2:
        raise ValueError("GS fusion needs at least two bands")
    ms = _upsampled(fin)
    intensity = ms[_intensity_bands(fin)].mean(axis=0)
    gains = gs_gains(ms, intensity)
    matched = _match_pan(fin.pan.data[0], intensity)
    return _result(fin, ms + gains[:, None, None] * (matched - intensity))


def sfim_fuse(fin: FusionInput) -> rs.Raster:
    """Smoothing-filter modulation ``ms * pan / lowpass(pan)``."""
    ms = _upsampled(fin)
    pan = fin.pan.data[0]
    smooth = rs.lowpass_array(pan, fin.s)
    eps = 1e-9 * fin.pan.span
    ok = smooth > eps
    ratio = np.divide(pan, smooth, out=np.ones_like(pan), where=ok)
    return _result(fin, np.where(ok, ms * ratio, ms), np.count_nonzero(~ok))


METHODS = {
    "ihs": ihs_fuse,
    "brovey": brovey_fuse,
    "gs": gs_fuse,
    "sfim": sfim_fuse,
}


class ClassicalPansharpener(TransformerMixin, BaseEstimator):
    """Stateless transformer wrapping one of the classical fusers.

    ``X`` is a ``(lrms, pan)`` pair of rasters or a sequence of such pairs;
    ``transform`` returns one fused raster per pair (a single raster when a
    single pair was given).
    """

    def __init__(self, method="gs", s=4, bands=None):
        self.method = method
        self.s = s
        self.bands = bands

    def fit(self, X=None, y=None):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {sorted(METHODS)}")
        self.fuser_ = METHODS[self.method]
        return self

    def transform(self, X):
        if not hasattr(self, "fuser_"):
            self.fit()
        pairs, single = check_fusion_pairs(X)
        out = [self.fuser_(FusionInput(lr, pan, self.s, self.bands)) for lr, pan in pairs]
        return out[0] if single else out
