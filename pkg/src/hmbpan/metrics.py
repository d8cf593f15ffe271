"""Reference-based (ERGAS, RMSE, RMAE, SAM, UIQI) and no-reference
(D_lambda, D_S, QNR) fusion quality metrics.

Every function accepts :class:`~hmbpan.raster.Raster` objects or plain
``(bands, height, width)`` arrays.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import raster as rs

__all__ = [
    "DegenerateReferenceError",
    "MetricReport",
    "CSV_COLUMNS",
    "rmse",
    "rmae",
    "ergas",
    "sam",
    "uiqi",
    "q_index",
    "d_lambda",
    "d_s",
    "qnr",
    "evaluate_all",
]

RMAE_DEFINITION = "relative mean absolute error, percent: 100*mean|f-r|/mean(r)"
CSV_COLUMNS = ("method", "ergas", "rmse", "rmae", "sam_degrees", "uiqi", "d_lambda", "d_s", "qnr")


class DegenerateReferenceError(ValueError):
    pass


def _arr(x):
    a = x.data if isinstance(x, rs.Raster) else np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValueError(f"expected (bands, height, width), got shape {a.shape}")
    return a


def _pair(fused, ref):
    f, r = _arr(fused), _arr(ref)
    if f.shape != r.shape:
        raise ValueError(f"geometry mismatch: fused {f.shape} vs reference {r.shape}")
    return f, r


def rmse(fused, ref):
    """Band-mean RMSE and the per-band values."""
    f, r = _pair(fused, ref)
    per_band = np.sqrt(((f - r) ** 2).mean(axis=(1, 2)))
    return float(per_band.mean()), per_band.tolist()


def rmae(fused, ref):
    """Relative mean absolute error in percent, averaged over bands."""
    f, r = _pair(fused, ref)
    mu = r.mean(axis=(1, 2))
    if np.any(mu <= 0):
        raise DegenerateReferenceError("reference band with non-positive mean")
    per_band = 100.0 * np.abs(f - r).mean(axis=(1, 2)) / mu
    return float(per_band.mean()), per_band.tolist()


def ergas(fused, ref, s):
    f, r = _pair(fused, ref)
    mu = r.mean(axis=(1, 2))
    if np.any(mu == 0):
        raise DegenerateReferenceError("reference band with zero mean")
    band_rmse = np.sqrt(((f - r) ** 2).mean(axis=(1, 2)))
    return float(100.0 / s * np.sqrt(np.mean((band_rmse / mu) ** 2)))


def sam(fused, ref, return_skipped=False):
    """Mean spectral angle in degrees over pixels with non-zero spectra."""
    f, r = _pair(fused, ref)
    if f.shape[0] < 2:
        raise ValueError("SAM needs at least two bands")
    dot = (f * r).sum(axis=0)
    nf = (f * f).sum(axis=0)
    nr = (r * r).sum(axis=0)
    valid = (nf > 0) & (nr > 0)
    if not valid.any():
        raise DegenerateReferenceError("every pixel has a zero spectral vector")
    # sqrt(nf * nr) rather than sqrt(nf) * sqrt(nr): identical vectors give cos == 1
    cos = np.clip(dot[valid] / np.sqrt(nf[valid] * nr[valid]), -1.0, 1.0)
    angle = float(np.degrees(np.arccos(cos)).mean())
    if return_skipped:
        return angle, int(valid.size - valid.sum())
    return angle


def _q_from_stats(mx, my, vx, vy, cxy):
    denom = (vx + vy) * (mx * mx + my * my)
    valid = denom != 0
    with np.errstate(invalid="ignore", divide="ignore"):
        q = (2.0 * cxy / (vx + vy)) * (2.0 * mx * my / (mx * mx + my * my))
    return q, valid


def q_index(a, b):
    """Global Wang-Bovik Q between two single-band images."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    ma, mb = a.mean(), b.mean()
    da, db = a - ma, b - mb
    q, valid = _q_from_stats(ma, mb, (da * da).mean(), (db * db).mean(), (da * db).mean())
    if not valid:
        raise DegenerateReferenceError("Q undefined: zero variance and zero mean")
    return float(q)


def uiqi_band(x, y, window=8):
    """Mean Q over sliding ``window`` x ``window`` blocks, stride 1.

    Returns ``(mean_q, skipped_windows)``.
    """
    wx = sliding_window_view(x, (window, window))
    wy = sliding_window_view(y, (window, window))
    mx = wx.mean(axis=(-1, -2))
    my = wy.mean(axis=(-1, -2))
    dx = wx - mx[..., None, None]
    dy = wy - my[..., None, None]
    q, valid = _q_from_stats(
        mx, my, (dx * dx).mean(axis=(-1, -2)), (dy * dy).mean(axis=(-1, -2)), (dx * dy).mean(axis=(-1, -2))
    )
    if not valid.any():
        raise DegenerateReferenceError("no window with a defined Q")
    return float(q[valid].mean()), int(valid.size - valid.sum())


def uiqi(fused, ref, window=8):
    """Band-mean UIQI and the per-band values."""
    f, r = _pair(fused, ref)
    if min(f.shape[1:]) < window:
        raise ValueError(f"image {f.shape[2]}x{f.shape[1]} smaller than the {window}px window")
    per_band = [uiqi_band(f[b], r[b], window)[0] for b in range(f.shape[0])]
    return float(np.mean(per_band)), per_band


def d_lambda(fused, lrms, p=1):
    """Spectral distortion: change in inter-band Q from LRMS to fused."""
    f, l = _arr(fused), _arr(lrms)
    c = f.shape[0]
    if c != l.shape[0]:
        raise ValueError(f"fused has {c} bands, lrms {l.shape[0]}")
    if c < 2:
        raise ValueError("D_lambda needs at least two bands")
    total = 0.0
    for b in range(c):
        for k in range(c):
            if b != k:
                total += abs(q_index(f[b], f[k]) - q_index(l[b], l[k])) ** p
    return float((total / (c * (c - 1))) ** (1.0 / p))


def d_s(fused, lrms, pan, s, q=1):
    """Spatial distortion: change in band-to-PAN Q across resolutions."""
    f, l, pn = _arr(fused), _arr(lrms), _arr(pan)
    if pn.shape[0] != 1:
        raise ValueError("pan must have a single band")
    if f.shape[1:] != pn.shape[1:]:
        raise ValueError(f"fused {f.shape} and pan {pn.shape} geometry differ")
    if f.shape[0] != l.shape[0] or l.shape[1] * s != pn.shape[1] or l.shape[2] * s != pn.shape[2]:
        raise ValueError(f"lrms {l.shape} inconsistent with pan {pn.shape} at scale {s}")
    pan_lr = rs.resample_array(pn[0], l.shape[1], l.shape[2])
    total = sum(abs(q_index(f[b], pn[0]) - q_index(l[b], pan_lr)) ** q for b in range(f.shape[0]))
    return float((total / f.shape[0]) ** (1.0 / q))


def qnr(d_lambda_value, d_s_value, a=1, b=1):
    return float((1.0 - d_lambda_value) ** a * (1.0 - d_s_value) ** b)


@dataclass
class MetricReport:
    ergas: float = None
    rmse: float = None
    rmae: float = None
    sam_degrees: float = None
    uiqi: float = None
    d_lambda: float = None
    d_s: float = None
    qnr: float = None
    per_band: dict = field(default_factory=dict)
    protocol: str = "reduced"
    rmae_definition: str = RMAE_DEFINITION

    def best_value_vector(self):
        return (
            self.ergas, self.rmse, self.rmae, self.sam_degrees,
            self.uiqi, self.d_lambda, self.d_s, self.qnr,
        )

    def to_dict(self):
        return asdict(self)

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    def csv_row(self, method=""):
        row = {"method": method}
        for col in CSV_COLUMNS[1:]:
            v = getattr(self, col)
            row[col] = "" if v is None else repr(float(v))
        return row

    def append_csv(self, path, method=""):
        path = Path(path)
        new = not path.exists() or path.stat().st_size == 0
        with path.open("a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            if new:
                writer.writeheader()
            writer.writerow(self.csv_row(method))


def evaluate_all(fused, ref=None, lrms=None, pan=None, s=4, window=8):
    """All metrics the inputs allow.

    With ``ref`` (reduced-resolution protocol) the five reference-based
    scores are filled; with ``lrms`` and ``pan`` the three no-reference
    scores are filled. Without ``ref`` the protocol is ``full``.
    """
    if ref is None and (lrms is None or pan is None):
        raise ValueError("need a reference, or lrms and pan for the no-reference metrics")
    report = MetricReport(protocol="reduced" if ref is not None else "full")
    if ref is not None:
        report.rmse, rmse_b = rmse(fused, ref)
        report.rmae, rmae_b = rmae(fused, ref)
        report.uiqi, uiqi_b = uiqi(fused, ref, window)
        report.ergas = ergas(fused, ref, s)
        report.sam_degrees = sam(fused, ref)
        report.per_band = {"rmse": rmse_b, "rmae": rmae_b, "uiqi": uiqi_b}
    if lrms is not None and pan is not None:
        report.d_lambda = d_lambda(fused, lrms)
        report.d_s = d_s(fused, lrms, pan, s)
        report.qnr = qnr(report.d_lambda, report.d_s)
    return report
