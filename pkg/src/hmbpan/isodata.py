"""ISODATA clustering of pixel spectra, and label-map agreement.

The variant here is fully deterministic: centers start evenly spaced on the
segment between the per-band minimum and maximum spectra, nearest-center
ties go to the lowest class id, and split/merge thresholds are absolute
values in the image's units (defaults derive from its value range).
Returned labels are the nearest-center assignment to the returned centers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from . import raster as rs
from ._validation import as_pixel_matrix

__all__ = ["IsodataParams", "LabelMap", "isodata", "classify", "agreement", "Isodata"]


@dataclass(frozen=True)
class IsodataParams:
    k_init: int = 5
    max_iter: int = 5
    min_cluster_size: int = 20
    split_std_threshold: float = None
    merge_dist_threshold: float = None
    # the even-spread initialization draws nothing; kept so runs record it
    seed: int = 0

    def __post_init__(self):
        if self.k_init < 2:
            raise ValueError("k_init must be >= 2")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")

    def thresholds(self, span):
        split = 0.15 * span if self.split_std_threshold is None else self.split_std_threshold
        merge = 0.05 * span if self.merge_dist_threshold is None else self.merge_dist_threshold
        return split, merge


@dataclass
class LabelMap:
    width: int
    height: int
    labels: np.ndarray
    k_final: int
    centers: np.ndarray
    sse_trace: list = field(default_factory=list, repr=False)
    n_iter: int = 0

    def to_raster(self):
        return rs.Raster(self.labels.astype(np.float64), (rs.BandRole.UNKNOWN,), (0.0, max(self.k_final - 1, 1)))


def _assign(X, centers):
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=1)


def _sse(X, labels, centers):
    return float(((X - centers[labels]) ** 2).sum())


def _means(X, labels, k):
    """Means of the non-empty clusters and the compacted labels."""
    present = np.unique(labels)
    remap = np.full(k, -1)
    remap[present] = np.arange(len(present))
    labels = remap[labels]
    centers = np.stack([X[labels == j].mean(axis=0) for j in range(len(present))])
    return centers, labels


def _initial_centers(X, k):
    lo, hi = X.min(axis=0), X.max(axis=0)
    frac = np.linspace(0.0, 1.0, k)[:, None]
    return lo + frac * (hi - lo)


def isodata(X, params: IsodataParams = IsodataParams(), span=None):
    """Cluster rows of ``X``. Returns ``(labels, centers, sse_trace, n_iter)``.

    ``sse_trace`` lists ``(iteration, step, sse)`` for the assignment and
    mean-update steps, the part of each iteration that never raises the
    within-cluster sum of squares.
    """
    X = as_pixel_matrix(X)
    if span is None:
        span = float(X.max() - X.min()) or 1.0
    split_thr, merge_thr = params.thresholds(span)
    k_init = params.k_init
    centers = _initial_centers(X, k_init)
    trace = []
    prev, restructured = None, True
    it = 0
    for it in range(1, params.max_iter + 1):
        labels = _assign(X, centers)
        trace.append((it, "assign", _sse(X, labels, centers)))
        if prev is not None and not restructured and np.array_equal(labels, prev):
            it -= 1
            break
        centers, labels = _means(X, labels, len(centers))
        trace.append((it, "update", _sse(X, labels, centers)))
        n_before = len(centers)

        sizes = np.bincount(labels, minlength=len(centers))
        small = sizes < params.min_cluster_size
        if small.any():
            keep = ~small
            if not keep.any():
                keep[np.argmax(sizes)] = True
            centers = centers[keep]
            centers, labels = _means(X, _assign(X, centers), len(centers))

        split_done = set()
        if len(centers) < 2 * k_init:
            new = []
            for j in range(len(centers)):
                if len(centers) + len(new) >= 2 * k_init:
                    break
                members = X[labels == j]
                sd = members.std(axis=0)
                axis = int(np.argmax(sd))
                if sd[axis] > split_thr:
                    hi_c = centers[j].copy()
                    hi_c[axis] += sd[axis]
                    centers[j, axis] -= sd[axis]
                    new.append(hi_c)
                    split_done.add(j)
            if new:
                centers = np.vstack([centers, new])

        if not split_done:
            sizes = np.bincount(labels, minlength=len(centers)).astype(float)
            merged = set()
            while len(centers) - len(merged) > k_init / 2:
                best = None
                for a in range(len(centers)):
                    for b in range(a + 1, len(centers)):
                        if a in merged or b in merged:
                            continue
                        d = float(np.linalg.norm(centers[a] - centers[b]))
                        if d < merge_thr and (best is None or d < best[0]):
                            best = (d, a, b)
                if best is None:
                    break
                _, a, b = best
                wa, wb = sizes[a], sizes[b]
                if wa + wb > 0:
                    centers[a] = (wa * centers[a] + wb * centers[b]) / (wa + wb)
                sizes[a] += wb
                merged.add(b)
            if merged:
                centers = np.delete(centers, sorted(merged), axis=0)

        restructured = len(centers) != n_before or bool(split_done)
        prev = labels if not restructured else None
    centers, labels = _means(X, _assign(X, centers), len(centers))
    # final labels follow the returned centers; a center left without
    # members after the last mean update is dropped
    labels = _assign(X, centers)
    present = np.unique(labels)
    if len(present) < len(centers):
        centers = centers[present]
        labels = _assign(X, centers)
    return labels, centers, trace, it


def classify(img: rs.Raster, params: IsodataParams = IsodataParams()) -> LabelMap:
    """ISODATA over the pixels of ``img``; thresholds scale with its value range."""
    if img.width * img.height == 0:
        raise ValueError("empty image")
    labels, centers, trace, n_iter = isodata(img, params, span=img.span)
    return LabelMap(
        width=img.width,
        height=img.height,
        labels=labels.reshape(img.height, img.width),
        k_final=len(centers),
        centers=centers,
        sse_trace=trace,
        n_iter=n_iter,
    )


def _labels(x):
    return np.asarray(x.labels if isinstance(x, LabelMap) else x)


def confusion(a, b):
    a, b = _labels(a).ravel(), _labels(b).ravel()
    m = np.zeros((a.max() + 1, b.max() + 1), dtype=np.int64)
    np.add.at(m, (a, b), 1)
    return m


def agreement(a, b):
    """Fraction of pixels matched under the best one-to-one label pairing.

    The pairing maximizes the matched count over the confusion matrix, so
    relabelling either map leaves the value unchanged.
    """
    la, lb = _labels(a), _labels(b)
    if la.shape != lb.shape:
        raise ValueError(f"label maps differ in shape: {la.shape} vs {lb.shape}")
    m = confusion(la, lb)
    rows, cols = linear_sum_assignment(m, maximize=True)
    return float(m[rows, cols].sum()) / la.size


class Isodata(ClusterMixin, BaseEstimator):
    """sklearn-style wrapper: rows of ``X`` are pixels, columns are bands.

    ``value_range`` sets the scale of the default split/merge thresholds.
    """

    def __init__(
        self,
        k_init=5,
        max_iter=5,
        min_cluster_size=20,
        split_std_threshold=None,
        merge_dist_threshold=None,
        value_range=(0.0, 2047.0),
        seed=0,
    ):
        self.k_init = k_init
        self.max_iter = max_iter
        self.min_cluster_size = min_cluster_size
        self.split_std_threshold = split_std_threshold
        self.merge_dist_threshold = merge_dist_threshold
        self.value_range = value_range
        self.seed = seed

    def _params(self):
        return IsodataParams(
            self.k_init,
            self.max_iter,
            self.min_cluster_size,
            self.split_std_threshold,
            self.merge_dist_threshold,
            self.seed,
        )

    def fit(self, X, y=None):
        span = X.span if isinstance(X, rs.Raster) else self.value_range[1] - self.value_range[0]
        labels, centers, trace, n_iter = isodata(X, self._params(), span=span)
        self.labels_ = labels
        self.cluster_centers_ = centers
        self.n_clusters_ = len(centers)
        self.sse_trace_ = trace
        self.n_iter_ = n_iter
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = as_pixel_matrix(X)
        if X.shape[1] != self.cluster_centers_.shape[1]:
            raise ValueError(f"X has {X.shape[1]} features, fitted on {self.cluster_centers_.shape[1]}")
        return _assign(X, self.cluster_centers_)
