"""Training objectives: stage-wise MSE plus a NIR feature-space term."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import raster as rs
from . import tensor as T
from .prng import derive_seed
from .raster import BandRole, MS_ROLES

__all__ = [
    "FeatureExtractor",
    "LossWeights",
    "pixel_loss",
    "nir_perceptual_loss",
    "total_loss",
    "loss_terms",
]

DEFAULT_PHI_SEED = 19_2021
PHI_CHANNELS = (1, 16, 32, 64)


class LossConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1e-3
    stage2_only_perceptual: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise LossConfigError("alpha must be >= 0")


class FeatureExtractor:
    """Frozen three-block conv stack standing in for a pretrained network.

    Each block is conv3x3 (stride 2) followed by ReLU, channels 1-16-32-64.
    Weights come from a seeded He-uniform draw or from an HMW1 file holding
    ``phi.block{i}.w`` / ``phi.block{i}.b``.
    """

    def __init__(self, seed=DEFAULT_PHI_SEED, params=None):
        if params is None:
            params = {}
            for i, (cin, cout) in enumerate(zip(PHI_CHANNELS[:-1], PHI_CHANNELS[1:])):
                params[f"phi.block{i}.w"] = T.seeded_init((cout, cin, 3, 3), derive_seed(seed, i))
                params[f"phi.block{i}.b"] = np.zeros(cout)
        self.seed = seed
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self._tensors = {k: T.Tensor(v) for k, v in self.params.items()}
        self.n_blocks = len(PHI_CHANNELS) - 1
        for i in range(self.n_blocks):
            if f"phi.block{i}.w" not in self.params:
                raise LossConfigError(f"feature extractor weights lack phi.block{i}.w")

    @classmethod
    def from_file(cls, path):
        return cls(seed=None, params=T.load_weights(path))

    def __call__(self, x):
        for i in range(self.n_blocks):
            p = self._tensors
            x = T.relu(T.conv2d(x, p[f"phi.block{i}.w"], p[f"phi.block{i}.b"], stride=2, padding=1))
        return x


def _as_tensor(x):
    return x if isinstance(x, T.Tensor) else T.constant(x)


def pixel_loss(fused, target):
    """Mean squared error over batch, bands and pixels."""
    target = _as_tensor(target)
    if fused.shape != target.shape:
        raise T.ShapeError(f"pixel_loss: fused {fused.shape} vs target {target.shape}")
    diff = T.sub(fused, target)
    return T.mean_all(T.mul(diff, diff))


def nir_perceptual_loss(fused, target, phi, band_roles=MS_ROLES):
    """MSE between the extractor's deepest features of the two NIR bands."""
    roles = tuple(BandRole(r) for r in band_roles)
    if BandRole.NIR not in roles:
        raise LossConfigError("no NIR band among the band roles")
    target = _as_tensor(target)
    if fused.shape != target.shape:
        raise T.ShapeError(f"nir_perceptual_loss: fused {fused.shape} vs target {target.shape}")
    k = roles.index(BandRole.NIR)
    f_feat = phi(T.slice_channels(fused, k))
    t_feat = phi(T.constant(target.values[:, k : k + 1]))
    return pixel_loss(f_feat, t_feat)


def loss_terms(fused_x2, fused_x4, hrms, phi, w: LossWeights = LossWeights()):
    """Named loss components plus the weighted ``total``."""
    hrms = np.asarray(hrms.values if isinstance(hrms, T.Tensor) else hrms)
    h2, w2 = fused_x2.shape[-2:]
    target_x2 = rs.resample_array(hrms, h2, w2)
    pix = T.add(pixel_loss(fused_x4, hrms), pixel_loss(fused_x2, target_x2))
    perc = nir_perceptual_loss(fused_x4, hrms, phi)
    if not w.stage2_only_perceptual:
        perc = T.add(perc, nir_perceptual_loss(fused_x2, target_x2, phi))
    total = T.add(T.scalar_mul(perc, w.alpha), pix)
    return {"pixel": pix, "perceptual": perc, "total": total}


def total_loss(fused_x2, fused_x4, hrms, phi, w: LossWeights = LossWeights()):
    """``alpha * L_perceptual + L_pixel``."""
    return loss_terms(fused_x2, fused_x4, hrms, phi, w)["total"]
