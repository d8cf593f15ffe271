"""Training loop, learning-rate schedule and the sklearn-style HMCNN estimator."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import hmcnn
from . import tensor as T
from ._validation import check_fusion_pairs, check_raster
from .hmcnn import HmcnnConfig
from .losses import DEFAULT_PHI_SEED, FeatureExtractor, LossWeights, loss_terms

__all__ = ["TrainConfig", "TrainingDiverged", "lr_at", "train_model", "dataset_loss", "HMCNNPansharpener"]

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Non-finite loss; ``params`` holds the last finite parameter set."""

    def __init__(self, message, params, history):
        super().__init__(message)
        self.params = params
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 12
    lr0: float = 1e-4
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 1000
    max_epochs: int = 2000
    max_steps: int = None
    seed: int = 0
    checkpoint_every: int = 0
    val_fraction: float = 0.1
    phi_seed: int = DEFAULT_PHI_SEED
    phi_weights_path: str = None
    loss: LossWeights = field(default_factory=LossWeights)
    model: HmcnnConfig = field(default_factory=HmcnnConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if self.lr_decay_every < 1 or self.lr_decay_factor <= 0:
            raise ValueError("lr decay settings must be positive")

    def feature_extractor(self):
        if self.phi_weights_path:
            return FeatureExtractor.from_file(self.phi_weights_path)
        return FeatureExtractor(seed=self.phi_seed)


def lr_at(epoch, cfg: TrainConfig):
    """Step schedule: ``lr0 / factor ** floor(epoch / every)``."""
    return cfg.lr0 / cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


@dataclass
class TrainResult:
    params: dict
    step_losses: list
    epoch_losses: list
    timings: dict


def _loss(params, lrms, pan, hrms, cfg, phi, requires_grad):
    tensors = hmcnn.as_tensors(params, requires_grad=requires_grad)
    fused_x2, fused_x4 = hmcnn.forward(T.constant(lrms), T.constant(pan), tensors, cfg.model)
    return tensors, loss_terms(fused_x2, fused_x4, hrms, phi, cfg.loss)["total"]


def dataset_loss(params, lrms, pan, hrms, cfg: TrainConfig, phi=None, batch_size=8):
    """Sample-weighted mean total loss over a whole dataset (no gradients)."""
    phi = phi or cfg.feature_extractor()
    total = 0.0
    for i in range(0, len(lrms), batch_size):
        sl = slice(i, i + batch_size)
        _, loss = _loss(params, lrms[sl], pan[sl], hrms[sl], cfg, phi, False)
        total += float(loss.values) * len(lrms[sl])
    return total / len(lrms)


def train_model(lrms, pan, hrms, cfg: TrainConfig, params=None, on_epoch=None):
    """Adam on the total loss over normalized arrays.

    ``lrms (N,4,h,w)``, ``pan (N,1,4h,4w)``, ``hrms (N,4,4h,4w)``. Batches
    follow a per-epoch permutation from ``default_rng(seed)``; the last
    partial batch of an epoch is kept. ``on_epoch(epoch, params, mean_loss)``
    is called after every epoch.
    """
    t_start = time.perf_counter()
    n = len(lrms)
    if not (len(pan) == len(hrms) == n) or n == 0:
        raise ValueError("lrms, pan and hrms must hold the same, non-zero number of samples")
    params = hmcnn.init_params(cfg.model, cfg.seed) if params is None else {k: v.copy() for k, v in params.items()}
    phi = cfg.feature_extractor()
    adam = T.Adam(lr=cfg.lr0)
    rng = np.random.default_rng(cfg.seed)
    step_losses, epoch_losses = [], []
    step = 0
    t_init = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            try:
                tensors, loss = _loss(params, lrms[idx], pan[idx], hrms[idx], cfg, phi, True)
            except T.NumericError as exc:
                raise TrainingDiverged(f"step {step}: {exc}", params, step_losses) from exc
            T.backward(loss)
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.values)) for k, t in tensors.items()}
            adam.step(params, grads, lr=lr)
            value = float(loss.values)
            step_losses.append(value)
            batch_losses.append(value)
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        epoch_losses.append(float(np.mean(batch_losses)))
        log.info("epoch %d lr %.2e loss %.6g", epoch, lr, epoch_losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, params, epoch_losses[-1])
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    t_end = time.perf_counter()
    timings = {"init_s": t_init - t_start, "train_s": t_end - t_init, "steps": step}
    return TrainResult(params, step_losses, epoch_losses, timings)


def stack_triples(pairs, targets=None):
    """Normalized ``(lrms, pan[, hrms])`` arrays from rasters of equal geometry."""
    lrms = np.stack([hmcnn.normalize(lr.data, lr.value_range) for lr, _ in pairs])
    pan = np.stack([hmcnn.normalize(p.data, p.value_range) for _, p in pairs])
    if targets is None:
        return lrms, pan
    hrms = np.stack([hmcnn.normalize(check_raster(h, "hrms").data, h.value_range) for h in targets])
    return lrms, pan, hrms


class HMCNNPansharpener(BaseEstimator):
    """HMCNN as an estimator.

    ``fit(X, y)`` takes ``X`` as a sequence of ``(lrms, pan)`` raster pairs
    and ``y`` as the matching full-resolution MS rasters. ``predict(X)``
    returns fused rasters in the LRMS value range.
    """

    def __init__(
        self,
        n_res_blocks=11,
        feat_channels=32,
        attention_hidden=16,
        f_res_blocks=2,
        share_hmb=True,
        progressive=True,
        alpha=1e-3,
        stage2_only_perceptual=True,
        lr=1e-4,
        lr_decay_factor=10.0,
        lr_decay_every=1000,
        max_epochs=2000,
        max_steps=None,
        batch_size=12,
        seed=0,
        phi_seed=DEFAULT_PHI_SEED,
        tile=256,
        overlap=16,
    ):
        self.n_res_blocks = n_res_blocks
        self.feat_channels = feat_channels
        self.attention_hidden = attention_hidden
        self.f_res_blocks = f_res_blocks
        self.share_hmb = share_hmb
        self.progressive = progressive
        self.alpha = alpha
        self.stage2_only_perceptual = stage2_only_perceptual
        self.lr = lr
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_every = lr_decay_every
        self.max_epochs = max_epochs
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.seed = seed
        self.phi_seed = phi_seed
        self.tile = tile
        self.overlap = overlap

    def model_config(self):
        return HmcnnConfig(
            n_res_blocks=self.n_res_blocks,
            feat_channels=self.feat_channels,
            share_hmb_across_bands=self.share_hmb,
            progressive_chain=self.progressive,
            attention_hidden=self.attention_hidden,
            f_res_blocks=self.f_res_blocks,
        )

    def train_config(self):
        return TrainConfig(
            batch_size=self.batch_size,
            lr0=self.lr,
            lr_decay_factor=self.lr_decay_factor,
            lr_decay_every=self.lr_decay_every,
            max_epochs=self.max_epochs,
            max_steps=self.max_steps,
            seed=self.seed,
            phi_seed=self.phi_seed,
            loss=LossWeights(self.alpha, self.stage2_only_perceptual),
            model=self.model_config(),
        )

    def fit(self, X, y):
        pairs, single = check_fusion_pairs(X)
        targets = [y] if single else list(y)
        if len(targets) != len(pairs):
            raise ValueError(f"{len(pairs)} input pairs but {len(targets)} targets")
        lrms, pan, hrms = stack_triples(pairs, targets)
        result = train_model(lrms, pan, hrms, self.train_config())
        self.params_ = result.params
        self.loss_curve_ = result.step_losses
        self.epoch_losses_ = result.epoch_losses
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        pairs, single = check_fusion_pairs(X)
        cfg = self.model_config()
        out = [hmcnn.predict(lr, pan, self.params_, cfg, self.tile, self.overlap) for lr, pan in pairs]
        return out[0] if single else out

    def save_weights(self, path):
        check_is_fitted(self, "params_")
        T.save_weights(self.params_, path)

    def load_weights(self, path):
        self.params_ = hmcnn.load_model_weights(path, self.model_config())
        return self
