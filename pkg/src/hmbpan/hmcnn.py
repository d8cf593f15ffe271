"""High-pass modification network.

Two progressive stages, each ``fused = f(x) + HMB(f(x), pan)``:

* stage 1 works at twice the LRMS resolution against a PAN downsampled by 2;
* stage 2 works at PAN resolution.

The HMB concatenates one feature band with the PAN, runs a residual stack,
turns the result into a one-channel spatial attention map ``a`` in (0, 1)
and returns ``(a + 1) * highpass(PAN)``. Parameters live in a flat
``name -> ndarray`` dict so that they map one-to-one onto HMW1 files.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import raster as rs
from . import tensor as T
from .prng import derive_seed

__all__ = [
    "HmcnnConfig",
    "ConfigError",
    "parameter_shapes",
    "init_params",
    "hmb_forward",
    "hmb_fuse",
    "feature_extractor",
    "forward",
    "predict",
    "predict_arrays",
    "load_model_weights",
]

N_BANDS = 4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HmcnnConfig:
    n_res_blocks: int = 11
    feat_channels: int = 32
    share_hmb_across_bands: bool = True
    progressive_chain: bool = True
    s: int = 4
    attention_hidden: int = 16
    f_res_blocks: int = 2

    def __post_init__(self):
        if self.n_res_blocks < 1:
            raise ConfigError("n_res_blocks must be >= 1")
        if self.feat_channels < N_BANDS:
            raise ConfigError(f"feat_channels must be >= {N_BANDS}")
        if self.attention_hidden < 1:
            raise ConfigError("attention_hidden must be >= 1")
        if self.s != 4:
            raise ConfigError(f"the two-stage network is built for s=4, got s={self.s}")

    def to_dict(self):
        return asdict(self)


# -- parameters --------------------------------------------------------------

def _conv(shapes, name, cin, cout, k=3):
    shapes[f"{name}.w"] = (cout, cin, k, k)
    shapes[f"{name}.b"] = (cout,)


def _extractor_shapes(shapes, prefix, cfg, upsampler):
    f = cfg.feat_channels
    _conv(shapes, f"{prefix}.head", N_BANDS, f)
    for i in range(cfg.f_res_blocks):
        _conv(shapes, f"{prefix}.res{i}.conv1", f, f)
        _conv(shapes, f"{prefix}.res{i}.conv2", f, f)
    if upsampler:
        _conv(shapes, f"{prefix}.up", f, f)
    _conv(shapes, f"{prefix}.tail", f, N_BANDS)


def _hmb_shapes(shapes, prefix, cfg):
    f = cfg.feat_channels
    _conv(shapes, f"{prefix}.entry", 2, f)
    for i in range(cfg.n_res_blocks):
        _conv(shapes, f"{prefix}.res{i}.conv1", f, f)
        _conv(shapes, f"{prefix}.res{i}.conv2", f, f)
    _conv(shapes, f"{prefix}.sa1", f, cfg.attention_hidden)
    _conv(shapes, f"{prefix}.sa2", cfg.attention_hidden, 1)


def hmb_prefixes(stage, cfg):
    if cfg.share_hmb_across_bands:
        return [f"hmb{stage}"] * N_BANDS
    return [f"hmb{stage}.band{b}" for b in range(N_BANDS)]


def parameter_shapes(cfg: HmcnnConfig) -> dict:
    """Ordered ``name -> shape`` map of every parameter of the model."""
    shapes = {}
    _extractor_shapes(shapes, "f1", cfg, upsampler=True)
    _extractor_shapes(shapes, "f2", cfg, upsampler=False)
    for stage in (1, 2):
        for prefix in dict.fromkeys(hmb_prefixes(stage, cfg)):
            _hmb_shapes(shapes, prefix, cfg)
    return shapes


def init_params(cfg: HmcnnConfig, seed=0) -> dict:
    """He-uniform weights, zero biases; parameter ``i`` uses stream ``seed+i``.

    The feature-path tail convs start at zero so an untrained model returns
    the bicubic upsampling plus the injected PAN detail.
    """
    params = {}
    for i, (name, shape) in enumerate(parameter_shapes(cfg).items()):
        zero = name.endswith(".b") or name.endswith(".tail.w")
        scheme = "zeros" if zero else "he_uniform"
        params[name] = T.seeded_init(shape, derive_seed(seed, i), scheme)
    return params


def as_tensors(params, requires_grad=False):
    return {k: T.Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def _conv_layer(x, p, name, stride=1):
    return T.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=1)


def _res_block(x, p, name):
    y = T.relu(_conv_layer(x, p, f"{name}.conv1"))
    return T.add(x, _conv_layer(y, p, f"{name}.conv2"))


# -- HMB ---------------------------------------------------------------------

def pan_highpass(pan_values, s):
    return pan_values - rs.lowpass_array(pan_values, s)


def hmb_forward(band_x, pan, p, prefix, s, force_attention=None):
    """One band through the block: ``(f_SA(f_R(concat(X, P))) + 1) * P_hat``.

    ``force_attention`` replaces the sigmoid output; it exists for tests.
    """
    if band_x.shape != pan.shape or band_x.shape[1] != 1:
        raise T.ShapeError(f"hmb_forward: band {band_x.shape} and pan {pan.shape} must match, 1 channel")
    feat = _conv_layer(T.concat_channels(band_x, pan), p, f"{prefix}.entry")
    i = 0
    while f"{prefix}.res{i}.conv1.w" in p:
        feat = _res_block(feat, p, f"{prefix}.res{i}")
        i += 1
    att = T.relu(_conv_layer(feat, p, f"{prefix}.sa1"))
    att = T.sigmoid(_conv_layer(att, p, f"{prefix}.sa2"))
    if force_attention is not None:
        att = T.constant(np.broadcast_to(np.asarray(force_attention, float), att.shape).copy())
    p_hat = T.constant(pan_highpass(pan.values, s))
    return T.mul(T.add_scalar(att, 1.0), p_hat)


def hmb_fuse(features, pan, p, stage, cfg, s, force_attention=None):
    """Apply the HMB to each of the four bands and stack ``[R, G, B, NIR]``."""
    n, c, h, w = features.shape
    if c != N_BANDS:
        raise ConfigError(f"hmb_fuse expects {N_BANDS} bands (R, G, B, NIR), got {c}")
    if pan.shape != (n, 1, h, w):
        raise T.ShapeError(f"hmb_fuse: pan {pan.shape} does not match features {features.shape}")
    prefixes = hmb_prefixes(stage, cfg)
    if cfg.share_hmb_across_bands:
        # bands folded into the batch axis: one pass through the shared block
        folded = T.reshape(features, (n * c, 1, h, w))
        pan_rep = T.constant(np.repeat(pan.values, c, axis=0))
        out = hmb_forward(folded, pan_rep, p, prefixes[0], s, force_attention)
        return T.reshape(out, (n, c, h, w))
    outs = [
        hmb_forward(T.slice_channels(features, b), pan, p, prefixes[b], s, force_attention)
        for b in range(c)
    ]
    return T.concat_channels(outs)


# -- feature extractors ------------------------------------------------------

def feature_extractor(x, p, prefix, upsample):
    """Head conv, residual blocks, optional x2 upsampler, tail conv, global skip."""
    n, c, h, w = x.shape
    feat = _conv_layer(x, p, f"{prefix}.head")
    i = 0
    while f"{prefix}.res{i}.conv1.w" in p:
        feat = _res_block(feat, p, f"{prefix}.res{i}")
        i += 1
    skip = x
    if upsample:
        feat = T.resize(feat, 2 * h, 2 * w)
        feat = T.relu(_conv_layer(feat, p, f"{prefix}.up"))
        skip = T.resize(x, 2 * h, 2 * w)
    return T.add(skip, _conv_layer(feat, p, f"{prefix}.tail"))


def _check_geometry(lrms, pan, cfg):
    if len(lrms.shape) != 4 or lrms.shape[1] != N_BANDS:
        raise T.ShapeError(f"lrms must be (n, {N_BANDS}, h, w), got {lrms.shape}")
    n, _, h, w = lrms.shape
    expect = (n, 1, cfg.s * h, cfg.s * w)
    if pan.shape != expect:
        raise T.ShapeError(f"pan must be {expect} for lrms {lrms.shape}, got {pan.shape}")


def forward(lrms, pan, params, cfg: HmcnnConfig, return_parts=False, force_attention=None):
    """Run both stages. Returns ``(fused_x2, fused_x4)``.

    With ``return_parts`` a dict also holding the feature-path outputs
    ``feat_x2``/``feat_x4`` and the injected residuals ``resid_x2``/``resid_x4``
    is returned instead.
    """
    _check_geometry(lrms, pan, cfg)
    n, _, h, w = lrms.shape
    pan2 = T.constant(rs.resample_array(pan.values, 2 * h, 2 * w))

    feat_x2 = feature_extractor(lrms, params, "f1", upsample=True)
    resid_x2 = hmb_fuse(feat_x2, pan2, params, 1, cfg, 2, force_attention)
    fused_x2 = T.add(feat_x2, resid_x2)

    if cfg.progressive_chain:
        stage2_in, s2 = T.resize(fused_x2, 4 * h, 4 * w), 2
    else:
        stage2_in, s2 = T.resize(lrms, 4 * h, 4 * w), cfg.s
    feat_x4 = feature_extractor(stage2_in, params, "f2", upsample=False)
    resid_x4 = hmb_fuse(feat_x4, pan, params, 2, cfg, s2, force_attention)
    fused_x4 = T.add(feat_x4, resid_x4)

    if return_parts:
        return {
            "fused_x2": fused_x2,
            "fused_x4": fused_x4,
            "feat_x2": feat_x2,
            "feat_x4": feat_x4,
            "resid_x2": resid_x2,
            "resid_x4": resid_x4,
        }
    return fused_x2, fused_x4


# -- inference ---------------------------------------------------------------

def load_model_weights(source, cfg: HmcnnConfig) -> dict:
    """Load (path) or validate (mapping) a parameter set against ``cfg``."""
    params = T.load_weights(source) if isinstance(source, (str, Path)) else dict(source)
    shapes = parameter_shapes(cfg)
    missing = [k for k in shapes if k not in params]
    if missing:
        raise T.WeightFileError(f"weights missing {len(missing)} parameters, e.g. {missing[:3]}")
    for k, shape in shapes.items():
        if params[k].shape != shape:
            raise T.WeightFileError(f"{k}: shape {params[k].shape}, expected {shape}")
    return {k: params[k] for k in shapes}


def _tile_starts(size, tile, step):
    if size <= tile:
        return [0]
    starts = list(range(0, size - tile, step))
    starts.append(size - tile)
    return starts


def predict_arrays(lrms, pan, params, cfg, tile=256, overlap=16):
    """Fuse normalized arrays ``lrms (n,4,h,w)``, ``pan (n,1,4h,4w)``.

    Images larger than ``tile`` (PAN pixels) are processed in overlapping
    tiles; each tile contributes only its centre, ``overlap`` pixels in from
    any edge that is not an image border.
    """
    s = cfg.s
    tensors = as_tensors(params)
    H, W = pan.shape[-2:]
    if H <= tile and W <= tile:
        return forward(T.constant(lrms), T.constant(pan), tensors, cfg)[1].values
    if tile % s or overlap % s or tile - 2 * overlap <= 0:
        raise ValueError(f"tile {tile} / overlap {overlap} must be multiples of {s} with tile > 2*overlap")
    step = tile - 2 * overlap
    out = np.zeros(lrms.shape[:2] + (H, W))
    th, tw = min(tile, H), min(tile, W)
    for y0 in _tile_starts(H, th, step):
        for x0 in _tile_starts(W, tw, step):
            lt = lrms[:, :, y0 // s : (y0 + th) // s, x0 // s : (x0 + tw) // s]
            pt = pan[:, :, y0 : y0 + th, x0 : x0 + tw]
            fused = forward(T.constant(lt), T.constant(pt), tensors, cfg)[1].values
            ya = overlap if y0 > 0 else 0
            yb = th - overlap if y0 + th < H else th
            xa = overlap if x0 > 0 else 0
            xb = tw - overlap if x0 + tw < W else tw
            out[:, :, y0 + ya : y0 + yb, x0 + xa : x0 + xb] = fused[:, :, ya:yb, xa:xb]
    return out


def normalize(arr, value_range):
    lo, hi = value_range
    return (np.asarray(arr, dtype=np.float64) - lo) / (hi - lo)


def denormalize(arr, value_range):
    lo, hi = value_range
    return np.asarray(arr) * (hi - lo) + lo


def predict(lrms: rs.Raster, pan: rs.Raster, weights, cfg: HmcnnConfig = None, tile=256, overlap=16) -> rs.Raster:
    """Fuse one LRMS/PAN pair with trained weights (path or mapping)."""
    cfg = cfg or HmcnnConfig()
    if lrms.bands != N_BANDS:
        raise ConfigError(f"HMCNN needs {N_BANDS} MS bands, got {lrms.bands}")
    if (pan.width, pan.height) != (cfg.s * lrms.width, cfg.s * lrms.height):
        raise ValueError(
            f"pan {pan.width}x{pan.height} is not {cfg.s}x lrms {lrms.width}x{lrms.height}"
        )
    params = load_model_weights(weights, cfg)
    fused = predict_arrays(
        normalize(lrms.data, lrms.value_range)[None],
        normalize(pan.data, pan.value_range)[None],
        params,
        cfg,
        tile=tile,
        overlap=overlap,
    )
    return rs.Raster(denormalize(fused[0], lrms.value_range), lrms.band_roles, lrms.value_range)
