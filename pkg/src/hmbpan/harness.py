"""Experiment plumbing behind the command line: patch datasets on disk,
training runs with manifests, fusion dispatch, error maps and timing."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import __version__, hmcnn, metrics
from . import raster as rs
from . import tensor as T
from .classical import METHODS as CLASSICAL_METHODS
from .classical import FusionInput
from .config import train_config_snapshot
from .training import TrainConfig, TrainingDiverged, dataset_loss, train_model

__all__ = [
    "FUSION_METHODS",
    "split_indices",
    "degrade_to_dir",
    "load_index",
    "run_training",
    "fuse",
    "error_map",
    "write_error_map",
    "bench",
    "write_bench_csv",
]

log = logging.getLogger(__name__)

FUSION_METHODS = tuple(CLASSICAL_METHODS) + ("hmcnn",)
BENCH_DISCLAIMER = (
    "# wall-clock seconds on this machine, single process, float64 numpy;",
    "# not comparable to GPU timings reported for other implementations",
)


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def split_indices(n, val_fraction, seed):
    """Seed-stable train/val split by hashing each patch index.

    Returns ``(train, val)`` index lists. Membership of patch ``i`` does not
    depend on ``n``, so growing a dataset never reshuffles earlier patches.
    """
    train, val = [], []
    for i in range(n):
        digest = hashlib.blake2b(f"{seed}:{i}".encode(), digest_size=8).digest()
        u = int.from_bytes(digest, "little") / 2.0**64
        (val if u < val_fraction else train).append(i)
    if not train:
        train, val = val, []
    return train, val


# -- datasets -----------------------------------------------------------------

def degrade_to_dir(hrms, pan, s, out_dir, patch=256, stride=None):
    """Crop aligned HR-MS/PAN tiles, degrade them and write MBR1 triples.

    Writes ``triple_NNNN_{lrms,pan,hrms}.mbr`` and ``index.json``; returns
    the index dict.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    patches = rs.crop_patches(hrms, pan, patch, stride or patch, s)
    entries = []
    for i, e in enumerate(patches):
        names = {}
        for part in ("lrms", "pan", "hrms"):
            names[part] = f"triple_{i:04d}_{part}.mbr"
            rs.write_raster(getattr(e, part), out_dir / names[part])
        entries.append({"id": i, "row": e.row, "col": e.col, **names})
    index = {"format": "hmbpan-patches/1", "s": s, "patch": patch, "stride": stride or patch, "triples": entries}
    _dump_json(index, out_dir / "index.json")
    return index


def load_index(path):
    """``(index, [(lrms, pan, hrms), ...])`` from an ``index.json``."""
    path = Path(path)
    try:
        index = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise rs.RasterFormatError(f"{path}: cannot read index: {exc}", 0) from exc
    base = path.parent
    triples = [
        tuple(rs.read_raster(base / t[part]) for part in ("lrms", "pan", "hrms"))
        for t in index.get("triples", [])
    ]
    if not triples:
        raise rs.RasterFormatError(f"{path}: index lists no triples", 0)
    return index, triples


def _arrays(triples):
    L = np.stack([hmcnn.normalize(lr.data, lr.value_range) for lr, _, _ in triples])
    P = np.stack([hmcnn.normalize(p.data, p.value_range) for _, p, _ in triples])
    H = np.stack([hmcnn.normalize(h.data, h.value_range) for _, _, h in triples])
    return L, P, H


# -- training -------------------------------------------------------------------

def run_training(cfg: TrainConfig, index_path, out_dir):
    """Train on an on-disk patch set; write weights, checkpoints and a manifest.

    On divergence the last finite parameters are written to
    ``weights_last_good.hmw``, the manifest records the failure and
    :class:`TrainingDiverged` propagates.
    """
    t0 = time.perf_counter()
    _, triples = load_index(index_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_idx, val_idx = split_indices(len(triples), cfg.val_fraction, cfg.seed)
    L, P, H = _arrays(triples)
    phi = cfg.feature_extractor()
    t_load = time.perf_counter()

    checkpoints, val_losses = [], []

    def on_epoch(epoch, params, loss):
        if val_idx:
            val_losses.append(dataset_loss(params, L[val_idx], P[val_idx], H[val_idx], cfg, phi))
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            name = f"checkpoint_epoch{epoch + 1:05d}.hmw"
            T.save_weights(params, out_dir / name)
            checkpoints.append(name)

    manifest = {
        "software": {"package": "hmbpan", "version": __version__},
        "seed": cfg.seed,
        "config": train_config_snapshot(cfg, {"index": str(Path(index_path).resolve())}),
        "split": {"train": train_idx, "val": val_idx},
    }
    status, error = "ok", None
    try:
        result = train_model(L[train_idx], P[train_idx], H[train_idx], cfg, on_epoch=on_epoch)
        params, step_losses, epoch_losses, train_timing = (
            result.params, result.step_losses, result.epoch_losses, result.timings,
        )
        weights_name = "weights.hmw"
    except TrainingDiverged as exc:
        status, error = "diverged", str(exc)
        params, step_losses, epoch_losses, train_timing = exc.params, exc.history, [], {}
        weights_name = "weights_last_good.hmw"
    T.save_weights(params, out_dir / weights_name)
    t_end = time.perf_counter()
    manifest.update(
        status=status,
        error=error,
        step_losses=step_losses,
        epoch_losses=epoch_losses,
        val_losses=val_losses,
        timings={"load_s": t_load - t0, **train_timing, "total_s": t_end - t0},
        artifacts={"weights": weights_name, "checkpoints": checkpoints, "manifest": "manifest.json"},
    )
    _dump_json(manifest, out_dir / "manifest.json")
    if status != "ok":
        raise TrainingDiverged(error, params, step_losses)
    return manifest


# -- fusion and evaluation -------------------------------------------------------

def fuse(method, lrms, pan, weights=None, model_cfg=None, s=4):
    if method == "hmcnn":
        if weights is None:
            raise ValueError("hmcnn needs trained weights")
        return hmcnn.predict(lrms, pan, weights, model_cfg or hmcnn.HmcnnConfig())
    if method not in CLASSICAL_METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(FUSION_METHODS)}")
    return CLASSICAL_METHODS[method](FusionInput(lrms, pan, s))


def error_map(fused, ref):
    """Per-pixel squared error averaged over bands, as a one-band raster."""
    f, r = metrics._pair(fused, ref)
    err = ((f - r) ** 2).mean(axis=0)
    top = float(err.max())
    return rs.Raster(err[None], (rs.BandRole.UNKNOWN,), (0.0, top if top > 0 else 1.0))


def write_error_map(emap: rs.Raster, path):
    """PGM with ``gray = round(255 * err / scale)`` plus a JSON sidecar."""
    path = Path(path)
    rs.write_pnm(emap, path)
    sidecar = {
        "scale_max": emap.value_range[1],
        "mapping": "gray = round(255 * squared_error / scale_max), clamped to [0, 255]",
        "mean_squared_error": float(emap.data.mean()),
        "width": emap.width,
        "height": emap.height,
    }
    _dump_json(sidecar, path.with_name(path.name + ".json"))
    return sidecar


def bench(methods, pairs, repetitions=3, weights=None, model_cfg=None, s=4, clock=time.perf_counter):
    """Mean and minimum wall-clock per method over all pairs and repetitions."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    rows = []
    for method in methods:
        times = []
        for _ in range(repetitions):
            for lrms, pan in pairs:
                t = clock()
                fuse(method, lrms, pan, weights, model_cfg, s)
                times.append(clock() - t)
        rows.append({
            "method": method,
            "runs": len(times),
            "mean_s": float(np.mean(times)),
            "min_s": float(np.min(times)),
        })
    return rows


def write_bench_csv(rows, path):
    lines = list(BENCH_DISCLAIMER) + ["method,runs,mean_s,min_s"]
    lines += [f"{r['method']},{r['runs']},{r['mean_s']:.6f},{r['min_s']:.6f}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")
