"""Multi-band raster model, bicubic resampling and the MBR1 container.

Rasters are stored planar, shape ``(bands, height, width)``, as float64.
Resampling is separable and linear: mathematically every resize is
``My @ band @ Mx.T`` for per-axis bicubic weight matrices, which the
tensor engine reuses for the backward pass of its differentiable resize.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "BandRole",
    "Raster",
    "PatchEntry",
    "PatchSet",
    "RasterFormatError",
    "keys_kernel",
    "bicubic_matrix",
    "bicubic_resample",
    "resample_array",
    "downsample",
    "upsample",
    "lowpass",
    "highpass",
    "wald_degrade",
    "crop_patches",
    "read_raster",
    "write_raster",
    "write_pnm",
    "synthesize_scene",
]

KEYS_A = -0.5
MBR1_MAGIC = b"MBR1"
SUPPORTED_SCALES = (1, 2, 4)


class BandRole(enum.IntEnum):
    R = 0
    G = 1
    B = 2
    NIR = 3
    PAN = 4
    UNKNOWN = 255


MS_ROLES = (BandRole.R, BandRole.G, BandRole.B, BandRole.NIR)


class RasterFormatError(ValueError):
    """Malformed MBR1 payload; ``offset`` is the byte where parsing failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Raster:
    data: np.ndarray
    band_roles: tuple = ()
    value_range: tuple = (0.0, 2047.0)
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"raster data must be (bands, height, width), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("raster contains NaN or Inf")
        roles = tuple(BandRole(r) for r in self.band_roles) if self.band_roles else None
        if roles is None:
            roles = (BandRole.UNKNOWN,) * data.shape[0]
        if len(roles) != data.shape[0]:
            raise ValueError(f"{len(roles)} band roles for {data.shape[0]} bands")
        if BandRole.PAN in roles and data.shape[0] != 1:
            raise ValueError("a PAN raster must have exactly one band")
        lo, hi = (float(v) for v in self.value_range)
        if not hi > lo:
            raise ValueError(f"empty value_range {self.value_range}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "band_roles", roles)
        object.__setattr__(self, "value_range", (lo, hi))

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def span(self) -> float:
        return self.value_range[1] - self.value_range[0]

    def with_data(self, data, band_roles=None) -> "Raster":
        roles = self.band_roles if band_roles is None else band_roles
        return Raster(data, roles, self.value_range)

    def band(self, role) -> np.ndarray:
        role = BandRole(role)
        try:
            return self.data[self.band_roles.index(role)]
        except ValueError:
            raise KeyError(f"raster has no {role.name} band") from None

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return (
            self.band_roles == other.band_roles
            and self.value_range == other.value_range
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )

    __hash__ = None


def keys_kernel(d, a=KEYS_A):
    """Keys cubic convolution kernel evaluated at offsets ``d``."""
    d = np.abs(np.asarray(d, dtype=np.float64))
    d2, d3 = d * d, d * d * d
    near = (a + 2.0) * d3 - (a + 3.0) * d2 + 1.0
    far = a * d3 - 5.0 * a * d2 + 8.0 * a * d - 4.0 * a
    return np.where(d <= 1.0, near, np.where(d < 2.0, far, 0.0))


@lru_cache(maxsize=256)
def _axis_taps(src_n, dst_n):
    scale = src_n / dst_n
    x = (np.arange(dst_n) + 0.5) * scale - 0.5
    x0 = np.floor(x)
    t = x - x0
    k = np.arange(-1, 3)
    idx = np.clip(x0.astype(np.int64)[:, None] + k, 0, src_n - 1)
    weights = keys_kernel(t[:, None] - k)
    for a in (idx, weights):
        a.setflags(write=False)
    return idx, weights


@lru_cache(maxsize=256)
def _bicubic_matrix_cached(src_n, dst_n):
    idx, weights = _axis_taps(src_n, dst_n)
    m = np.zeros((dst_n, src_n))
    rows = np.repeat(np.arange(dst_n), 4)
    np.add.at(m, (rows, idx.ravel()), weights.ravel())
    m.setflags(write=False)
    return m


def bicubic_matrix(src_n: int, dst_n: int) -> np.ndarray:
    """Return the ``(dst_n, src_n)`` resampling matrix for one axis.

    Pixel-center alignment, clamp-replicated borders. Rows sum to one.
    """
    if src_n < 1 or dst_n < 1:
        raise ValueError(f"resample sizes must be >= 1, got {src_n} -> {dst_n}")
    return _bicubic_matrix_cached(int(src_n), int(dst_n))


def _resample_last_axis(arr, dst_n):
    idx, weights = _axis_taps(arr.shape[-1], dst_n)
    # anchored on the k=0 tap: constant rows come out bit-exact
    anchor = arr[..., idx[:, 1]]
    return anchor + ((arr[..., idx] - anchor[..., None]) * weights).sum(axis=-1)


def resample_array(arr, target_height, target_width):
    """Bicubic resize over the last two axes of ``arr``.

    Equal to ``My @ arr @ Mx.T`` up to rounding, but evaluated per tap as
    ``x[anchor] + sum(w * (x[tap] - x[anchor]))`` so that constants are
    reproduced exactly.
    """
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[-2:]
    if target_height < 1 or target_width < 1:
        raise ValueError(f"target dims must be >= 1, got {target_height}x{target_width}")
    if (h, w) == (target_height, target_width):
        return arr.copy()
    out = arr if w == target_width else _resample_last_axis(arr, target_width)
    if h != target_height:
        out = np.swapaxes(_resample_last_axis(np.swapaxes(out, -1, -2), target_height), -1, -2)
    return np.ascontiguousarray(out)


def bicubic_resample(src: Raster, target_width: int, target_height: int) -> Raster:
    if target_width < 1 or target_height < 1:
        raise ValueError(f"target dims must be >= 1, got {target_width}x{target_height}")
    return src.with_data(resample_array(src.data, target_height, target_width))


def _check_scale(s):
    if s not in SUPPORTED_SCALES:
        raise ValueError(f"scale factor must be one of {SUPPORTED_SCALES}, got {s}")


def downsample(src: Raster, s: int) -> Raster:
    _check_scale(s)
    if src.width % s or src.height % s:
        raise ValueError(f"{src.width}x{src.height} raster not divisible by scale {s}")
    return bicubic_resample(src, src.width // s, src.height // s)


def upsample(src: Raster, s: int) -> Raster:
    _check_scale(s)
    return bicubic_resample(src, src.width * s, src.height * s)


def lowpass_array(arr, s):
    """Downsample by ``s`` then upsample back: the smooth part of ``arr``."""
    h, w = arr.shape[-2:]
    if h % s or w % s:
        raise ValueError(f"{w}x{h} image not divisible by scale {s}")
    small = resample_array(arr, h // s, w // s)
    return resample_array(small, h, w)


def lowpass(p: Raster, s: int) -> Raster:
    _check_scale(s)
    return p.with_data(lowpass_array(p.data, s))


def highpass(p: Raster, s: int) -> Raster:
    """PAN detail: ``P - U(D(P))``."""
    _check_scale(s)
    if p.bands != 1:
        raise ValueError(f"highpass expects a single-band raster, got {p.bands} bands")
    return p.with_data(p.data - lowpass_array(p.data, s))


def wald_degrade(hrms: Raster, pan: Raster, s: int):
    """Reduced-resolution training triple: the originals become ground truth."""
    if (pan.width, pan.height) != (hrms.width, hrms.height):
        raise ValueError(
            f"pan {pan.width}x{pan.height} and hrms {hrms.width}x{hrms.height} differ"
        )
    if s == 1:
        return hrms, pan
    return downsample(hrms, s), pan


@dataclass(frozen=True)
class PatchEntry:
    hrms: Raster
    pan: Raster
    lrms: Raster
    source: str
    row: int
    col: int


@dataclass
class PatchSet:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]


def crop_patches(hrms, pan, patch=256, stride=256, s=4, source="scene"):
    """Grid-crop aligned hrms/pan tiles and degrade each into a training triple.

    Partial edge tiles are dropped. Order is row-major.
    """
    if patch % s:
        raise ValueError(f"patch {patch} not divisible by scale {s}")
    if stride < 1:
        raise ValueError("stride must be positive")
    if (pan.width, pan.height) != (hrms.width, hrms.height):
        raise ValueError("pan and hrms geometry differ")
    out = PatchSet()
    for r in range(0, hrms.height - patch + 1, stride):
        for c in range(0, hrms.width - patch + 1, stride):
            h = hrms.with_data(hrms.data[:, r : r + patch, c : c + patch])
            p = pan.with_data(pan.data[:, r : r + patch, c : c + patch])
            lr, p = wald_degrade(h, p, s)
            out.entries.append(PatchEntry(h, p, lr, source, r, c))
    return out


# -- MBR1 container ---------------------------------------------------------

_HEADER = struct.Struct("<4sIII")
_RANGE = struct.Struct("<dd")


def write_raster(r: Raster, path) -> None:
    payload = bytearray(_HEADER.pack(MBR1_MAGIC, r.width, r.height, r.bands))
    payload += bytes(int(role) for role in r.band_roles)
    payload += _RANGE.pack(*r.value_range)
    payload += np.ascontiguousarray(r.data, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(payload))


def read_raster(path) -> Raster:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise RasterFormatError("truncated header", len(buf))
    magic, width, height, bands = _HEADER.unpack_from(buf, 0)
    if magic != MBR1_MAGIC:
        raise RasterFormatError(f"bad magic {magic!r}", 0)
    if min(width, height, bands) < 1:
        raise RasterFormatError("zero dimension", 4)
    n = width * height * bands
    if n * 8 > 2**40:
        raise RasterFormatError("dimension overflow", 4)
    off = _HEADER.size
    if len(buf) < off + bands:
        raise RasterFormatError("truncated role table", len(buf))
    try:
        roles = tuple(BandRole(b) for b in buf[off : off + bands])
    except ValueError as exc:
        raise RasterFormatError(f"unknown role code: {exc}", off) from None
    off += bands
    if len(buf) < off + _RANGE.size:
        raise RasterFormatError("truncated value range", len(buf))
    vrange = _RANGE.unpack_from(buf, off)
    off += _RANGE.size
    if len(buf) < off + 8 * n:
        raise RasterFormatError(f"payload needs {8 * n} bytes", len(buf))
    if len(buf) > off + 8 * n:
        raise RasterFormatError("trailing bytes after payload", off + 8 * n)
    data = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64)
    try:
        return Raster(data.reshape(bands, height, width), roles, vrange)
    except ValueError as exc:
        raise RasterFormatError(str(exc), off) from None


def to_uint8(arr, value_range):
    lo, hi = value_range
    scaled = (np.asarray(arr, dtype=np.float64) - lo) * (255.0 / (hi - lo))
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def write_pnm(r: Raster, path, value_range=None) -> None:
    """8-bit PGM (one band) or PPM (RGB composite) export, clamped."""
    vr = r.value_range if value_range is None else value_range
    if r.bands == 1:
        header, img = b"P5", to_uint8(r.data[0], vr)
    else:
        if all(role in r.band_roles for role in MS_ROLES[:3]):
            rgb = np.stack([r.band(role) for role in MS_ROLES[:3]])
        elif r.bands >= 3:
            rgb = r.data[:3]
        else:
            raise ValueError("PPM export needs three bands")
        header, img = b"P6", to_uint8(np.moveaxis(rgb, 0, -1), vr)
    with open(path, "wb") as fh:
        fh.write(header + f"\n{r.width} {r.height}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


# -- synthetic scenes -------------------------------------------------------

def _value_noise(rng, height, width, cell):
    gh, gw = max(2, height // cell), max(2, width // cell)
    return resample_array(rng.random((gh, gw)), height, width)


def synthesize_scene(width=256, height=256, seed=0, value_range=(0.0, 2047.0)):
    """Textured 4-band scene and its PAN band, both at full resolution.

    Bands share a multi-octave texture plus piecewise-constant fields with
    sharp edges, each with its own gain and offset; PAN is the band mean.
    Returns ``(hrms, pan)``.
    """
    rng = np.random.default_rng(seed)
    texture = sum(
        amp * _value_noise(rng, height, width, cell)
        for amp, cell in ((1.0, 32), (0.6, 16), (0.45, 8), (0.35, 4), (0.25, 2))
    )
    fields = np.zeros((height, width))
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(max(4, width * height // 2048)):
        cy, cx = rng.integers(0, height), rng.integers(0, width)
        ry, rx = rng.integers(3, max(4, height // 6)), rng.integers(3, max(4, width // 6))
        fields[(abs(yy - cy) <= ry) & (abs(xx - cx) <= rx)] += rng.uniform(-0.8, 0.8)
    detail = texture / 2.65 + 0.5 * fields
    gains = np.array([0.9, 1.0, 1.1, 1.25])
    offsets = rng.uniform(0.25, 0.4, size=4)
    bands = np.stack(
        [
            offsets[b] + 0.3 * gains[b] * detail + 0.05 * _value_noise(rng, height, width, 64)
            for b in range(4)
        ]
    )
    lo, hi = value_range
    bands = lo + (hi - lo) * np.clip(bands, 0.02, 0.98)
    hrms = Raster(bands, MS_ROLES, value_range)
    pan = Raster(bands.mean(axis=0, keepdims=True), (BandRole.PAN,), value_range)
    return hrms, pan


def stack_bands(rasters: Sequence[Raster]) -> Raster:
    data = np.concatenate([r.data for r in rasters])
    roles = sum((r.band_roles for r in rasters), ())
    return Raster(data, roles, rasters[0].value_range)
