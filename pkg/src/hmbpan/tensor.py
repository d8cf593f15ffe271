"""A small reverse-mode autodiff engine over float64 N x C x H x W arrays.

Every op returns a new :class:`Tensor`. When any input requires a gradient
the output keeps references to its parents and a closure that maps the
output gradient to input gradients; :func:`backward` replays those closures
in reverse topological order. Broadcasting is deliberately limited to
scalars and to a one-channel map spread over C channels.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import raster
from .prng import Xoshiro256

__all__ = [
    "Tensor",
    "ShapeError",
    "GradientError",
    "NumericError",
    "tensor",
    "constant",
    "conv2d",
    "relu",
    "sigmoid",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "add_scalar",
    "concat_channels",
    "slice_channels",
    "reshape",
    "resize",
    "mean_all",
    "backward",
    "topological_order",
    "Adam",
    "seeded_init",
    "save_weights",
    "load_weights",
    "WeightFileError",
]


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.values

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731


def tensor(values, requires_grad=False, name=None):
    return Tensor(np.array(values, dtype=np.float64), requires_grad, name)


def constant(values):
    return Tensor(values)


def _node(values, parents, backward_fn, op):
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _channel_broadcast(x, y, op):
    """Return which operand (if any) is a 1-channel map spread over the other."""
    if x.shape == y.shape:
        return None
    if x.ndim == y.ndim == 4 and x.shape[0] == y.shape[0] and x.shape[2:] == y.shape[2:]:
        if y.shape[1] == 1:
            return "y"
        if x.shape[1] == 1:
            return "x"
    raise ShapeError(f"{op}: shapes {x.shape} and {y.shape} are not compatible")


def _unbroadcast(g, target_shape):
    if g.shape == target_shape:
        return g
    return g.sum(axis=1, keepdims=True)


# -- elementwise -------------------------------------------------------------

def add(x, y):
    _channel_broadcast(x, y, "add")
    return _node(
        x.values + y.values,
        (x, y),
        lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
        "add",
    )


def sub(x, y):
    _channel_broadcast(x, y, "sub")
    return _node(
        x.values - y.values,
        (x, y),
        lambda g: (_unbroadcast(g, x.shape), -_unbroadcast(g, y.shape)),
        "sub",
    )


def mul(x, y):
    _channel_broadcast(x, y, "mul")
    xv, yv = x.values, y.values
    return _node(
        xv * yv,
        (x, y),
        lambda g: (_unbroadcast(g * yv, x.shape), _unbroadcast(g * xv, y.shape)),
        "mul",
    )


def scalar_mul(x, k):
    k = float(k)
    return _node(x.values * k, (x,), lambda g: (g * k,), "scalar_mul")


def add_scalar(x, k):
    return _node(x.values + float(k), (x,), lambda g: (g,), "add_scalar")


def relu(x):
    mask = x.values > 0
    return _node(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    y = expit(x.values)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


# -- structural --------------------------------------------------------------

def concat_channels(*xs):
    if len(xs) == 1 and isinstance(xs[0], (list, tuple)):
        xs = tuple(xs[0])
    ref = xs[0].shape
    for x in xs[1:]:
        if len(x.shape) != 4 or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: {x.shape} incompatible with {ref}")
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])
    return _node(
        np.concatenate([x.values for x in xs], axis=1),
        tuple(xs),
        lambda g: tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs))),
        "concat_channels",
    )


def slice_channels(x, start, stop=None):
    if stop is None:
        stop = start + 1
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"slice_channels: [{start}:{stop}] outside {c} channels")

    def bw(g):
        full = np.zeros(x.shape)
        full[:, start:stop] = g
        return (full,)

    return _node(x.values[:, start:stop].copy(), (x,), bw, "slice_channels")


def reshape(x, shape):
    old = x.shape
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _node(out, (x,), lambda g: (g.reshape(old),), "reshape")


def resize(x, height, width):
    """Differentiable bicubic resize of the spatial axes (raster-module kernel)."""
    h, w = x.shape[-2:]
    if (h, w) == (height, width):
        return _node(x.values.copy(), (x,), lambda g: (g,), "resize")
    my = raster.bicubic_matrix(h, height)
    mx = raster.bicubic_matrix(w, width)
    out = raster.resample_array(x.values, height, width)
    return _node(out, (x,), lambda g: (my.T @ g @ mx,), "resize")


def mean_all(x):
    n = x.values.size
    return _node(
        np.asarray(x.values.mean()),
        (x,),
        lambda g: (np.full(x.shape, float(g) / n),),
        "mean_all",
    )


# -- convolution -------------------------------------------------------------

def conv2d(x, weight, bias=None, stride=1, padding=1):
    """2-D cross-correlation (no kernel flip) with zero padding."""
    if len(x.shape) != 4 or len(weight.shape) != 4:
        raise ShapeError(f"conv2d: input {x.shape} and weight {weight.shape} must be 4-D")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels, weight {weight.shape} expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {weight.shape}")
    xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    ey, ex = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    cols = np.stack([xp[:, :, i : i + ey : stride, j : j + ex : stride] for i, j in offsets], axis=2)
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    wmat = weight.values.reshape(o, c * kh * kw)
    out = wmat @ cols
    if bias is not None:
        out += bias.values[:, None]
    out = out.reshape(n, o, ho, wo)

    def bw(g):
        g2 = g.reshape(n, o, ho * wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gcols = (wmat.T @ g2).reshape(n, c, kh * kw, ho, wo)
        gxp = np.zeros(xp.shape)
        for k, (i, j) in enumerate(offsets):
            gxp[:, :, i : i + ey : stride, j : j + ex : stride] += gcols[:, :, k]
        gx = gxp[:, :, padding : padding + h, padding : padding + w]
        grads = (gx, gw)
        if bias is not None:
            grads += (g2.sum(axis=(0, 2)),)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bw, "conv2d")


# -- backward ----------------------------------------------------------------

def topological_order(root):
    """Recorded nodes reachable from ``root``, inputs before outputs."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every leaf that requires a gradient.

    Leaf gradients accumulate across graphs until ``zero_grad``. A graph can
    be replayed only once; a second call raises :class:`GradientError`.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires grad")
    if loss._consumed:
        raise GradientError("graph already consumed by a previous backward call")
    order = topological_order(loss)
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._consumed = True
        node._backward = None


# -- optimizer ---------------------------------------------------------------

class Adam:
    """Adam with bias-corrected moments; state keyed by parameter name."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads, lr=None):
        """Update ``params`` (name -> ndarray) in place from ``grads``."""
        lr = self.lr if lr is None else lr
        for name, p in params.items():
            if grads[name].shape != p.shape:
                raise ShapeError(f"gradient {grads[name].shape} for {name} of shape {p.shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": self.m, "v": self.v}


# -- initialization ----------------------------------------------------------

def seeded_init(shape, seed, scheme="he_uniform"):
    """Deterministic parameter init.

    ``he_uniform`` draws U(-b, b) with ``b = sqrt(6 / fan_in)`` and
    ``fan_in = prod(shape[1:])`` from a xoshiro256** stream; ``zeros`` is
    for biases.
    """
    shape = tuple(int(d) for d in shape)
    if scheme == "zeros":
        return np.zeros(shape)
    if scheme != "he_uniform":
        raise ValueError(f"unknown init scheme {scheme!r}")
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 0
    if fan_in <= 0 or shape[0] <= 0:
        raise ValueError(f"he_uniform needs a positive fan-in, got shape {shape}")
    bound = np.sqrt(6.0 / fan_in)
    u = Xoshiro256(seed).random(int(np.prod(shape)))
    return ((2.0 * u - 1.0) * bound).reshape(shape)


# -- HMW1 weight files -------------------------------------------------------

HMW1_MAGIC = b"HMW1"


class WeightFileError(ValueError):
    pass


def save_weights(params, path):
    """Write a name -> ndarray mapping in the HMW1 layout."""
    out = bytearray(HMW1_MAGIC + struct.pack("<I", len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_weights(path):
    buf = Path(path).read_bytes()
    if buf[:4] != HMW1_MAGIC:
        raise WeightFileError(f"{path}: bad magic {buf[:4]!r}")
    try:
        (count,) = struct.unpack_from("<I", buf, 4)
        off = 8
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if off + 8 * n > len(buf):
                raise WeightFileError(f"{path}: truncated payload for {name!r} at byte {off}")
            params[name] = np.frombuffer(buf, "<f8", n, off).astype(np.float64).reshape(dims)
            off += 8 * n
    except struct.error as exc:
        raise WeightFileError(f"{path}: truncated file ({exc})") from None
    if off != len(buf):
        raise WeightFileError(f"{path}: {len(buf) - off} trailing bytes")
    return params
