"""Dense float64 operators with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Feature maps
are ``C x H x W`` (optionally with a leading batch axis), heat-map stacks
for the 3-D convolution are ``T x C x H x W`` (again optionally batched).

Layers record their forward input and expose ``backward`` which fills
``grads`` (same keys and shapes as ``params()``) and returns the gradient
with respect to the input.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_MAGIC = b"AMRPN1"


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError, FloatingPointError):
    """NaN or infinity reached an operator."""


class NotRecordedError(RuntimeError):
    """Raised when ``backward`` is called on a layer without a recorded forward."""


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{what}: non-finite values in input")


def out_extent(n: int, k: int, pad: int, stride: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


# --------------------------------------------------------------------------
# 2-D convolution (cross-correlation)


def _im2col2d(xp, kh, kw, stride):
    """(n,c,h,w) padded input -> (n,ho,wo,c*kh*kw) patch matrix."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * kh * kw)


def _conv2d_cols(x, weight, bias, stride, pad):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 3/4-D input and 4-D weight, got {x.shape} and {weight.shape}")
    _check_finite(x, "conv2d")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    ho, wo = out_extent(h, kh, pad, stride), out_extent(w, kw, pad, stride)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent {ho}x{wo} from input {h}x{w}, kernel {kh}x{kw}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col2d(xp, kh, kw, stride)
    out = cols @ weight.reshape(o, -1).T + bias  # n,ho,wo,o
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cols


def conv2d_forward(x, weight, bias, stride=1, pad=0):
    """Cross-correlate ``x`` (C,H,W or N,C,H,W) with ``weight`` (O,C,kh,kw)."""
    squeeze = np.ndim(x) == 3
    out, _ = _conv2d_cols(x[None] if squeeze else x, weight, bias, stride, pad)
    return out[0] if squeeze else out


def conv2d_backward(gout, x, weight, stride=1, pad=0, input_grad=True, cols=None):
    """Return ``(grad_x, grad_weight, grad_bias)``; ``grad_x`` is None if not requested.

    ``cols`` is the patch matrix from the forward pass, recomputed when absent.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x, gout = x[None], gout[None]
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho, wo = gout.shape[2:]
    if gout.shape != (n, o, ho, wo) or (ho, wo) != (out_extent(h, kh, pad, stride), out_extent(w, kw, pad, stride)):
        raise ShapeError(f"conv2d backward: upstream gradient shape {gout.shape} does not match forward")
    if cols is None:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        cols = _im2col2d(xp, kh, kw, stride)
    g2 = gout.transpose(0, 2, 3, 1).reshape(-1, o)
    gw = (g2.T @ cols.reshape(-1, c * kh * kw)).reshape(weight.shape)
    gb = g2.sum(axis=0)
    gx = None
    if input_grad:
        if stride == 1 and pad <= min(kh, kw) - 1:
            # correlation of the zero-padded upstream gradient with the flipped, transposed kernel
            gpad = np.pad(gout, ((0, 0), (0, 0), (kh - 1 - pad, kh - 1 - pad), (kw - 1 - pad, kw - 1 - pad)))
            wt = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = _conv2d_cols(gpad, wt, np.zeros(c), 1, 0)
        else:
            gcols = (g2 @ weight.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
            for dy in range(kh):
                for dx in range(kw):
                    gxp[:, :, dy:dy + stride * (ho - 1) + 1:stride, dx:dx + stride * (wo - 1) + 1:stride] += \
                        gcols[..., dy, dx].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + w]
        gx = gx[0] if squeeze else gx
    return gx, gw, gb


# --------------------------------------------------------------------------
# 3-D convolution over (time, space)


def conv3d_forward(x, weight, bias, stride=1, pad=0, tpad=0):
    """Cross-correlate ``x`` (T,C,H,W or N,T,C,H,W) with ``weight`` (O,C,kt,kh,kw).

    The temporal window is summed, so each output time step adds up the
    per-frame 2-D responses of ``kt`` consecutive frames.  Output layout is
    (N,)T',O,H',W'.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 4
    if squeeze:
        x = x[None]
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 4/5-D input and 5-D weight, got {x.shape} and {weight.shape}")
    _check_finite(x, "conv3d")
    n, t, c, h, w = x.shape
    o, ci, kt, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv3d channel mismatch: input has {c}, weight expects {ci}")
    to = out_extent(t, kt, tpad, 1)
    ho, wo = out_extent(h, kh, pad, stride), out_extent(w, kw, pad, stride)
    if to < 1 or ho < 1 or wo < 1:
        raise ShapeError(f"conv3d output extent {to}x{ho}x{wo} from input {t}x{h}x{w}")
    xp = np.pad(x, ((0, 0), (tpad, tpad), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kt, kh, kw), axis=(1, 3, 4))[:, :, :, ::stride, ::stride]
    # win: n,to,c,ho,wo,kt,kh,kw
    out = np.tensordot(win, weight, axes=([2, 5, 6, 7], [1, 2, 3, 4]))  # n,to,ho,wo,o
    out = np.ascontiguousarray(out.transpose(0, 1, 4, 2, 3)) + bias[None, None, :, None, None]
    return out[0] if squeeze else out


def conv3d_backward(gout, x, weight, stride=1, pad=0, tpad=0, input_grad=True):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 4
    if squeeze:
        x, gout = x[None], gout[None]
    n, t, c, h, w = x.shape
    o, _, kt, kh, kw = weight.shape
    to, _, ho, wo = gout.shape[1:]
    expected = (n, out_extent(t, kt, tpad, 1), o, out_extent(h, kh, pad, stride), out_extent(w, kw, pad, stride))
    if gout.shape != expected:
        raise ShapeError(f"conv3d backward: upstream gradient shape {gout.shape}, expected {expected}")
    xp = np.pad(x, ((0, 0), (tpad, tpad), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kt, kh, kw), axis=(1, 3, 4))[:, :, :, ::stride, ::stride]
    gw = np.tensordot(gout, win, axes=([0, 1, 3, 4], [0, 1, 3, 4]))  # o,c,kt,kh,kw
    gb = gout.sum(axis=(0, 1, 3, 4))
    gx = None
    if input_grad:
        gxp = np.zeros_like(xp)
        gt = gout.transpose(0, 1, 3, 4, 2)  # n,to,ho,wo,o
        for dt in range(kt):
            for dy in range(kh):
                for dx in range(kw):
                    contrib = (gt @ weight[:, :, dt, dy, dx]).transpose(0, 1, 4, 2, 3)  # n,to,c,ho,wo
                    gxp[:, dt:dt + to, :, dy:dy + stride * (ho - 1) + 1:stride, dx:dx + stride * (wo - 1) + 1:stride] += contrib
        gx = gxp[:, tpad:tpad + t, :, pad:pad + h, pad:pad + w]
        gx = gx[0] if squeeze else gx
    return gx, gw, gb


# --------------------------------------------------------------------------
# elementwise / pooling / softmax


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(gout, x):
    return gout * (x > 0)


def _quads(x):
    return (x[..., ::2, ::2], x[..., ::2, 1::2], x[..., 1::2, ::2], x[..., 1::2, 1::2])


def maxpool2_forward(x):
    """2x2 max-pool with stride 2 over the last two axes; extents must be even."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even extents, got {h}x{w}")
    a, b, c, d = _quads(x)
    return np.maximum(np.maximum(a, b), np.maximum(c, d))


def maxpool2_backward(gout, x, out=None):
    """Route each upstream value to the first maximum of its window (raster order)."""
    if out is None:
        out = maxpool2_forward(x)
    gx = np.zeros_like(x)
    taken = np.zeros(out.shape, dtype=bool)
    for src, dst in zip(_quads(x), _quads(gx)):
        hit = (src == out) & ~taken
        dst[...] = gout * hit
        taken |= hit
    return gx


def pixel_softmax(x):
    """Two-way softmax over the channel axis (-3) of a (...,2,H,W) tensor."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 3 or x.shape[-3] != 2:
        raise ShapeError(f"pixel_softmax expects 2 channels on axis -3, got shape {x.shape}")
    _check_finite(x, "pixel_softmax")
    z = x - x.max(axis=-3, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-3, keepdims=True)


def pixel_softmax_backward(gout, probs):
    inner = (gout * probs).sum(axis=-3, keepdims=True)
    return probs * (gout - inner)


# --------------------------------------------------------------------------
# layers


@dataclass
class Conv2d:
    """Trainable 2-D convolution layer."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    pad: int = 0
    grads: dict = field(default_factory=dict, repr=False)
    _x: np.ndarray | None = field(default=None, repr=False)
    _cols: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"Conv2d weight must be 4-D, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("Conv2d bias length must equal out-channels")
        if self.stride < 1 or self.pad < 0:
            raise ValueError("stride must be >= 1 and pad >= 0")

    @classmethod
    def init(cls, cin, cout, k, rng, stride=1, pad=None):
        pad = k // 2 if pad is None else pad
        w = glorot_uniform((cout, cin, k, k), cin * k * k, cout * k * k, rng)
        return cls(w, np.zeros(cout), stride, pad)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        squeeze = np.ndim(x) == 3
        out, self._cols = _conv2d_cols(x[None] if squeeze else x, self.weight, self.bias, self.stride, self.pad)
        self._x = x
        return out[0] if squeeze else out

    def backward(self, gout, input_grad=True):
        if self._x is None:
            raise NotRecordedError("Conv2d.backward called before forward")
        cols = self._cols if np.ndim(self._x) == 4 else None
        gx, gw, gb = conv2d_backward(gout, self._x, self.weight, self.stride, self.pad, input_grad, cols)
        self.grads = {"weight": gw, "bias": gb}
        return gx


@dataclass
class Conv3d:
    """Trainable spatiotemporal convolution layer."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    pad: int = 0
    tpad: int = 0
    grads: dict = field(default_factory=dict, repr=False)
    _x: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.weight.ndim != 5:
            raise ShapeError(f"Conv3d weight must be 5-D, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("Conv3d bias length must equal out-channels")
        if self.stride < 1 or self.pad < 0 or self.tpad < 0:
            raise ValueError("stride must be >= 1 and paddings >= 0")

    @classmethod
    def init(cls, cin, cout, kt, k, rng, pad=None, tpad=0):
        pad = k // 2 if pad is None else pad
        w = glorot_uniform((cout, cin, kt, k, k), cin * kt * k * k, cout * kt * k * k, rng)
        return cls(w, np.zeros(cout), 1, pad, tpad)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        self._x = x
        return conv3d_forward(x, self.weight, self.bias, self.stride, self.pad, self.tpad)

    def backward(self, gout, input_grad=True):
        if self._x is None:
            raise NotRecordedError("Conv3d.backward called before forward")
        gx, gw, gb = conv3d_backward(gout, self._x, self.weight, self.stride, self.pad, self.tpad, input_grad)
        self.grads = {"weight": gw, "bias": gb}
        return gx


def named_params(layers: dict) -> dict:
    """Flatten ``{layer_name: layer}`` into ``{"layer.weight": array, ...}``."""
    return {f"{name}.{k}": v for name, layer in layers.items() for k, v in layer.params().items()}


def named_grads(layers: dict) -> dict:
    out = {}
    for name, layer in layers.items():
        if not layer.grads:
            raise NotRecordedError(f"no gradient recorded for layer {name!r}")
        out.update({f"{name}.{k}": v for k, v in layer.grads.items()})
    return out


def sgd_step(params: dict, grads: dict, lr: float) -> None:
    """In-place ``p -= lr * g`` for every named parameter."""
    if not np.isfinite(lr) or lr < 0:
        raise ValueError(f"learning rate must be finite and non-negative, got {lr}")
    if params.keys() != grads.keys():
        raise KeyError(f"gradient keys {sorted(grads)} do not match parameters {sorted(params)}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if lr:
            p -= lr * g


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, arrays: dict) -> None:
    """Write named float64 arrays to the ``AMRPN1`` container."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not an AMRPN1 checkpoint")
    pos, out = len(CHECKPOINT_MAGIC), {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            dims = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * count > len(data):
                raise ValueError("truncated record")
            out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return out
