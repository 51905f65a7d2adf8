"""Dense numeric primitives with explicit backward passes.

Volumes are ``(C, D, H, W)`` arrays, matrices are ``(rows, cols)`` arrays,
both row-major.  Every forward op here is a pure function of its inputs and
has a matching ``*_backward`` that returns gradients for each input.  There is
no autodiff graph: composite layers elsewhere chain these by hand.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .errors import DimensionError

EPS = 1e-5

DTYPES = {"f32": np.float32, "f64": np.float64}


def as_triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise DimensionError(f"expected 3 values, got {len(t)}")
    return t


def check_volume(x: np.ndarray, name: str = "volume") -> np.ndarray:
    if x.ndim != 4 or min(x.shape) < 1:
        raise DimensionError(f"{name} must be a non-empty (C, D, H, W) array, got shape {x.shape}")
    return x


@dataclass
class DualValue:
    """A value paired with an additive gradient accumulator."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise DimensionError(f"grad shape {g.shape} != value shape {self.value.shape}")
        self.grad += g

    def zero_grad(self) -> None:
        self.grad[...] = 0


# -- matrix ops -------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_backward(a, b, dc):
    return dc @ b.T, a.T @ dc


def linear(x, w, b=None):
    """Row-wise affine map ``x @ w + b``."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} != weight rows {w.shape[0]}")
    y = x @ w
    if b is not None:
        y = y + b
    return y


def linear_backward(x, w, dy):
    """Returns ``(dx, dw, db)``."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ w.T, x2.T @ dy2, dy2.sum(axis=0)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits)
    if logits.size == 0 or logits.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y, dy, axis: int = -1):
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, dy):
    return np.where(x > 0, dy, 0)


# -- normalization ------------------------------------------------------------


def layer_norm(x, gain, bias, eps: float = EPS):
    """Normalize over the last axis.  Returns ``(y, cache)``."""
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise DimensionError(f"gain/bias width must equal {x.shape[-1]}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(cache, dy):
    """Returns ``(dx, dgain, dbias)``."""
    xhat, inv, gain = cache
    dxhat = dy * gain
    m = xhat.shape[-1]
    dx = inv / m * (
        m * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    lead = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=lead), dy.sum(axis=lead)


def instance_norm(x, gain, bias, eps: float = EPS):
    """Per-channel normalization over (D, H, W).  Returns ``(y, cache)``."""
    check_volume(x)
    c = x.shape[0]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"gain/bias must have shape ({c},)")
    flat = x.reshape(c, -1)
    mu = flat.mean(axis=1, keepdims=True)
    xc = flat - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gain[:, None] + bias[:, None]
    return y.reshape(x.shape), (xhat, inv, gain, x.shape)


def instance_norm_backward(cache, dy):
    xhat, inv, gain, shape = cache
    c = shape[0]
    dy = dy.reshape(c, -1)
    dxhat = dy * gain[:, None]
    m = xhat.shape[1]
    dx = inv / m * (
        m * dxhat
        - dxhat.sum(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
    )
    return dx.reshape(shape), (dy * xhat).sum(axis=1), dy.sum(axis=1)


# -- convolutions -----------------------------------------------------------


def _conv_geometry(x, w, stride, padding):
    check_volume(x, "conv input")
    if w.ndim != 5 or w.shape[1] != x.shape[0]:
        raise DimensionError(f"kernel shape {w.shape} incompatible with input channels {x.shape[0]}")
    stride, padding = as_triple(stride), as_triple(padding)
    k = w.shape[2:]
    padded = [n + 2 * p for n, p in zip(x.shape[1:], padding)]
    if any(kk > n for kk, n in zip(k, padded)):
        raise DimensionError(f"kernel {k} larger than padded input {tuple(padded)}")
    out = tuple((n - kk) // s + 1 for n, kk, s in zip(padded, k, stride))
    return stride, padding, out


def _window(xp, offset, out, stride):
    a, b, c = offset
    sd, sh, sw = stride
    od, oh, ow = out
    return xp[:, a : a + sd * (od - 1) + 1 : sd, b : b + sh * (oh - 1) + 1 : sh, c : c + sw * (ow - 1) + 1 : sw]


def conv3d(x, w, b=None, stride=1, padding=0):
    """3D cross-correlation; ``w`` is ``(C_out, C_in, kd, kh, kw)``."""
    stride, padding, out = _conv_geometry(x, w, stride, padding)
    xp = np.pad(x, [(0, 0)] + [(p, p) for p in padding])
    y = np.zeros((w.shape[0],) + out, dtype=np.result_type(x, w))
    for off in product(*(range(k) for k in w.shape[2:])):
        patch = _window(xp, off, out, stride)
        y += np.tensordot(w[(slice(None), slice(None)) + off], patch, axes=(1, 0))
    if b is not None:
        y += b[:, None, None, None]
    return y


def conv3d_backward(x, w, dy, stride=1, padding=0):
    """Returns ``(dx, dw, db)``."""
    stride, padding, out = _conv_geometry(x, w, stride, padding)
    if dy.shape != (w.shape[0],) + out:
        raise DimensionError(f"upstream gradient shape {dy.shape} != output shape {(w.shape[0],) + out}")
    xp = np.pad(x, [(0, 0)] + [(p, p) for p in padding])
    dxp = np.zeros_like(xp, dtype=np.result_type(x, dy))
    dw = np.zeros_like(w, dtype=np.result_type(w, dy))
    for off in product(*(range(k) for k in w.shape[2:])):
        idx = (slice(None), slice(None)) + off
        dw[idx] = np.tensordot(dy, _window(xp, off, out, stride), axes=([1, 2, 3], [1, 2, 3]))
        _window(dxp, off, out, stride)[...] += np.tensordot(w[idx], dy, axes=(0, 0))
    pd, ph, pw = padding
    dx = dxp[:, pd : pd + x.shape[1], ph : ph + x.shape[2], pw : pw + x.shape[3]]
    return dx, dw, dy.sum(axis=(1, 2, 3))


def transposed_conv3d(x, w, b=None, stride=2):
    """Upsampling transposed convolution with kernel size equal to stride.

    ``w`` is ``(C_in, C_out, sd, sh, sw)``; output dims are ``in * stride``.
    """
    check_volume(x, "transposed conv input")
    stride = as_triple(stride)
    if w.ndim != 5 or w.shape[0] != x.shape[0] or tuple(w.shape[2:]) != stride:
        raise DimensionError(f"kernel shape {w.shape} incompatible with input {x.shape} and stride {stride}")
    _, d, h, ww = x.shape
    co = w.shape[1]
    # (o, a, b, c, d, h, w) -> interleave to (o, d, a, h, b, w, c)
    y = np.tensordot(w, x, axes=(0, 0)).transpose(0, 4, 1, 5, 2, 6, 3)
    y = y.reshape(co, d * stride[0], h * stride[1], ww * stride[2])
    if b is not None:
        y = y + b[:, None, None, None]
    return y


def transposed_conv3d_backward(x, w, dy):
    """Returns ``(dx, dw, db)``."""
    ci, co = w.shape[:2]
    sd, sh, sw = w.shape[2:]
    _, d, h, ww = x.shape
    if dy.shape != (co, d * sd, h * sh, ww * sw):
        raise DimensionError(f"upstream gradient shape {dy.shape} mismatched")
    # (o, d, a, h, b, w, c) -> (o, a, b, c, d, h, w)
    g = dy.reshape(co, d, sd, h, sh, ww, sw).transpose(0, 2, 4, 6, 1, 3, 5)
    dx = np.tensordot(w, g, axes=([1, 2, 3, 4], [0, 1, 2, 3]))
    dw = np.tensordot(x, g, axes=([1, 2, 3], [4, 5, 6]))
    return dx, dw, dy.sum(axis=(1, 2, 3))
