"""Deformable transformer layers: MS-DMSA + FFN, post-norm residuals."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .bridge import TokenSequence
from .errors import ConfigError, DimensionError
from .msdmsa import DmsaParams, msdmsa_backward, msdmsa_forward


@dataclass
class DeTransLayerParams:
    attn: DmsaParams
    w1: np.ndarray  # (C, F)
    b1: np.ndarray
    w2: np.ndarray  # (F, C)
    b2: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray

    def __post_init__(self):
        c, f = self.w1.shape
        if f < 1 or c != self.attn.channels:
            raise ConfigError(f"FFN shape {self.w1.shape} inconsistent with width {self.attn.channels}")
        if self.w2.shape != (f, c) or self.b1.shape != (f,) or self.b2.shape != (c,):
            raise ConfigError("FFN weight shapes are inconsistent")
        for name in ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
            if getattr(self, name).shape != (c,):
                raise ConfigError(f"{name} must have shape ({c},)")

    @property
    def channels(self) -> int:
        return self.w1.shape[0]

    @property
    def ffn_width(self) -> int:
        return self.w1.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"attn.{k}": v for k, v in self.attn.arrays().items()}
        for name in ("w1", "b1", "w2", "b2", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
            out[name] = getattr(self, name)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], heads: int, levels: int, points: int):
        attn = DmsaParams(**{k[5:]: v for k, v in arrays.items() if k.startswith("attn.")},
                          heads=heads, levels=levels, points=points)
        return cls(attn, **{k: v for k, v in arrays.items() if not k.startswith("attn.")})

    @classmethod
    def init(cls, channels, ffn, heads, levels, points, rng=None, dtype=np.float64):
        rng = np.random.default_rng(rng)
        a1 = math.sqrt(6.0 / (channels + ffn))
        return cls(
            attn=DmsaParams.init(channels, heads, levels, points, rng, dtype),
            w1=rng.uniform(-a1, a1, (channels, ffn)).astype(dtype),
            b1=np.zeros(ffn, dtype),
            w2=rng.uniform(-a1, a1, (ffn, channels)).astype(dtype),
            b2=np.zeros(channels, dtype),
            ln1_gain=np.ones(channels, dtype), ln1_bias=np.zeros(channels, dtype),
            ln2_gain=np.ones(channels, dtype), ln2_bias=np.zeros(channels, dtype),
        )


# encoder parameters are just an ordered list of layers sharing (C, H, L, K, F)
EncoderParams = list


def check_encoder(layers: EncoderParams) -> None:
    if not layers:
        return
    a = layers[0]
    key = (a.channels, a.attn.heads, a.attn.levels, a.attn.points, a.ffn_width)
    for lp in layers[1:]:
        if (lp.channels, lp.attn.heads, lp.attn.levels, lp.attn.points, lp.ffn_width) != key:
            raise ConfigError("all encoder layers must share (C, H, L, K, F)")


def _dropout(x, rate, rng):
    if rate <= 0:
        return x, None
    if rng is None:
        raise ValueError("dropout with a positive rate needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def ffn(x, params: DeTransLayerParams, dropout: float = 0.0, rng=None):
    """Linear -> ReLU -> Linear (dropout after each linear).  Returns ``(y, cache)``."""
    if x.shape[-1] != params.channels:
        raise DimensionError(f"FFN input width {x.shape[-1]} != {params.channels}")
    u = T.linear(x, params.w1, params.b1)
    r = T.relu(u)
    r, m1 = _dropout(r, dropout, rng)
    y = T.linear(r, params.w2, params.b2)
    y, m2 = _dropout(y, dropout, rng)
    return y, (x, u, r, m1, m2)


def ffn_backward(params: DeTransLayerParams, cache, dy):
    x, u, r, m1, m2 = cache
    if m2 is not None:
        dy = dy * m2
    dr, dw2, db2 = T.linear_backward(r, params.w2, dy)
    if m1 is not None:
        dr = dr * m1
    du = T.relu_backward(u, dr)
    dx, dw1, db1 = T.linear_backward(x, params.w1, du)
    return dx, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def detrans_layer(seq: TokenSequence, refs, params: DeTransLayerParams, dropout: float = 0.0, rng=None):
    """``y = LN1(x + MSDMSA(x))``, ``out = LN2(y + FFN(y))``.  Returns ``(seq, cache)``."""
    x = seq.tokens
    a, ws = msdmsa_forward(seq, refs, params.attn)
    y, ln1 = T.layer_norm(x + a.tokens, params.ln1_gain, params.ln1_bias)
    f, fc = ffn(y, params, dropout, rng)
    out, ln2 = T.layer_norm(y + f, params.ln2_gain, params.ln2_bias)
    return TokenSequence(out, seq.layout), (ws, ln1, fc, ln2)


def detrans_layer_backward(params: DeTransLayerParams, cache, dy):
    ws, ln1, fc, ln2 = cache
    ds, dg2, db2 = T.layer_norm_backward(ln2, dy)
    dy_ffn, g = ffn_backward(params, fc, ds)
    dyy = ds + dy_ffn
    ds1, dg1, db1 = T.layer_norm_backward(ln1, dyy)
    dx_attn, ga = msdmsa_backward(ws, ds1)
    grads = {f"attn.{k}": v for k, v in ga.items()}
    grads.update(g)
    grads.update(ln1_gain=dg1, ln1_bias=db1, ln2_gain=dg2, ln2_bias=db2)
    return ds1 + dx_attn, grads


def encoder_forward(seq: TokenSequence, refs, layers: EncoderParams, dropout: float = 0.0, rng=None):
    """Apply the layers in order.  Returns ``(out, caches, per_layer_outputs)``."""
    check_encoder(layers)
    caches, outs = [], []
    for lp in layers:
        seq, cache = detrans_layer(seq, refs, lp, dropout, rng)
        caches.append(cache)
        outs.append(seq)
    return seq, caches, outs


def encoder_backward(layers: EncoderParams, caches, dy):
    """Returns ``(dx, grads)`` with grads keyed ``"{layer}.{name}"``."""
    grads = {}
    for i in reversed(range(len(layers))):
        dy, g = detrans_layer_backward(layers[i], caches[i], dy)
        grads.update({f"{i}.{k}": v for k, v in g.items()})
    return dy, grads


def encoder_arrays(layers: EncoderParams) -> dict[str, np.ndarray]:
    return {f"{i}.{k}": v for i, lp in enumerate(layers) for k, v in lp.arrays().items()}
