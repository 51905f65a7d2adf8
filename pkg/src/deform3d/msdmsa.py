"""Multi-scale deformable self-attention over a flattened 3D feature pyramid.

Every query token looks at ``K`` fractional sampling points per level per
head.  Points sit at the query's reference location rescaled onto each level
plus a learned offset (in voxels of that level), values are read by
trilinear interpolation with border clamping, and the ``L*K`` samples of a
head are mixed with softmax-normalized weights.  Heads are concatenated and
sent through an output projection.

``msdmsa_forward``/``msdmsa_backward`` are the vectorized kernels;
``msdmsa_oracle`` is an independent scalar-loop evaluation used to check them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from itertools import product

import numpy as np

from . import tensor as T
from .bridge import LevelLayout, TokenSequence, rescale
from .errors import ConfigError, DimensionError, StateError

_BITS = np.array(list(product((0, 1), repeat=3)))  # (8, 3), corner order d-major


# -- trilinear sampling --------------------------------------------------------


def corner_weights(coords, dims):
    """Corner indices and interpolation weights for continuous grid coords.

    ``coords`` is ``(..., 3)`` in (d, h, w) voxel units.  Returns
    ``(flat_idx, weights, dweights)`` with shapes ``(..., 8)``, ``(..., 8)`` and
    ``(..., 8, 3)``; ``flat_idx`` indexes the row-major (d, h, w) grid and
    ``dweights`` is the derivative of each weight w.r.t. the *unclamped*
    coordinate (zero along clamped axes).
    """
    coords = np.asarray(coords, dtype=np.float64)
    dims_a = np.asarray(dims)
    hi = dims_a - 1
    cc = np.clip(coords, 0, hi)
    slope = ((coords > 0) & (coords < hi)).astype(np.float64)
    # NaN coords index corner 0 but keep NaN weights, so they propagate instead of crashing
    i0 = np.minimum(np.floor(np.nan_to_num(cc)), np.maximum(hi - 1, 0)).astype(np.int64)
    t = cc - i0
    i1 = np.minimum(i0 + 1, hi)
    # per-axis factors for bit 0 / bit 1
    fac = np.stack([1.0 - t, t], axis=-2)  # (..., 2, 3)
    dfac = np.stack([-slope, slope], axis=-2)
    ii = np.stack([i0, i1], axis=-2)
    ax = np.arange(3)
    f = fac[..., _BITS, ax]  # (..., 8, 3)
    df = dfac[..., _BITS, ax]
    idx3 = ii[..., _BITS, ax]
    w = f[..., 0] * f[..., 1] * f[..., 2]
    dw = np.stack(
        [df[..., 0] * f[..., 1] * f[..., 2], f[..., 0] * df[..., 1] * f[..., 2], f[..., 0] * f[..., 1] * df[..., 2]],
        axis=-1,
    )
    flat = (idx3[..., 0] * dims[1] + idx3[..., 1]) * dims[2] + idx3[..., 2]
    return flat, w, dw


def trilinear_sample(level: np.ndarray, coord) -> np.ndarray:
    """Channel vector of ``level`` (C, D, H, W) at a fractional (d, h, w)."""
    T.check_volume(level)
    idx, w, _ = corner_weights(coord, level.shape[1:])
    return level.reshape(level.shape[0], -1)[:, idx] @ w


def trilinear_sample_backward(level: np.ndarray, coord, dout):
    """Returns ``(dlevel, dcoord)`` for upstream ``dout`` of shape (C,)."""
    idx, w, dw = corner_weights(coord, level.shape[1:])
    flat = level.reshape(level.shape[0], -1)
    dlevel = np.zeros_like(flat, dtype=np.result_type(level, dout))
    np.add.at(dlevel.T, idx, w[:, None] * dout[None, :])
    dcoord = (dout @ flat[:, idx]) @ dw
    return dlevel.reshape(level.shape), dcoord


# -- parameters -----------------------------------------------------------------


def _xavier(rng, fan_in, fan_out, dtype):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype)


def head_directions(heads: int) -> np.ndarray:
    """Unit (d, h, w) vectors spread over the sphere, one per head."""
    i = np.arange(heads) + 0.5
    z = 1.0 - 2.0 * i / heads
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - math.sqrt(5.0)) * i
    return np.stack([z, r * np.cos(phi), r * np.sin(phi)], axis=-1)


@dataclass
class DmsaParams:
    w_value: np.ndarray
    b_value: np.ndarray
    w_offset: np.ndarray
    b_offset: np.ndarray
    w_attn: np.ndarray
    b_attn: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    heads: int = field(metadata={"static": True}, default=1)
    levels: int = field(metadata={"static": True}, default=1)
    points: int = field(metadata={"static": True}, default=1)

    def __post_init__(self):
        c = self.channels
        h, l, k = self.heads, self.levels, self.points
        if min(h, l, k) < 1:
            raise ConfigError("heads, levels and points must be positive")
        if c % h:
            raise ConfigError(f"channels {c} not divisible by heads {h}")
        want = {
            "w_value": (c, c), "b_value": (c,),
            "w_offset": (c, h * l * k * 3), "b_offset": (h * l * k * 3,),
            "w_attn": (c, h * l * k), "b_attn": (h * l * k,),
            "w_out": (c, c), "b_out": (c,),
        }
        for name, shape in want.items():
            if getattr(self, name).shape != shape:
                raise ConfigError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def channels(self) -> int:
        return self.w_value.shape[0]

    @property
    def head_width(self) -> int:
        return self.channels // self.heads

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self) if not f.metadata.get("static")}

    def like(self, arrays: dict[str, np.ndarray]) -> "DmsaParams":
        return DmsaParams(**arrays, heads=self.heads, levels=self.levels, points=self.points)

    @classmethod
    def init(cls, channels, heads, levels, points, rng=None, dtype=np.float64) -> "DmsaParams":
        """Zero offset/attention weights, sphere-spread offset biases growing with k."""
        if channels % heads:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        rng = np.random.default_rng(rng)
        hlk = heads * levels * points
        dirs = head_directions(heads)[:, None, None, :] * (np.arange(points) + 1.0)[None, None, :, None]
        b_off = np.broadcast_to(dirs, (heads, levels, points, 3)).reshape(-1)
        return cls(
            w_value=_xavier(rng, channels, channels, dtype),
            b_value=np.zeros(channels, dtype),
            w_offset=np.zeros((channels, hlk * 3), dtype),
            b_offset=b_off.astype(dtype),
            w_attn=np.zeros((channels, hlk), dtype),
            b_attn=np.zeros(hlk, dtype),
            w_out=_xavier(rng, channels, channels, dtype),
            b_out=np.zeros(channels, dtype),
            heads=heads, levels=levels, points=points,
        )

    @classmethod
    def random(cls, channels, heads, levels, points, rng=None, dtype=np.float64, offset_scale=1.0):
        """Dense random parameters (every group non-trivial), for testing."""
        rng = np.random.default_rng(rng)
        hlk = heads * levels * points
        s = 1.0 / math.sqrt(channels)
        return cls(
            w_value=rng.normal(0, s, (channels, channels)).astype(dtype),
            b_value=rng.normal(0, 0.1, channels).astype(dtype),
            w_offset=rng.normal(0, s * offset_scale, (channels, hlk * 3)).astype(dtype),
            b_offset=rng.normal(0, offset_scale, hlk * 3).astype(dtype),
            w_attn=rng.normal(0, s, (channels, hlk)).astype(dtype),
            b_attn=rng.normal(0, 0.5, hlk).astype(dtype),
            w_out=rng.normal(0, s, (channels, channels)).astype(dtype),
            b_out=rng.normal(0, 0.1, channels).astype(dtype),
            heads=heads, levels=levels, points=points,
        )


@dataclass
class SampledPoint:
    head: int
    level: int
    point: int
    coord: np.ndarray
    weight: float


# -- vectorized kernels ---------------------------------------------------------


@dataclass
class Workspace:
    x: np.ndarray
    params: DmsaParams
    layout: LevelLayout
    value: np.ndarray  # (N, H, Ch)
    attn: np.ndarray  # (N, H, L, K)
    loc: np.ndarray  # (N, H, L, K, 3) continuous coords before clamping
    idx: np.ndarray  # (N, H, L, K, 8) global token index of each corner
    w: np.ndarray  # (N, H, L, K, 8)
    dw: np.ndarray  # (N, H, L, K, 8, 3)
    concat: np.ndarray  # (N, C)
    released: bool = False

    def release(self) -> None:
        self.released = True
        self.value = self.idx = self.w = self.dw = None


def _check_inputs(seq: TokenSequence, refs, params: DmsaParams):
    if refs.shape != (seq.tokens.shape[0], 3):
        raise DimensionError(f"reference points {refs.shape} do not match {seq.tokens.shape[0]} queries")
    if seq.channels != params.channels:
        raise DimensionError(f"sequence width {seq.channels} != parameter width {params.channels}")
    if seq.layout.levels != params.levels:
        raise ConfigError(f"layout has {seq.layout.levels} levels, parameters expect {params.levels}")


def msdmsa_forward(seq: TokenSequence, refs: np.ndarray, params: DmsaParams):
    """Returns ``(output TokenSequence, Workspace)``."""
    _check_inputs(seq, refs, params)
    x = seq.tokens
    n = x.shape[0]
    h, l, k, ch = params.heads, params.levels, params.points, params.head_width
    lay = seq.layout

    value = T.linear(x, params.w_value, params.b_value).reshape(n, h, ch)
    off = T.linear(x, params.w_offset, params.b_offset).reshape(n, h, l, k, 3)
    logits = T.linear(x, params.w_attn, params.b_attn).reshape(n, h, l * k)
    attn = T.softmax(logits).reshape(n, h, l, k)

    loc = np.empty((n, h, l, k, 3))
    idx = np.empty((n, h, l, k, 8), dtype=np.int64)
    w = np.empty((n, h, l, k, 8))
    dw = np.empty((n, h, l, k, 8, 3))
    for lv, dims in enumerate(lay.dims):
        loc[:, :, lv] = rescale(refs, dims)[:, None, None, :] + off[:, :, lv]
        fi, w[:, :, lv], dw[:, :, lv] = corner_weights(loc[:, :, lv], dims)
        idx[:, :, lv] = fi + lay.offsets[lv]

    cw = (attn[..., None] * w).reshape(n, h, -1).astype(x.dtype, copy=False)
    gidx = idx.reshape(n, h, -1)
    heads = np.empty((n, h, ch), dtype=value.dtype)
    for i in range(h):
        heads[:, i] = np.einsum("ns,nsc->nc", cw[:, i], value[gidx[:, i], i])
    concat = heads.reshape(n, h * ch)
    out = T.linear(concat, params.w_out, params.b_out)
    ws = Workspace(x, params, lay, value, attn, loc, idx, w, dw.astype(x.dtype, copy=False), concat)
    return TokenSequence(out, lay), ws


def msdmsa_backward(ws: Workspace, dy: np.ndarray):
    """Returns ``(dx, grads)`` where ``grads`` mirrors ``params.arrays()``."""
    if ws is None or ws.released:
        raise StateError("backward needs the workspace of a prior forward call")
    p = ws.params
    n = ws.x.shape[0]
    if dy.shape != (n, p.channels):
        raise DimensionError(f"upstream gradient {dy.shape} != output shape {(n, p.channels)}")
    h, l, k, ch = p.heads, p.levels, p.points, p.head_width

    dcat, dw_out, db_out = T.linear_backward(ws.concat, p.w_out, dy)
    dheads = dcat.reshape(n, h, ch)

    gidx = ws.idx.reshape(n, h, -1)
    gdot = np.empty((n, h, l * k * 8), dtype=dy.dtype)
    dvalue = np.empty((h, n * ch), dtype=dy.dtype)
    cw = (ws.attn[..., None] * ws.w).reshape(n, h, -1)
    for i in range(h):
        corners = ws.value[gidx[:, i], i]  # (N, S, Ch)
        gdot[:, i] = np.einsum("nsc,nc->ns", corners, dheads[:, i])
        contrib = cw[:, i, :, None] * dheads[:, i, None, :]  # (N, S, Ch)
        flat = (gidx[:, i, :, None] * ch + np.arange(ch)).ravel()
        dvalue[i] = np.bincount(flat, weights=contrib.ravel(), minlength=n * ch)
    gdot = gdot.reshape(n, h, l, k, 8)
    dvalue = dvalue.reshape(h, n, ch).transpose(1, 0, 2).reshape(n, p.channels)

    dattn = (gdot * ws.w).sum(axis=-1)
    dloc = np.einsum("nhlkc,nhlkcx->nhlkx", ws.attn[..., None] * gdot, ws.dw)
    dlogits = T.softmax_backward(ws.attn.reshape(n, h, l * k), dattn.reshape(n, h, l * k))

    dx_v, dw_value, db_value = T.linear_backward(ws.x, p.w_value, dvalue)
    dx_o, dw_offset, db_offset = T.linear_backward(ws.x, p.w_offset, dloc.reshape(n, -1))
    dx_a, dw_attn, db_attn = T.linear_backward(ws.x, p.w_attn, dlogits.reshape(n, -1))
    grads = dict(
        w_value=dw_value, b_value=db_value,
        w_offset=dw_offset, b_offset=db_offset,
        w_attn=dw_attn, b_attn=db_attn,
        w_out=dw_out, b_out=db_out,
    )
    return dx_v + dx_o + dx_a, grads


def sampled_points(ws: Workspace, query: int) -> list[SampledPoint]:
    p = ws.params
    return [
        SampledPoint(i, lv, kk, ws.loc[query, i, lv, kk].copy(), float(ws.attn[query, i, lv, kk]))
        for i in range(p.heads)
        for lv in range(p.levels)
        for kk in range(p.points)
    ]


def workspace_elements(n: int, channels: int, heads: int, levels: int, points: int) -> int:
    """Elements retained for backward: inputs, values, offsets, weights, corners, head outputs."""
    hlk = heads * levels * points
    return n * (3 * channels + hlk * (3 + 1 + 8 * 2))


# -- scalar-loop oracle -----------------------------------------------------------


def _clamped_lerp_sample(vol, d, hh, ww):
    """8-term trilinear formula with border clamping, written out directly."""
    _, nd, nh, nw = vol.shape

    def split(c, size):
        c = min(max(c, 0.0), size - 1.0)
        lo = min(int(math.floor(c)), max(size - 2, 0))
        return lo, min(lo + 1, size - 1), c - lo

    d0, d1, td = split(d, nd)
    h0, h1, th = split(hh, nh)
    w0, w1, tw = split(ww, nw)
    return (
        vol[:, d0, h0, w0] * (1 - td) * (1 - th) * (1 - tw)
        + vol[:, d0, h0, w1] * (1 - td) * (1 - th) * tw
        + vol[:, d0, h1, w0] * (1 - td) * th * (1 - tw)
        + vol[:, d0, h1, w1] * (1 - td) * th * tw
        + vol[:, d1, h0, w0] * td * (1 - th) * (1 - tw)
        + vol[:, d1, h0, w1] * td * (1 - th) * tw
        + vol[:, d1, h1, w0] * td * th * (1 - tw)
        + vol[:, d1, h1, w1] * td * th * tw
    )


def dmsa_head(z_q, value_levels, p_hat, params: DmsaParams, head: int) -> np.ndarray:
    """One attention head for one query, by direct summation over levels and points."""
    h, nl, nk, ch = params.heads, params.levels, params.points, params.head_width
    if z_q.shape != (params.channels,):
        raise DimensionError(f"query has shape {z_q.shape}, expected ({params.channels},)")
    if len(value_levels) != nl:
        raise ConfigError(f"{len(value_levels)} levels given, parameters expect {nl}")
    off = (z_q @ params.w_offset + params.b_offset).reshape(h, nl, nk, 3)[head]
    logits = (z_q @ params.w_attn + params.b_attn).reshape(h, nl * nk)[head]
    m = max(logits)
    ex = [math.exp(v - m) for v in logits]
    tot = sum(ex)
    out = np.zeros(ch)
    for lv in range(nl):
        vol = value_levels[lv][head * ch : (head + 1) * ch]
        _, nd, nh, nw = vol.shape
        base = (p_hat[0] * nd - 0.5, p_hat[1] * nh - 0.5, p_hat[2] * nw - 0.5)
        for kk in range(nk):
            lam = ex[lv * nk + kk] / tot
            c = [base[a] + off[lv, kk, a] for a in range(3)]
            out = out + lam * _clamped_lerp_sample(vol, *c)
    return out


def msdmsa_oracle(seq: TokenSequence, refs: np.ndarray, params: DmsaParams) -> TokenSequence:
    _check_inputs(seq, refs, params)
    x = seq.tokens
    lay = seq.layout
    c = params.channels
    # project each voxel, then regroup per level as (C, D, H, W)
    vproj = np.array([x[q] @ params.w_value + params.b_value for q in range(x.shape[0])])
    value_levels = []
    for o, d in zip(lay.offsets, lay.dims):
        vol = np.zeros((c,) + d)
        for i, (dd, hh, ww) in enumerate(product(*(range(s) for s in d))):
            vol[:, dd, hh, ww] = vproj[o + i]
        value_levels.append(vol)
    out = np.zeros_like(x, dtype=np.float64)
    for q in range(x.shape[0]):
        cat = np.concatenate([dmsa_head(x[q], value_levels, refs[q], params, i) for i in range(params.heads)])
        out[q] = cat @ params.w_out + params.b_out
    return TokenSequence(out.astype(x.dtype, copy=False), lay)
