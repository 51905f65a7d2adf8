"""A miniature hybrid CNN / deformable-transformer segmentation network.

Layout of the forward pass::

    image -> stem (Conv-IN-ReLU, full resolution)             s_full
          -> down (Conv-IN-ReLU, stride (1,2,2))              s0
          -> stage l = 1..L (residual block, stride 2)         f_l
          -> 1x1x1 projection to C                             p_l
          -> flatten + positional encoding -> L_D DeTrans layers
          -> reshape per level                                 t_l
          -> decoder: transposed conv up, add skip, residual block, aux head
          -> final (1,2,2) up-projection, add s_full, 1x1x1 class head

All parameters live in one flat ``dict[str, ndarray]`` so gradient checks and
the optimizer can treat them uniformly.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .bridge import TokenSequence, flatten_levels, reference_points, unflatten
from .detrans import DeTransLayerParams, encoder_backward, encoder_forward
from .errors import ConfigError, DimensionError, DivergenceError
from .posenc import add_pe, build_pe

log = logging.getLogger(__name__)


@dataclass
class ToyConfig:
    dims: tuple[int, int, int] = (16, 48, 48)
    base_channels: int = 8
    channels: int = 24
    levels: int = 2
    layers: int = 2
    heads: int = 2
    points: int = 4
    ffn: int = 96
    classes: int = 2
    lr: float = 0.01
    momentum: float = 0.99
    lr_schedule: str = "poly"
    iterations: int = 300
    seed: int = 0
    ds_weights: tuple[float, ...] | None = None
    multiscale: bool = True
    dropout: float = 0.0
    noise: float = 0.15
    dice_eps: float = 1e-5
    stop_dice: float | None = None
    precision: str = "f64"

    def __post_init__(self):
        self.dims = tuple(int(v) for v in self.dims)
        d, h, w = self.dims
        lv = self.levels
        if lv < 1:
            raise ConfigError("need at least one feature level")
        if d % 2**lv or h % 2 ** (lv + 1) or w % 2 ** (lv + 1):
            raise ConfigError(
                f"dims {self.dims} must satisfy D % 2^L == 0 and H, W % 2^(L+1) == 0 for L={lv}"
            )
        if self.channels % 6 or self.channels % self.heads:
            raise ConfigError(f"token width {self.channels} must be divisible by 6 and by heads={self.heads}")
        if self.classes < 2:
            raise ConfigError("need at least two classes")
        if self.lr_schedule not in ("poly", "constant"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.precision not in T.DTYPES:
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.ds_weights is not None:
            self.ds_weights = tuple(float(v) for v in self.ds_weights)
            if len(self.ds_weights) != self.levels + 1:
                raise ConfigError(f"need {self.levels + 1} deep-supervision weights (final scale first)")

    @property
    def dtype(self):
        return T.DTYPES[self.precision]

    def level_dims(self) -> list[tuple[int, int, int]]:
        d, h, w = self.dims
        return [(d // 2**l, h // 2 ** (l + 1), w // 2 ** (l + 1)) for l in range(1, self.levels + 1)]

    def stage_channels(self, l: int) -> int:
        return self.base_channels * 2**l

    def scale_factors(self) -> list[tuple[int, int, int]]:
        """Downsampling factor of each supervised output: final, stem, then levels 1..L-1."""
        out = [(1, 1, 1), (1, 2, 2)]
        out += [(2**l, 2 ** (l + 1), 2 ** (l + 1)) for l in range(1, self.levels)]
        return out

    def loss_weights(self) -> np.ndarray:
        w = np.ones(self.levels + 1) if self.ds_weights is None else np.array(self.ds_weights, float)
        if w.sum() <= 0:
            raise ConfigError("deep-supervision weights must have a positive sum")
        return w / w.sum()

    # plain-text "key = value" serialization
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {'none' if v is None else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ToyConfig":
        types = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {n}: unknown key {key!r}")
            kw[key] = _parse_value(key, val)
        kw.update(overrides)
        return cls(**kw)


def _parse_value(key, val):
    if val.lower() == "none":
        return None
    if key in ("dims", "ds_weights"):
        conv = int if key == "dims" else float
        return tuple(conv(v) for v in val.replace("x", ",").split(","))
    if key == "multiscale":
        if val.lower() not in ("true", "false", "1", "0"):
            raise ConfigError(f"{key}: expected a boolean, got {val!r}")
        return val.lower() in ("true", "1")
    if key in ("lr_schedule", "precision"):
        return val
    if key in ("lr", "momentum", "dropout", "noise", "dice_eps", "stop_dice"):
        return float(val)
    return int(val)


# -- parameters ---------------------------------------------------------------


def _he(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0, math.sqrt(2.0 / fan_in), shape).astype(dtype)


def _add_resblock(p, prefix, cin, cout, shortcut, rng, dtype):
    p[prefix + "conv1.w"] = _he(rng, (cout, cin, 3, 3, 3), dtype)
    p[prefix + "in1.g"] = np.ones(cout, dtype)
    p[prefix + "in1.b"] = np.zeros(cout, dtype)
    p[prefix + "conv2.w"] = _he(rng, (cout, cout, 3, 3, 3), dtype)
    p[prefix + "in2.g"] = np.ones(cout, dtype)
    p[prefix + "in2.b"] = np.zeros(cout, dtype)
    if shortcut:
        p[prefix + "short.w"] = _he(rng, (cout, cin, 1, 1, 1), dtype)
        p[prefix + "short_in.g"] = np.ones(cout, dtype)
        p[prefix + "short_in.b"] = np.zeros(cout, dtype)


def init_params(cfg: ToyConfig, rng=None) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    dt = cfg.dtype
    c, b, nc = cfg.channels, cfg.base_channels, cfg.classes
    p: dict[str, np.ndarray] = {}
    p["stem.w"] = _he(rng, (b, 1, 3, 3, 3), dt)
    p["stem.in.g"] = np.ones(b, dt)
    p["stem.in.b"] = np.zeros(b, dt)
    p["down.w"] = _he(rng, (b, b, 3, 3, 3), dt)
    p["down.in.g"] = np.ones(b, dt)
    p["down.in.b"] = np.zeros(b, dt)
    cin = b
    for l in range(1, cfg.levels + 1):
        cl = cfg.stage_channels(l)
        _add_resblock(p, f"stage{l}.", cin, cl, True, rng, dt)
        p[f"proj{l}.w"] = _he(rng, (c, cl, 1, 1, 1), dt)
        p[f"proj{l}.b"] = np.zeros(c, dt)
        cin = cl
    enc_levels = cfg.levels if cfg.multiscale else 1
    for i in range(cfg.layers):
        lp = DeTransLayerParams.init(c, cfg.ffn, cfg.heads, enc_levels, cfg.points, rng, dt)
        p.update({f"enc.{i}.{k}": v for k, v in lp.arrays().items()})
    for l in range(cfg.levels - 1, -1, -1):
        cout = c if l > 0 else b
        p[f"dec{l}.up.w"] = _he(rng, (c, cout, 2, 2, 2), dt) / math.sqrt(8)
        p[f"dec{l}.up.b"] = np.zeros(cout, dt)
        _add_resblock(p, f"dec{l}.res.", cout, cout, False, rng, dt)
        p[f"dec{l}.head.w"] = _he(rng, (nc, cout, 1, 1, 1), dt)
        p[f"dec{l}.head.b"] = np.zeros(nc, dt)
    p["final.up.w"] = _he(rng, (b, b, 1, 2, 2), dt) / 2
    p["final.up.b"] = np.zeros(b, dt)
    p["final.head.w"] = _he(rng, (nc, b, 1, 1, 1), dt)
    p["final.head.b"] = np.zeros(nc, dt)
    return p


def encoder_layers(cfg: ToyConfig, p) -> list[DeTransLayerParams]:
    enc_levels = cfg.levels if cfg.multiscale else 1
    out = []
    for i in range(cfg.layers):
        pre = f"enc.{i}."
        sub = {k[len(pre):]: v for k, v in p.items() if k.startswith(pre)}
        out.append(DeTransLayerParams.from_arrays(sub, cfg.heads, enc_levels, cfg.points))
    return out


# -- building blocks ----------------------------------------------------------


def conv_in_relu(x, w, g, b, stride, padding):
    y = T.conv3d(x, w, None, stride, padding)
    n, nc = T.instance_norm(y, g, b)
    return T.relu(n), (x, y, nc, n, stride, padding)


def conv_in_relu_backward(w, cache, dout):
    x, y, nc, n, stride, padding = cache
    dn = T.relu_backward(n, dout)
    dy, dg, db = T.instance_norm_backward(nc, dn)
    dx, dw, _ = T.conv3d_backward(x, w, dy, stride, padding)
    return dx, dw, dg, db


def resblock(x, p, prefix, stride):
    """conv-IN-ReLU, conv-IN, plus (projected) identity, then ReLU."""
    r1, c1 = conv_in_relu(x, p[prefix + "conv1.w"], p[prefix + "in1.g"], p[prefix + "in1.b"], stride, 1)
    h2 = T.conv3d(r1, p[prefix + "conv2.w"], None, 1, 1)
    n2, nc2 = T.instance_norm(h2, p[prefix + "in2.g"], p[prefix + "in2.b"])
    if prefix + "short.w" in p:
        s = T.conv3d(x, p[prefix + "short.w"], None, stride, 0)
        sn, snc = T.instance_norm(s, p[prefix + "short_in.g"], p[prefix + "short_in.b"])
    else:
        if T.as_triple(stride) != (1, 1, 1):
            raise ConfigError("an identity shortcut needs stride 1")
        sn, snc = x, None
    pre = n2 + sn
    return T.relu(pre), (x, c1, r1, h2, nc2, snc, pre, stride)


def resblock_backward(p, prefix, cache, dout):
    x, c1, r1, h2, nc2, snc, pre, stride = cache
    g = {}
    dpre = T.relu_backward(pre, dout)
    dh2, g[prefix + "in2.g"], g[prefix + "in2.b"] = T.instance_norm_backward(nc2, dpre)
    dr1, g[prefix + "conv2.w"], _ = T.conv3d_backward(r1, p[prefix + "conv2.w"], dh2, 1, 1)
    dx, g[prefix + "conv1.w"], g[prefix + "in1.g"], g[prefix + "in1.b"] = conv_in_relu_backward(
        p[prefix + "conv1.w"], c1, dr1
    )
    if snc is not None:
        ds, g[prefix + "short_in.g"], g[prefix + "short_in.b"] = T.instance_norm_backward(snc, dpre)
        dxs, g[prefix + "short.w"], _ = T.conv3d_backward(x, p[prefix + "short.w"], ds, stride, 0)
        dx = dx + dxs
    else:
        dx = dx + dpre
    return dx, g


# -- encoder / decoder ----------------------------------------------------------


def cnn_encoder(x, p, cfg: ToyConfig):
    """Returns ``((full_res, half_res), stage_features, projected_levels, cache)``."""
    T.check_volume(x, "input image")
    if tuple(x.shape[1:]) != cfg.dims:
        raise ConfigError(f"input dims {x.shape[1:]} != configured dims {cfg.dims}")
    sf, cs = conv_in_relu(x, p["stem.w"], p["stem.in.g"], p["stem.in.b"], 1, 1)
    s0, cdn = conv_in_relu(sf, p["down.w"], p["down.in.g"], p["down.in.b"], (1, 2, 2), 1)
    feats, projs, caches = [], [], []
    h = s0
    for l in range(1, cfg.levels + 1):
        h, cr = resblock(h, p, f"stage{l}.", 2)
        feats.append(h)
        projs.append(T.conv3d(h, p[f"proj{l}.w"], p[f"proj{l}.b"]))
        caches.append(cr)
    return (sf, s0), feats, projs, (x, cs, cdn, caches, feats)


def cnn_encoder_backward(p, cfg, cache, dstems, dprojs):
    x, cs, cdn, caches, feats = cache
    dsf, ds0 = dstems
    g = {}
    dh = None
    for l in range(cfg.levels, 0, -1):
        dfeat, g[f"proj{l}.w"], g[f"proj{l}.b"] = T.conv3d_backward(feats[l - 1], p[f"proj{l}.w"], dprojs[l - 1])
        if dh is not None:
            dfeat = dfeat + dh
        dh, gr = resblock_backward(p, f"stage{l}.", caches[l - 1], dfeat)
        g.update(gr)
    dh, g["down.w"], g["down.in.g"], g["down.in.b"] = conv_in_relu_backward(p["down.w"], cdn, dh + ds0)
    dx, g["stem.w"], g["stem.in.g"], g["stem.in.b"] = conv_in_relu_backward(p["stem.w"], cs, dh + dsf)
    return dx, g


@dataclass
class SegOutput:
    final: np.ndarray  # (classes, D, H, W)
    aux: list[np.ndarray] = field(default_factory=list)  # stem scale, then levels 1..L-1

    def scales(self) -> list[np.ndarray]:
        return [self.final] + list(self.aux)


def decoder(levels, skips, stems, p, cfg: ToyConfig):
    """``levels``: transformer outputs per level (deepest last).  ``skips[l]``
    is added after upsampling into level ``l`` (1-based; index 0 unused);
    ``stems`` are the full- and half-resolution stem features.
    Returns ``(SegOutput, cache)``."""
    sf, stem = stems
    x = levels[-1]
    aux: dict[int, np.ndarray] = {}
    caches = []
    for l in range(cfg.levels - 1, -1, -1):
        skip = stem if l == 0 else skips[l]
        up = T.transposed_conv3d(x, p[f"dec{l}.up.w"], p[f"dec{l}.up.b"], 2)
        if up.shape != skip.shape:
            raise DimensionError(f"decoder stage {l}: upsampled {up.shape} vs skip {skip.shape}")
        r, cr = resblock(up + skip, p, f"dec{l}.res.", 1)
        aux[l] = T.conv3d(r, p[f"dec{l}.head.w"], p[f"dec{l}.head.b"])
        caches.append((x, r, cr))
        x = r
    u = T.transposed_conv3d(x, p["final.up.w"], p["final.up.b"], (1, 2, 2)) + sf
    logits = T.conv3d(u, p["final.head.w"], p["final.head.b"])
    out = SegOutput(logits, [aux[l] for l in range(cfg.levels)])
    return out, (caches, x, u)


def decoder_backward(p, cfg: ToyConfig, cache, dscales):
    """``dscales`` follows ``SegOutput.scales()``.  Returns
    ``(dlevels_deepest, dskips, dstems, grads)`` with ``dskips[l]`` for l >= 1."""
    caches, x, u = cache
    g = {}
    dfinal, daux = dscales[0], dscales[1:]
    du, g["final.head.w"], g["final.head.b"] = T.conv3d_backward(u, p["final.head.w"], dfinal)
    dx, g["final.up.w"], g["final.up.b"] = T.transposed_conv3d_backward(x, p["final.up.w"], du)
    dskips = {}
    dstem = None
    for (xin, r, cr), l in zip(reversed(caches), range(cfg.levels)):
        dr, g[f"dec{l}.head.w"], g[f"dec{l}.head.b"] = T.conv3d_backward(r, p[f"dec{l}.head.w"], daux[l])
        dr = dr + dx
        dsum, gr = resblock_backward(p, f"dec{l}.res.", cr, dr)
        g.update(gr)
        if l == 0:
            dstem = dsum
        else:
            dskips[l] = dsum
        dx, g[f"dec{l}.up.w"], g[f"dec{l}.up.b"] = T.transposed_conv3d_backward(xin, p[f"dec{l}.up.w"], dsum)
    return dx, dskips, (du, dstem), g


# -- loss and metric ------------------------------------------------------------


def one_hot(labels: np.ndarray, classes: int, dtype=np.float64) -> np.ndarray:
    return (np.arange(classes)[:, None, None, None] == labels[None]).astype(dtype)


def dice_ce_loss(logits: np.ndarray, target: np.ndarray, eps: float = 1e-5):
    """Mean over classes of ``-softDice - E[y log p]``.  Returns ``(loss, dlogits)``.

    ``target`` is a one-hot ``(classes, D, H, W)`` volume.
    """
    if logits.shape != target.shape:
        raise DimensionError(f"logits {logits.shape} vs target {target.shape}")
    if not (np.isin(target, (0, 1)).all() and (target.sum(axis=0) == 1).all()):
        raise ValueError("target must be one-hot over the class axis")
    c = logits.shape[0]
    vox = logits[0].size
    z = logits - logits.max(axis=0, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=0, keepdims=True))
    logp = z - lse
    p = np.exp(logp)
    axes = (1, 2, 3)
    inter = (p * target).sum(axis=axes)
    den = p.sum(axis=axes) + target.sum(axis=axes)
    dice = (2 * inter + eps) / (den + eps)
    loss = (-dice.sum() - (target * logp).sum() / vox) / c
    b = (slice(None), None, None, None)
    dp = -(2 * target / (den + eps)[b] - ((2 * inter + eps) / (den + eps) ** 2)[b]) / c
    dlogits = T.softmax_backward(p, dp, axis=0) + (p - target) / (c * vox)
    return float(loss), dlogits


def dice_score(pred: np.ndarray, target: np.ndarray, cls: int = 1) -> float:
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target.shape}")
    a = pred == cls
    b = target == cls
    tot = int(a.sum()) + int(b.sum())
    if tot == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / tot


def downsample_labels(labels: np.ndarray, factor) -> np.ndarray:
    fd, fh, fw = factor
    return labels[fd // 2 :: fd, fh // 2 :: fh, fw // 2 :: fw]


# -- whole network ---------------------------------------------------------------


def forward(x, p, cfg: ToyConfig):
    """Full forward pass.  Returns ``(SegOutput, cache)``."""
    stems, feats, projs, ce = cnn_encoder(x, p, cfg)
    used = projs if cfg.multiscale else projs[-1:]
    seq = flatten_levels(used)
    refs = reference_points(seq.layout)
    seq_in = add_pe(seq, build_pe(seq.layout, cfg.channels))
    layers = encoder_layers(cfg, p)
    out, caches, _ = encoder_forward(seq_in, refs, layers, cfg.dropout, None)
    tlev = unflatten(out)
    levels = tlev if cfg.multiscale else projs[:-1] + tlev
    skips = [None] + levels[:-1]
    seg, cd = decoder(levels, skips, stems, p, cfg)
    return seg, (ce, seq.layout, layers, caches, cd, len(projs))


def backward(p, cfg: ToyConfig, cache, dscales):
    """Gradients of all parameters (and the input image) given d(loss)/d(scales)."""
    ce, layout, layers, caches, cd, nproj = cache
    ddeep, dskips, dstems, g = decoder_backward(p, cfg, cd, dscales)
    dlevels = [dskips.get(l) for l in range(1, cfg.levels)] + [ddeep]
    if cfg.multiscale:
        dtok = flatten_levels(dlevels).tokens
        dseq, ge = encoder_backward(layers, caches, dtok)
        dprojs = unflatten(TokenSequence(dseq, layout))
    else:
        dtok = flatten_levels(dlevels[-1:]).tokens
        dseq, ge = encoder_backward(layers, caches, dtok)
        dprojs = dlevels[:-1] + unflatten(TokenSequence(dseq, layout))
    g.update({f"enc.{k}": v for k, v in ge.items()})
    dx, gc = cnn_encoder_backward(p, cfg, ce, dstems, dprojs)
    g.update(gc)
    return dx, g


def total_loss(seg: SegOutput, labels: np.ndarray, cfg: ToyConfig):
    """Weighted sum of per-scale losses.  Returns ``(total, per_scale, dscales)``."""
    weights = cfg.loss_weights()
    per, grads = [], []
    for out, f, w in zip(seg.scales(), cfg.scale_factors(), weights):
        tgt = one_hot(downsample_labels(labels, f), cfg.classes, out.dtype)
        if w == 0:
            per.append(0.0)
            grads.append(np.zeros_like(out))
            continue
        l, d = dice_ce_loss(out, tgt, cfg.dice_eps)
        per.append(l)
        grads.append(w * d)
    total = float(sum(w * l for w, l in zip(weights, per) if w != 0))
    return total, per, grads


# -- synthetic task and training ----------------------------------------------------


def sphere_task(cfg: ToyConfig, seed: int | None = None):
    """Image with one or two class-1 ellipsoids in Gaussian noise.  Returns ``(image, labels)``."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    d, h, w = cfg.dims
    grid = np.stack(
        np.meshgrid((np.arange(d) + 0.5) / d, (np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    )
    labels = np.zeros(cfg.dims, dtype=np.int64)
    for _ in range(int(rng.integers(1, 3))):
        center = rng.uniform(0.3, 0.7, 3)
        radius = rng.uniform(0.15, 0.25)
        inside = (((grid - center[:, None, None, None]) / radius) ** 2).sum(axis=0) <= 1.0
        labels[inside] = 1
    img = labels.astype(np.float64) + rng.normal(0, cfg.noise, cfg.dims)
    return img[None].astype(cfg.dtype), labels


@dataclass
class TrainTrace:
    loss: list[float] = field(default_factory=list)
    dice: list[float] = field(default_factory=list)


def learning_rate(cfg: ToyConfig, it: int) -> float:
    if cfg.lr_schedule == "poly":
        return cfg.lr * (1 - it / max(cfg.iterations, 1)) ** 0.9
    return cfg.lr


def predict(seg: SegOutput) -> np.ndarray:
    return seg.final.argmax(axis=0)


def train_toy(cfg: ToyConfig, task=None, params=None):
    """SGD with momentum on one synthetic volume.  Returns ``(trace, params, prediction)``.

    The trace records the loss and foreground Dice of the forward pass at each
    iteration (before that iteration's update).
    """
    img, labels = task if task is not None else sphere_task(cfg)
    p = init_params(cfg) if params is None else params
    vel = {k: np.zeros_like(v) for k, v in p.items()}
    trace = TrainTrace()
    pred = None
    for it in range(cfg.iterations):
        seg, cache = forward(img, p, cfg)
        loss, _, dscales = total_loss(seg, labels, cfg)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss} at iteration {it}")
        pred = predict(seg)
        trace.loss.append(loss)
        trace.dice.append(dice_score(pred, labels, 1))
        log.debug("iter %d loss %.5f dice %.4f", it, loss, trace.dice[-1])
        if cfg.stop_dice is not None and trace.dice[-1] >= cfg.stop_dice:
            break
        _, grads = backward(p, cfg, cache, dscales)
        lr = learning_rate(cfg, it)
        for k, v in p.items():
            vel[k] *= cfg.momentum
            vel[k] += grads[k]
            v -= lr * vel[k]
    return trace, p, pred
