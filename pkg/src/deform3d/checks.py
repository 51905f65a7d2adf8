"""Ready-made gradient checks for every differentiable component.

Each checker builds a random double-precision instance from a seed, reduces
the component's output to a scalar with a fixed random projection, and
compares the analytic backward against central differences.
"""

from __future__ import annotations

import numpy as np

from . import detrans as DT
from . import network as N
from . import tensor as T
from .bridge import LevelLayout, TokenSequence, reference_points
from .errors import ConfigError
from .gradcheck import GradCheckReport, check_gradients
from .msdmsa import DmsaParams, msdmsa_backward, msdmsa_forward

TOL = 1e-6
TOL_NET = 1e-5
KINK_MARGIN = 1e-3


def _proj(rng, shape):
    return rng.normal(size=shape)


def check_matmul(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    r = _proj(rng, (5, 3))
    da, db = T.matmul_backward(a, b, r)
    return check_gradients(lambda: float((T.matmul(a, b) * r).sum()), {"a": a, "b": b}, {"a": da, "b": db}, TOL)


def check_softmax(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 12)) * 2
    r = _proj(rng, x.shape)
    dx = T.softmax_backward(T.softmax(x), r)
    return check_gradients(lambda: float((T.softmax(x) * r).sum()), {"x": x}, {"x": dx}, TOL)


def check_relu(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 5))
    x[np.abs(x) < KINK_MARGIN] += 2 * KINK_MARGIN
    r = _proj(rng, x.shape)
    return check_gradients(lambda: float((T.relu(x) * r).sum()), {"x": x}, {"x": T.relu_backward(x, r)}, TOL)


def check_layer_norm(seed):
    rng = np.random.default_rng(seed)
    x, g, b = rng.normal(size=(5, 24)), rng.normal(size=24), rng.normal(size=24)
    r = _proj(rng, x.shape)
    _, cache = T.layer_norm(x, g, b)
    dx, dg, db = T.layer_norm_backward(cache, r)
    return check_gradients(
        lambda: float((T.layer_norm(x, g, b)[0] * r).sum()),
        {"x": x, "gain": g, "bias": b}, {"x": dx, "gain": dg, "bias": db}, TOL,
    )


def check_instance_norm(seed):
    rng = np.random.default_rng(seed)
    x, g, b = rng.normal(size=(3, 2, 3, 4)), rng.normal(size=3), rng.normal(size=3)
    r = _proj(rng, x.shape)
    _, cache = T.instance_norm(x, g, b)
    dx, dg, db = T.instance_norm_backward(cache, r)
    return check_gradients(
        lambda: float((T.instance_norm(x, g, b)[0] * r).sum()),
        {"x": x, "gain": g, "bias": b}, {"x": dx, "gain": dg, "bias": db}, TOL,
    )


def check_conv3d(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(2, 4, 5, 5)), rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3)
    stride, pad = (1, 2, 2), 1
    r = _proj(rng, T.conv3d(x, w, b, stride, pad).shape)
    dx, dw, db = T.conv3d_backward(x, w, r, stride, pad)
    return check_gradients(
        lambda: float((T.conv3d(x, w, b, stride, pad) * r).sum()),
        {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db}, TOL,
    )


def check_transposed_conv3d(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(3, 2, 2, 3)), rng.normal(size=(3, 2, 2, 2, 2)), rng.normal(size=2)
    r = _proj(rng, (2, 4, 4, 6))
    dx, dw, db = T.transposed_conv3d_backward(x, w, r)
    return check_gradients(
        lambda: float((T.transposed_conv3d(x, w, b, 2) * r).sum()),
        {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db}, TOL,
    )


PRIMITIVES = {
    "matmul": check_matmul,
    "softmax": check_softmax,
    "relu": check_relu,
    "layer_norm": check_layer_norm,
    "instance_norm": check_instance_norm,
    "conv3d": check_conv3d,
    "transposed_conv3d": check_transposed_conv3d,
}


def _away_from_kinks(loc) -> bool:
    return bool((np.abs(loc - np.round(loc)) >= KINK_MARGIN).all())


def msdmsa_instance(seed, layout: LevelLayout, channels=12, heads=2, points=2, max_tries=200):
    """Random instance whose sampling coordinates all keep clear of integer kinks."""
    rng = np.random.default_rng(seed)
    refs = reference_points(layout)
    for _ in range(max_tries):
        p = DmsaParams.random(channels, heads, layout.levels, points, rng)
        x = rng.normal(size=(layout.total, channels))
        _, ws = msdmsa_forward(TokenSequence(x, layout), refs, p)
        if _away_from_kinks(ws.loc):
            return x, refs, p
    raise RuntimeError("could not draw an instance away from interpolation kinks")


DEFAULT_LAYOUT = LevelLayout(((2, 3, 3), (1, 2, 2)))


def oracle_instances(seed, count=20, channels=12, max_tokens=128):
    """Random (seq, refs, params) triples that cycle through L, H and K in {1,2,3} x {1,2,6} x {1,2,4}."""
    rng = np.random.default_rng(seed)
    for i in range(count):
        levels, heads, points = 1 + i % 3, (1, 2, 6)[(i // 3) % 3], (1, 2, 4)[i % 3 - (i // 9) % 3]
        while True:
            lay = LevelLayout(tuple(tuple(int(v) for v in rng.integers(1, 5, 3)) for _ in range(levels)))
            if lay.total <= max_tokens:
                break
        p = DmsaParams.random(channels, heads, levels, points, rng, offset_scale=2.0)
        yield TokenSequence(rng.normal(size=(lay.total, channels)), lay), reference_points(lay), p


def check_msdmsa(seed, layout: LevelLayout | None = None, channels=12, heads=2, points=2):
    layout = layout or DEFAULT_LAYOUT
    x, refs, p = msdmsa_instance(seed, layout, channels, heads, points)
    rng = np.random.default_rng(seed + 1)
    r = _proj(rng, x.shape)
    _, ws = msdmsa_forward(TokenSequence(x, layout), refs, p)
    dx, grads = msdmsa_backward(ws, r)
    arrays = dict(p.arrays(), x=x)
    grads["x"] = dx
    return check_gradients(
        lambda: float((msdmsa_forward(TokenSequence(x, layout), refs, p)[0].tokens * r).sum()),
        arrays, grads, TOL,
    )


def _random_layer(rng, channels, ffn, heads, levels, points):
    lp = DT.DeTransLayerParams.init(channels, ffn, heads, levels, points, rng)
    rnd = DmsaParams.random(channels, heads, levels, points, rng)
    for k, v in rnd.arrays().items():
        getattr(lp.attn, k)[...] = v
    lp.b1[...] = rng.normal(0, 0.1, lp.b1.shape)
    lp.b2[...] = rng.normal(0, 0.1, lp.b2.shape)
    lp.ln1_gain[...] = rng.uniform(0.5, 1.5, channels)
    lp.ln2_gain[...] = rng.uniform(0.5, 1.5, channels)
    lp.ln1_bias[...] = rng.normal(0, 0.1, channels)
    lp.ln2_bias[...] = rng.normal(0, 0.1, channels)
    return lp


def _encoder_instance(seed, layout, n_layers, channels, ffn, heads, points, max_tries=200):
    rng = np.random.default_rng(seed)
    refs = reference_points(layout)
    for _ in range(max_tries):
        layers = [_random_layer(rng, channels, ffn, heads, layout.levels, points) for _ in range(n_layers)]
        x = rng.normal(size=(layout.total, channels))
        _, caches, _ = DT.encoder_forward(TokenSequence(x, layout), refs, layers)
        pre = [c[2][1] for c in caches]  # FFN pre-activations
        if all(_away_from_kinks(c[0].loc) for c in caches) and all(
            (np.abs(u) >= KINK_MARGIN).all() for u in pre
        ):
            return x, refs, layers
    raise RuntimeError("could not draw an encoder instance away from kinks")


def check_ffn(seed, channels=12, ffn=24):
    rng = np.random.default_rng(seed)
    lp = _random_layer(rng, channels, ffn, 2, 1, 1)
    x = rng.normal(size=(5, channels))
    r = _proj(rng, x.shape)
    _, cache = DT.ffn(x, lp)
    dx, g = DT.ffn_backward(lp, cache, r)
    arrays = {"x": x, "w1": lp.w1, "b1": lp.b1, "w2": lp.w2, "b2": lp.b2}
    g["x"] = dx
    return check_gradients(lambda: float((DT.ffn(x, lp)[0] * r).sum()), arrays, g, TOL)


def check_detrans(seed, layout: LevelLayout | None = None, n_layers=1, channels=12, ffn=24, heads=2, points=2):
    layout = layout or DEFAULT_LAYOUT
    x, refs, layers = _encoder_instance(seed, layout, n_layers, channels, ffn, heads, points)
    r = _proj(np.random.default_rng(seed + 1), x.shape)
    _, caches, _ = DT.encoder_forward(TokenSequence(x, layout), refs, layers)
    dx, grads = DT.encoder_backward(layers, caches, r)
    arrays = dict(DT.encoder_arrays(layers), x=x)
    grads["x"] = dx
    return check_gradients(
        lambda: float((DT.encoder_forward(TokenSequence(x, layout), refs, layers)[0].tokens * r).sum()),
        arrays, grads, TOL,
    )


def check_loss(seed, classes=3, dims=(2, 3, 4)):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(classes,) + dims)
    target = N.one_hot(rng.integers(0, classes, dims), classes)
    _, dl = N.dice_ce_loss(logits, target)
    return check_gradients(lambda: N.dice_ce_loss(logits, target)[0], {"logits": logits}, {"logits": dl}, TOL)


GRADCHECK_NET = N.ToyConfig(
    dims=(4, 16, 16), base_channels=4, channels=12, levels=2, layers=1, heads=2, points=2, ffn=24, classes=2,
)


def check_toy_net(seed, cfg: N.ToyConfig = GRADCHECK_NET, max_entries=6):
    """Whole-network check on the minimal config; each group is probed at a random subset."""
    rng = np.random.default_rng(seed)
    p = N.init_params(cfg, rng)
    # move off the degenerate zero-initialized attention so every path carries gradient
    for k, v in p.items():
        if k.endswith(("w_offset", "w_attn")):
            v[...] = rng.normal(0, 0.3, v.shape)
    img, labels = N.sphere_task(cfg, seed)

    def loss():
        seg, _ = N.forward(img, p, cfg)
        return N.total_loss(seg, labels, cfg)[0]

    seg, cache = N.forward(img, p, cfg)
    _, _, dscales = N.total_loss(seg, labels, cfg)
    dx, grads = N.backward(p, cfg, cache, dscales)
    arrays = dict(p, input=img)
    grads["input"] = dx
    return check_gradients(loss, arrays, grads, TOL_NET, max_entries=max_entries, rng=seed)


MODULES = dict(PRIMITIVES)
MODULES.update(msdmsa=check_msdmsa, ffn=check_ffn, detrans=check_detrans, loss=check_loss, **{"toy-net": check_toy_net})


def run(module: str, seed: int, layout: LevelLayout | None = None) -> GradCheckReport:
    """Gradient check by module name; ``tensor-core`` runs every primitive."""
    if module == "tensor-core":
        report = GradCheckReport(TOL)
        for name, fn in PRIMITIVES.items():
            report.merge(fn(seed), prefix=f"{name}.")
        return report
    if module not in MODULES:
        raise ConfigError(f"unknown module {module!r}")
    fn = MODULES[module]
    if layout is not None:
        if module not in ("msdmsa", "detrans"):
            raise ConfigError(f"--dims only applies to msdmsa/detrans, not {module}")
        return fn(seed, layout)
    return fn(seed)
