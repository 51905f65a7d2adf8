"""Attention complexity benchmarks and hyperparameter sweeps."""

from __future__ import annotations

import csv
import dataclasses
import logging
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import msdmsa, vanilla
from .bridge import LevelLayout, TokenSequence, reference_points
from .errors import ConfigError
from .network import ToyConfig, train_toy

log = logging.getLogger(__name__)

BENCH_SCHEMA = "# deform3d-bench v1"
SWEEP_SCHEMA = "# deform3d-sweep v1"
MECHANISMS = ("msdmsa", "vanilla")
SWEEP_AXES = {"K": "points", "H": "heads", "L_D": "layers", "scales": "multiscale"}

# below this many nanoseconds per call the timer is too coarse to trust
MIN_TIMED_NS = 200_000


@dataclass
class BenchRecord:
    mechanism: str
    n: int
    channels: int
    heads: int
    levels: int
    points: int
    time_ns: int
    workspace_bytes: int
    repeats: int


@dataclass
class SweepRecord:
    axis: str
    value: str
    dice: float
    iterations: int
    seed: int


def bench_layout(n: int, levels: int) -> LevelLayout:
    """Split ``n`` tokens into ``levels`` grids of halving size (last takes the rest)."""
    if n < levels:
        raise ConfigError(f"cannot spread {n} tokens over {levels} levels")
    sizes = [n // 2 ** (l + 1) for l in range(levels - 1)]
    sizes.append(n - sum(sizes))
    dims = []
    for m in sizes:
        if m & (m - 1) == 0:
            e = m.bit_length() - 1
            a = e // 3
            b = (e - a) // 2
            dims.append((2**a, 2**b, 2 ** (e - a - b)))
        else:
            dims.append((m, 1, 1))
    return LevelLayout(tuple(dims))


def median_ns(fn, repeats: int) -> tuple[int, int]:
    """Median wall time of ``fn()`` in ns; raises repeats when the timer is too coarse."""
    repeats = max(3, repeats)
    fn()  # warm-up
    times = []
    while True:
        for _ in range(repeats - len(times)):
            t0 = time.perf_counter_ns()
            fn()
            times.append(time.perf_counter_ns() - t0)
        med = int(statistics.median(times))
        if med >= MIN_TIMED_NS or repeats >= 1000:
            return max(med, 1), repeats
        log.warning("timer resolution too coarse (median %d ns); increasing repeats", med)
        repeats *= 4


def bench_mechanism(mechanism, ns, channels=96, heads=6, levels=3, points=4, repeats=3, seed=0,
                    dtype=np.float64) -> list[BenchRecord]:
    if mechanism not in MECHANISMS:
        raise ConfigError(f"unknown mechanism {mechanism!r}")
    if len(set(ns)) < 2:
        raise ConfigError("need at least two distinct N values")
    rng = np.random.default_rng(seed)
    itemsize = np.dtype(dtype).itemsize
    out = []
    for n in ns:
        lay = bench_layout(n, levels)
        seq = TokenSequence(rng.normal(size=(n, channels)).astype(dtype), lay)
        if mechanism == "msdmsa":
            p = msdmsa.DmsaParams.random(channels, heads, levels, points, rng, dtype)
            refs = reference_points(lay)

            def fn(seq=seq, refs=refs, p=p):
                return msdmsa.msdmsa_forward(seq, refs, p)

            elems = msdmsa.workspace_elements(n, channels, heads, levels, points)
        else:
            p = vanilla.VanillaParams.random(channels, heads, rng, dtype)

            def fn(seq=seq, p=p):
                return vanilla.vanilla_forward(seq, p)

            elems = vanilla.workspace_elements(n, channels, heads)
        t, reps = median_ns(fn, repeats)
        out.append(BenchRecord(mechanism, n, channels, heads, levels, points, t, elems * itemsize, reps))
    return out


def fit_slope(ns, times) -> float:
    """Least-squares slope of log(time) against log(N)."""
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(times, float)), 1)[0])


def write_records(path_or_file, records, schema: str) -> None:
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        fh.write(schema + "\n")
        names = [f.name for f in dataclasses.fields(records[0])] if records else []
        w = csv.writer(fh)
        w.writerow(names)
        for r in records:
            w.writerow([getattr(r, k) for k in names])
    finally:
        if own:
            fh.close()


def sweep_configs(axis: str, values, base: ToyConfig):
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    field = SWEEP_AXES[axis]
    for v in values:
        if axis == "scales":
            if v not in ("single", "multi"):
                raise ConfigError(f"scales values must be 'single' or 'multi', got {v!r}")
            yield str(v), dataclasses.replace(base, multiscale=(v == "multi"))
        else:
            yield str(v), dataclasses.replace(base, **{field: int(v)})


def run_sweep(axis: str, values, base: ToyConfig, seeds) -> list[SweepRecord]:
    """Train the toy net once per (value, seed) and record final foreground Dice."""
    out = []
    for label, cfg in sweep_configs(axis, values, base):
        for s in seeds:
            trace, _, _ = train_toy(dataclasses.replace(cfg, seed=int(s)))
            out.append(SweepRecord(axis, label, trace.dice[-1], len(trace.dice), int(s)))
            log.info("sweep %s=%s seed %d: dice %.4f", axis, label, s, trace.dice[-1])
    return out


def mean_by_value(records: list[SweepRecord]) -> dict[str, float]:
    groups: dict[str, list[float]] = {}
    for r in records:
        groups.setdefault(r.value, []).append(r.dice)
    return {k: float(np.mean(v)) for k, v in groups.items()}


def workspace_ratio(n, channels=96, heads=6, levels=3, points=4) -> float:
    return vanilla.workspace_elements(n, channels, heads) / msdmsa.workspace_elements(
        n, channels, heads, levels, points
    )

