"""3D sinusoidal positional encoding.

Each axis gets ``C/3`` channels of interleaved ``(sin, cos)`` pairs at
frequencies ``1 / 10000**(2k / (C/3))``; the D, H and W blocks are
concatenated in that order.
"""

from __future__ import annotations

import numpy as np

from .bridge import LevelLayout, TokenSequence
from .errors import ConfigError, DimensionError

BASE = 10000.0


def frequency(k: int, channels: int) -> float:
    return 1.0 / BASE ** (2 * k / (channels / 3))


def sinusoid_1d(pos: int, k: int, channels: int) -> tuple[float, float]:
    if k < 0 or 2 * k + 1 >= channels / 3:
        raise IndexError(f"pair index {k} out of range for {channels} channels")
    v = pos * frequency(k, channels)
    return float(np.sin(v)), float(np.cos(v))


def _axis_table(n: int, channels: int) -> np.ndarray:
    pairs = channels // 6
    freq = 1.0 / BASE ** (2 * np.arange(pairs) / (channels / 3))
    ang = np.arange(n, dtype=np.float64)[:, None] * freq[None, :]
    tab = np.empty((n, 2 * pairs))
    tab[:, 0::2] = np.sin(ang)
    tab[:, 1::2] = np.cos(ang)
    return tab


def build_pe(layout: LevelLayout, channels: int) -> np.ndarray:
    """PE rows for every token of the layout, shape ``(N, channels)``."""
    if channels < 6 or channels % 6:
        raise ConfigError(f"channel count must be a positive multiple of 6, got {channels}")
    blocks = []
    for d, h, w in layout.dims:
        td, th, tw = (_axis_table(n, channels) for n in (d, h, w))
        dd, hh, ww = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
        blocks.append(np.concatenate([td[dd.ravel()], th[hh.ravel()], tw[ww.ravel()]], axis=1))
    return np.concatenate(blocks, axis=0)


def add_pe(seq: TokenSequence, pe: np.ndarray) -> TokenSequence:
    if pe.shape != seq.tokens.shape:
        raise DimensionError(f"PE shape {pe.shape} != sequence shape {seq.tokens.shape}")
    return TokenSequence(seq.tokens + pe.astype(seq.tokens.dtype, copy=False), seq.layout)
