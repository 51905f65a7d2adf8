"""Full multi-head self-attention, the quadratic-cost baseline (forward only)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .bridge import TokenSequence
from .errors import ConfigError, DimensionError


@dataclass
class VanillaParams:
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    heads: int = 1

    def __post_init__(self):
        c = self.w_q.shape[0]
        if c % self.heads:
            raise ConfigError(f"channels {c} not divisible by heads {self.heads}")
        for w in (self.w_q, self.w_k, self.w_v, self.w_out):
            if w.shape != (c, c):
                raise ConfigError(f"projection has shape {w.shape}, expected {(c, c)}")

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def random(cls, channels, heads, rng=None, dtype=np.float64):
        rng = np.random.default_rng(rng)
        s = 1.0 / math.sqrt(channels)

        def mat():
            return rng.normal(0, s, (channels, channels)).astype(dtype)

        def vec():
            return rng.normal(0, 0.1, channels).astype(dtype)

        return cls(mat(), vec(), mat(), vec(), mat(), vec(), mat(), vec(), heads=heads)


def vanilla_forward(seq: TokenSequence, params: VanillaParams, return_attention: bool = False, block: int = 128):
    x = seq.tokens
    if x.shape[1] != params.channels:
        raise DimensionError(f"sequence width {x.shape[1]} != parameter width {params.channels}")
    n, c = x.shape
    h = params.heads
    ch = c // h
    q = T.linear(x, params.w_q, params.b_q)
    k = T.linear(x, params.w_k, params.b_k)
    v = T.linear(x, params.w_v, params.b_v)
    scale = 1.0 / math.sqrt(ch)
    heads = np.empty((n, c), dtype=x.dtype)
    probs = np.empty((h, n, n), dtype=x.dtype) if return_attention else None
    for i in range(h):
        sl = slice(i * ch, (i + 1) * ch)
        kt = np.ascontiguousarray(k[:, sl].T)
        # exact row softmax over all N keys, one block of query rows at a time
        for r0 in range(0, n, block):
            rows = slice(r0, min(r0 + block, n))
            a = q[rows, sl] @ kt
            a *= scale
            a -= a.max(axis=1, keepdims=True)
            np.exp(a, out=a)
            a /= a.sum(axis=1, keepdims=True)
            heads[rows, sl] = a @ v[:, sl]
            if return_attention:
                probs[i, rows] = a
    out = TokenSequence(T.linear(heads, params.w_out, params.b_out), seq.layout)
    return (out, probs) if return_attention else out


def vanilla_oracle(seq: TokenSequence, params: VanillaParams) -> np.ndarray:
    """Triple-loop evaluation of the same attention, for testing."""
    x = seq.tokens
    n, c = x.shape
    h = params.heads
    ch = c // h
    q = x @ params.w_q + params.b_q
    k = x @ params.w_k + params.b_k
    v = x @ params.w_v + params.b_v
    cat = np.zeros((n, c))
    for i in range(h):
        for a in range(n):
            s = [sum(q[a, i * ch + t] * k[b, i * ch + t] for t in range(ch)) / math.sqrt(ch) for b in range(n)]
            m = max(s)
            e = [math.exp(v_ - m) for v_ in s]
            z = sum(e)
            for t in range(ch):
                cat[a, i * ch + t] = sum(e[b] / z * v[b, i * ch + t] for b in range(n))
    return cat @ params.w_out + params.b_out


def workspace_elements(n: int, channels: int, heads: int) -> int:
    """Elements a backward pass would retain: inputs, Q/K/V, N x N probabilities, head outputs."""
    return n * 5 * channels + heads * n * n
