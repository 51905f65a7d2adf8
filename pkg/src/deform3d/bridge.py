"""Feature pyramid <-> token sequence conversion and reference points."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DimensionError
from .tensor import check_volume

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LevelLayout:
    """Per-level grid dims and where each level starts in the flat sequence."""

    dims: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        dims = tuple(tuple(int(v) for v in d) for d in self.dims)
        if not dims or any(len(d) != 3 or min(d) < 1 for d in dims):
            raise DimensionError(f"invalid level dims {self.dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def levels(self) -> int:
        return len(self.dims)

    @cached_property
    def sizes(self) -> tuple[int, ...]:
        return tuple(d * h * w for d, h, w in self.dims)

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(v) for v in np.concatenate([[0], np.cumsum(self.sizes)[:-1]]))

    @property
    def total(self) -> int:
        return sum(self.sizes)

    def to_text(self) -> str:
        return ";".join(",".join(str(v) for v in d) for d in self.dims)

    @classmethod
    def parse(cls, text: str) -> "LevelLayout":
        parts = [p for p in text.replace("/", ";").split(";") if p.strip()]
        return cls(tuple(tuple(int(v) for v in p.replace("x", ",").split(",")) for p in parts))


@dataclass
class TokenSequence:
    tokens: np.ndarray  # (N, C)
    layout: LevelLayout

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.layout.total:
            raise DimensionError(
                f"token matrix {self.tokens.shape} does not match layout total {self.layout.total}"
            )

    @property
    def channels(self) -> int:
        return self.tokens.shape[1]


def flatten_levels(levels) -> TokenSequence:
    """Stack volumes into one sequence, level-major then d, h, w."""
    if not levels:
        raise DimensionError("no levels to flatten")
    for v in levels:
        check_volume(v)
    c = levels[0].shape[0]
    if any(v.shape[0] != c for v in levels):
        raise DimensionError(f"levels disagree on channel count: {[v.shape[0] for v in levels]}")
    layout = LevelLayout(tuple(v.shape[1:] for v in levels))
    tokens = np.concatenate([v.reshape(c, -1).T for v in levels], axis=0)
    return TokenSequence(tokens, layout)


def unflatten(seq: TokenSequence) -> list[np.ndarray]:
    lay = seq.layout
    if seq.tokens.shape[0] != lay.total:
        raise DimensionError(f"sequence length {seq.tokens.shape[0]} != layout total {lay.total}")
    c = seq.channels
    return [
        np.ascontiguousarray(seq.tokens[o : o + n].T).reshape((c,) + d)
        for o, n, d in zip(lay.offsets, lay.sizes, lay.dims)
    ]


def reference_points(layout: LevelLayout) -> np.ndarray:
    """Voxel-center normalized coordinates ``(N, 3)`` for every token."""
    out = []
    for d, h, w in layout.dims:
        g = np.stack(np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij"), axis=-1)
        out.append((g.reshape(-1, 3) + 0.5) / np.array([d, h, w], dtype=np.float64))
    return np.concatenate(out, axis=0)


def rescale(p_hat, dims) -> np.ndarray:
    """Map normalized coords to continuous grid coords of a level.

    Uses the voxel-center convention, so ``0.5`` lands on the grid midpoint
    and reference points map back onto integer indices.
    """
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if log.isEnabledFor(logging.DEBUG) and ((p_hat < 0) | (p_hat > 1)).any():
        log.debug("rescale: normalized coordinate outside [0, 1]")
    return p_hat * np.asarray(dims, dtype=np.float64) - 0.5
