"""Turning attribution maps into neuron sets.

Coarse selection keeps neurons whose score is strictly above an absolute
threshold ``t``; adaptive selection keeps neurons at or above a fraction of the
map's global maximum.  Refinement keeps neurons supported by at least
``ceil(P * n / 100)`` of ``n`` per-prompt sets, so ``P=100`` is the
intersection and small ``P`` the union.  Negative scores are never selected.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ArgumentError, DegenerateMapError


class NeuronRef(NamedTuple):
    layer: int
    index: int


class NeuronSet:
    """Immutable set of neurons with a per-member count of supporting prompts."""

    __slots__ = ("_support",)

    def __init__(self, support: Mapping[NeuronRef, int] | Iterable[NeuronRef] = ()):
        if isinstance(support, Mapping):
            items = {NeuronRef(*k): int(v) for k, v in support.items()}
        else:
            items = {NeuronRef(*k): 1 for k in support}
        if any(v < 1 for v in items.values()):
            raise ArgumentError("support counts must be >= 1")
        self._support = items

    @property
    def support(self) -> dict[NeuronRef, int]:
        return dict(self._support)

    @property
    def members(self) -> frozenset[NeuronRef]:
        return frozenset(self._support)

    def __contains__(self, ref) -> bool:
        return NeuronRef(*ref) in self._support

    def __iter__(self):
        return iter(sorted(self._support))

    def __len__(self) -> int:
        return len(self._support)

    def __eq__(self, other) -> bool:
        if isinstance(other, NeuronSet):
            return self.members == other.members
        return NotImplemented

    def __hash__(self):
        return hash(self.members)

    def __repr__(self) -> str:
        return f"NeuronSet({sorted(self._support)})"

    def layers(self) -> Counter:
        return Counter(ref.layer for ref in self._support)

    def to_records(self, layer_base: int = 1) -> list[list[int]]:
        """Sorted ``[layer, index, support_count]`` rows."""
        return [[r.layer + layer_base, r.index, self._support[r]] for r in sorted(self._support)]

    @classmethod
    def from_records(cls, records: Sequence[Sequence[int]], layer_base: int = 1) -> "NeuronSet":
        return cls({NeuronRef(int(l) - layer_base, int(i)): int(c) for l, i, c in records})


def _scores(scores) -> np.ndarray:
    return np.asarray(getattr(scores, "scores", scores), dtype=np.float64)


def _from_mask(mask: np.ndarray) -> NeuronSet:
    return NeuronSet(NeuronRef(int(l), int(i)) for l, i in zip(*np.nonzero(mask)))


def coarse_select(scores, t: float) -> NeuronSet:
    """Neurons with score strictly greater than ``t``.  Accepts a map or an (L, D) array."""
    if t < 0:
        raise ArgumentError(f"threshold must be non-negative, got {t}")
    s = _scores(scores)
    with np.errstate(invalid="ignore"):
        return _from_mask(s > t)


def adaptive_select(scores, fraction: float) -> NeuronSet:
    """Neurons scoring at least ``fraction`` times the map's global maximum."""
    if not 0 < fraction <= 1:
        raise ArgumentError(f"fraction must be in (0, 1], got {fraction}")
    s = _scores(scores)
    top = np.nanmax(s) if np.isfinite(s).any() else np.nan
    if not top > 0:
        raise DegenerateMapError(f"map maximum is {top}; adaptive threshold undefined")
    with np.errstate(invalid="ignore"):
        return _from_mask(s >= fraction * top)


def support_threshold(n: int, p: float) -> int:
    # rounding guards P*n/100 landing a hair above an integer
    return max(math.ceil(round(p * n / 100.0, 9)), 1)


def refine(sets: Sequence[NeuronSet], p: float) -> NeuronSet:
    """Neurons present in at least ``ceil(p * n / 100)`` of the ``n`` sets."""
    if not sets:
        raise ArgumentError("refine needs at least one neuron set")
    if not 0 <= p <= 100:
        raise ArgumentError(f"P must be a percentage in [0, 100], got {p}")
    counts = Counter()
    for s in sets:
        counts.update(s.members)
    need = support_threshold(len(sets), p)
    return NeuronSet({ref: c for ref, c in counts.items() if c >= need})


def top_neuron(scores) -> NeuronRef:
    """The maximal neuron, ties broken by lowest layer then lowest index."""
    s = np.nan_to_num(_scores(scores), nan=-np.inf)
    flat = int(np.argmax(s))  # argmax returns the first (row-major) maximum
    return NeuronRef(*map(int, np.unravel_index(flat, s.shape)))


def top_k(scores, k: int, by_magnitude: bool = False) -> list[NeuronRef]:
    s = np.nan_to_num(_scores(scores), nan=0.0)
    key = np.abs(s) if by_magnitude else s
    order = np.lexsort((np.arange(key.size), -key.ravel()))[:k]
    return [NeuronRef(*map(int, np.unravel_index(j, s.shape))) for j in order]
