"""Layer statistics, set overlap, threshold sweeps and neuron suppression."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .attribution import AttributionConfig, AttributionMap, attribute_many
from .errors import ArgumentError
from .model import MaskedLMHandle, TokenizedPrompt
from .selection import NeuronRef, NeuronSet, coarse_select, refine

DEFAULT_T_GRID = tuple(round(0.05 * k, 2) for k in range(11))
CI_Z = 1.96


@dataclass
class LayerStats:
    """Per-layer mean/std/max over neurons, averaged over prompts.

    ``mean_ci`` and ``max_ci`` are 95% half-widths of the across-prompt spread
    (``1.96 * sd / sqrt(n)``), zero for a single prompt.
    """

    mean: np.ndarray
    std: np.ndarray
    max: np.ndarray
    n_prompts: int
    mean_ci: np.ndarray | None = None
    max_ci: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {"n_prompts": self.n_prompts}
        for name in ("mean", "std", "max", "mean_ci", "max_ci"):
            v = getattr(self, name)
            out[name] = None if v is None else [_num(x) for x in v]
        return out


def _num(x):
    x = float(x)
    return None if np.isnan(x) else x


def _ci(per_prompt: np.ndarray) -> np.ndarray:
    n = per_prompt.shape[0]
    if n < 2:
        return np.zeros(per_prompt.shape[1])
    return CI_Z * per_prompt.std(axis=0, ddof=1) / np.sqrt(n)


def layer_stats(maps: Sequence[AttributionMap | np.ndarray]) -> LayerStats:
    if not maps:
        raise ArgumentError("layer_stats needs at least one map")
    arrays = [np.asarray(getattr(m, "scores", m), dtype=np.float64) for m in maps]
    if any(a.shape != arrays[0].shape or a.ndim != 2 for a in arrays):
        raise ArgumentError("all maps must share one (L, D) shape")
    stack = np.stack(arrays)  # (n, L, D)
    means, stds, maxes = stack.mean(axis=2), stack.std(axis=2), stack.max(axis=2)
    return LayerStats(means.mean(axis=0), stds.mean(axis=0), maxes.mean(axis=0),
                      len(arrays), _ci(means), _ci(maxes))


def overlap(a: NeuronSet, b: NeuronSet) -> float:
    """Jaccard index; two empty sets give 0."""
    union = len(a.members | b.members)
    return len(a.members & b.members) / union if union else 0.0


def overlap_min(a: NeuronSet, b: NeuronSet) -> float:
    """Intersection over the smaller set's size; 0 if either is empty."""
    smaller = min(len(a), len(b))
    return len(a.members & b.members) / smaller if smaller else 0.0


@dataclass
class LayerOverlapHistogram:
    counts: np.ndarray
    t: float | None = None

    def to_dict(self) -> dict:
        return {"t": self.t, "layer_index_base": 1,
                "layers": list(range(1, len(self.counts) + 1)),
                "counts": [int(c) for c in self.counts]}


def layer_overlap(a: NeuronSet, b: NeuronSet, layer_count: int,
                  t: float | None = None) -> LayerOverlapHistogram:
    counts = np.zeros(layer_count, dtype=np.int64)
    for ref in a.members & b.members:
        counts[ref.layer] += 1
    return LayerOverlapHistogram(counts, t)


@dataclass
class OverlapCurve:
    t_grid: np.ndarray
    values: np.ndarray
    set_sizes: list[tuple[int, int]]
    min_ratio: np.ndarray | None = None
    layer_counts: list[list[int]] = field(default_factory=list)
    p: float = 50.0
    label: str = ""

    def __post_init__(self):
        self.t_grid = np.asarray(self.t_grid, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.t_grid.shape != self.values.shape:
            raise ArgumentError("t_grid and values differ in length")
        if np.any(np.diff(self.t_grid) <= 0):
            raise ArgumentError("t_grid must be strictly increasing")

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "p": self.p,
            "t_grid": [float(t) for t in self.t_grid],
            "jaccard": [float(v) for v in self.values],
            "min_ratio": None if self.min_ratio is None else [float(v) for v in self.min_ratio],
            "set_sizes": [list(map(int, s)) for s in self.set_sizes],
            "layer_index_base": 1,
            "layer_counts": self.layer_counts,
        }


def refined_set(maps: Sequence[AttributionMap], t: float, p: float) -> NeuronSet:
    return refine([coarse_select(m, t) for m in maps], p)


def check_t_grid(t_grid: Sequence[float]) -> np.ndarray:
    grid = np.asarray(t_grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0:
        raise ArgumentError("t grid must be a non-empty sequence")
    if np.any(np.diff(grid) <= 0):
        raise ArgumentError("t grid must be strictly increasing")
    if grid[0] < 0:
        raise ArgumentError("thresholds must be non-negative")
    return grid


def overlap_curve_from_maps(maps_a: Sequence[AttributionMap], maps_b: Sequence[AttributionMap],
                            t_grid: Sequence[float] = DEFAULT_T_GRID, p: float = 50.0,
                            label: str = "") -> OverlapCurve:
    """Sweep ``t``: refine each fact's coarse sets at ``p`` and compare the two results."""
    if not maps_a or not maps_b:
        raise ArgumentError("both prompt lists must be non-empty")
    grid = check_t_grid(t_grid)
    layer_count = np.asarray(maps_a[0].scores).shape[0]
    values, mins, sizes, hists = [], [], [], []
    for t in grid:
        a, b = refined_set(maps_a, t, p), refined_set(maps_b, t, p)
        values.append(overlap(a, b))
        mins.append(overlap_min(a, b))
        sizes.append((len(a), len(b)))
        hists.append([int(c) for c in layer_overlap(a, b, layer_count).counts])
    return OverlapCurve(grid, values, sizes, np.asarray(mins), hists, p, label)


def overlap_curve(handle: MaskedLMHandle, prompts_a: Iterable[tuple[str, str, str]],
                  prompts_b: Iterable[tuple[str, str, str]],
                  t_grid: Sequence[float] = DEFAULT_T_GRID, p: float = 50.0,
                  config: AttributionConfig = AttributionConfig(), label: str = "") -> OverlapCurve:
    """Attribute both ``(prompt_id, text, target)`` lists once, then sweep the grid."""
    maps_a = attribute_many(handle, prompts_a, config)
    maps_b = attribute_many(handle, prompts_b, config)
    return overlap_curve_from_maps(maps_a, maps_b, t_grid, p, label)


def multilingual_curves(maps_en1, maps_en2, maps_other, t_grid=DEFAULT_T_GRID, p=50.0):
    """Same-language curve (two English sets) and cross-language curve.

    The cross-language curve pools both English prompt lists before refinement
    and compares against the other language's refined set.
    """
    same = overlap_curve_from_maps(maps_en1, maps_en2, t_grid, p, label="same-language")
    cross = overlap_curve_from_maps(list(maps_en1) + list(maps_en2), maps_other, t_grid, p,
                                    label="cross-language")
    return same, cross


def has_interior_bump(curve: OverlapCurve, lo: float = 0.0, hi: float = 0.5) -> bool:
    """True when some interior grid point in (lo, hi) strictly exceeds its left neighbour
    and is not exceeded on its right, i.e. the curve rises after falling or flat."""
    t, v = curve.t_grid, curve.values
    for k in range(1, len(t) - 1):
        if lo < t[k] < hi and v[k] > v[k - 1] and v[k] >= v[k + 1]:
            return True
    return False


def ablation_scales(neurons: Iterable[NeuronRef], intermediate_dim: int) -> dict[int, np.ndarray]:
    scales: dict[int, np.ndarray] = {}
    for ref in neurons:
        scales.setdefault(ref.layer, np.ones(intermediate_dim))[ref.index] = 0.0
    return scales


def ablated_forward(handle: MaskedLMHandle, prompt: TokenizedPrompt,
                    neurons: Iterable[NeuronRef]) -> tuple[float, float]:
    """Target (logit, prob) with the given neurons zeroed simultaneously."""
    return handle.forward_with_scales(prompt, ablation_scales(neurons, handle.intermediate_dim))


@dataclass
class SuppressionReport:
    prompt: str
    target: str
    set_size: int
    base_prob: float
    attributed_prob: float
    random_probs: list[float]
    seed: int

    @property
    def attributed_drop(self) -> float:
        return self.base_prob - self.attributed_prob

    @property
    def random_drops(self) -> np.ndarray:
        return self.base_prob - np.asarray(self.random_probs)

    @property
    def mean_random_drop(self) -> float:
        return float(self.random_drops.mean())

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "target": self.target,
            "set_size": self.set_size,
            "seed": self.seed,
            "base_prob": self.base_prob,
            "attributed_prob": self.attributed_prob,
            "attributed_drop": self.attributed_drop,
            "random_drops": [float(d) for d in self.random_drops],
            "mean_random_drop": self.mean_random_drop,
        }


def suppression_experiment(handle: MaskedLMHandle, prompt: TokenizedPrompt | str,
                           target: str | None, neuron_set: NeuronSet, trials: int = 50,
                           seed: int = 0) -> SuppressionReport:
    """Zero an attributed set, then ``trials`` random size-matched sets, and compare."""
    if trials < 1:
        raise ArgumentError("trials must be >= 1")
    if len(neuron_set) == 0:
        raise ArgumentError("cannot suppress an empty neuron set")
    if not isinstance(prompt, TokenizedPrompt):
        prompt = handle.tokenize_prompt(prompt, target)
    L, D = handle.layer_count, handle.intermediate_dim
    k = len(neuron_set)
    _, base = handle.unmodified_forward(prompt)
    _, attributed = ablated_forward(handle, prompt, neuron_set.members)
    rng = np.random.default_rng(seed)
    random_probs = []
    for _ in range(trials):
        cells = rng.choice(L * D, size=k, replace=False)
        refs = [NeuronRef(int(c // D), int(c % D)) for c in cells]
        random_probs.append(ablated_forward(handle, prompt, refs)[1])
    return SuppressionReport(prompt.text, prompt.target, k, base, attributed, random_probs, seed)
