"""Integrated-gradients scores for every feed-forward neuron.

With a zero baseline the path point at ``alpha`` is ``alpha * x``, and the
score of neuron ``i`` is approximated by the right-endpoint sum

    x_i * (1/m) * sum_{k=1..m} dF/dh_i (k/m * x)

where ``F`` is the target logit at the mask position.  Scores are raw logit
units unless ``normalize`` is set, in which case each map is divided by its
own positive maximum.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .errors import ArgumentError
from .model import MaskedLMHandle, TokenizedPrompt

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class AttributionConfig:
    steps: int = 20
    layers: tuple[int, ...] | None = None  # None means every layer
    normalize: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ArgumentError(f"steps must be >= 1, got {self.steps}")
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(sorted(set(int(l) for l in self.layers))))
            if not self.layers:
                raise ArgumentError("layers must be non-empty")

    def resolve_layers(self, layer_count: int) -> tuple[int, ...]:
        return tuple(range(layer_count)) if self.layers is None else self.layers


@dataclass
class AttributionMap:
    """(L, D) score matrix.  Rows of layers that were not attributed hold NaN."""

    scores: np.ndarray
    prompt_id: str
    target_id: int
    config: AttributionConfig = field(default_factory=AttributionConfig)
    prompt_text: str = ""
    target: str = ""
    model_id: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape

    @property
    def present_layers(self) -> list[int]:
        return [l for l in range(self.scores.shape[0]) if not np.isnan(self.scores[l]).any()]

    def to_dict(self) -> dict:
        cfg = asdict(self.config)
        cfg["layers"] = None if self.config.layers is None else [l + 1 for l in self.config.layers]
        return {
            "schema": "kneurons.attribution_map",
            "schema_version": SCHEMA_VERSION,
            "layer_index_base": 1,
            "model_id": self.model_id,
            "prompt_id": self.prompt_id,
            "prompt_text": self.prompt_text,
            "target": self.target,
            "target_id": int(self.target_id),
            "config": cfg,
            "shape": list(self.scores.shape),
            # row-major; absent layers serialize as null rows
            "scores": [None if np.isnan(row).any() else [float(v) for v in row]
                       for row in self.scores],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttributionMap":
        L, D = d["shape"]
        scores = np.full((L, D), np.nan)
        for l, row in enumerate(d["scores"]):
            if row is not None:
                scores[l] = row
        cfg = dict(d["config"])
        if cfg.get("layers") is not None:
            cfg["layers"] = tuple(l - 1 for l in cfg["layers"])
        return cls(scores, d["prompt_id"], d["target_id"], AttributionConfig(**cfg),
                   d.get("prompt_text", ""), d.get("target", ""), d.get("model_id", ""))


def riemann_alphas(steps: int) -> np.ndarray:
    return np.arange(1, steps + 1, dtype=np.float64) / steps


def ig_layer(handle: MaskedLMHandle, prompt: TokenizedPrompt, layer: int,
             config: AttributionConfig = AttributionConfig()) -> np.ndarray:
    handle.check_layer(layer)
    x = handle.layer_activation(prompt, layer).double().numpy()
    grads = handle.grad_intermediate_batch(prompt, layer, riemann_alphas(config.steps))
    return x * grads.mean(axis=0)


def attribute(handle: MaskedLMHandle, prompt: TokenizedPrompt | str, target: str | None = None,
              config: AttributionConfig = AttributionConfig(),
              prompt_id: str | None = None) -> AttributionMap:
    if not isinstance(prompt, TokenizedPrompt):
        prompt = handle.tokenize_prompt(prompt, target)
    layers = config.resolve_layers(handle.layer_count)
    for layer in layers:
        handle.check_layer(layer)
    scores = np.full((handle.layer_count, handle.intermediate_dim), np.nan)
    for layer in layers:
        scores[layer] = ig_layer(handle, prompt, layer, config)
    if config.normalize:
        top = np.nanmax(scores)
        if top > 0:
            scores = scores / top
    return AttributionMap(scores, prompt_id or prompt.text, prompt.target_id, config,
                          prompt.text, prompt.target, handle.identifier)


def attribute_many(handle: MaskedLMHandle, prompts: Iterable[tuple[str, str, str]],
                   config: AttributionConfig = AttributionConfig()) -> list[AttributionMap]:
    """Attribute ``(prompt_id, text, target)`` triples in order."""
    return [attribute(handle, text, target, config, prompt_id=pid) for pid, text, target in prompts]


def completeness_residual(handle: MaskedLMHandle, prompt: TokenizedPrompt, layer: int,
                          config: AttributionConfig = AttributionConfig()) -> float:
    """``|sum_i score_i - (F(x) - F(0))|`` for one layer."""
    scores = ig_layer(handle, prompt, layer, config)
    f_x, _ = handle.scaled_forward(prompt, layer, np.ones(handle.intermediate_dim))
    f_0, _ = handle.scaled_forward(prompt, layer, np.zeros(handle.intermediate_dim))
    return abs(float(scores.sum()) - (f_x - f_0))
