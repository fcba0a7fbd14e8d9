"""Knowledge-neuron attribution for masked language models."""

from .analysis import (
    LayerStats,
    OverlapCurve,
    layer_overlap,
    layer_stats,
    overlap,
    overlap_curve,
    overlap_curve_from_maps,
    suppression_experiment,
)
from .attribution import AttributionConfig, AttributionMap, attribute, completeness_residual, ig_layer
from .model import MaskedLMHandle, TokenizedPrompt, load_model
from .prompts import PromptSet, bundled_prompt_sets, get_prompt_set, load_prompts, validate_prompt
from .selection import NeuronRef, NeuronSet, adaptive_select, coarse_select, refine
from .toy import ToyModelSpec, brute_force_ranking, build_toy_model

__version__ = "0.1.0"
