"""Oracle-agreement checks on seeded toy models, as run by ``kneurons toy-verify``."""

from __future__ import annotations

import numpy as np

from .analysis import suppression_experiment
from .attribution import AttributionConfig, attribute
from .selection import NeuronRef, NeuronSet, top_k, top_neuron
from .toy import brute_force_ranking, build_toy_model, planted_prompt, random_toy_spec

TOP1_REQUIRED = 0.95
TOPK_JACCARD_REQUIRED = 0.6
SUPPRESSION_REQUIRED = 0.95


def top1_agreement(seeds, steps: int = 20) -> list[bool]:
    """Per seed: does the IG argmax equal the top single-neuron ablation?"""
    out = []
    for seed in seeds:
        spec = random_toy_spec(seed, n_planted=1)
        handle = build_toy_model(spec)
        text, target = planted_prompt(spec)
        prompt = handle.tokenize_prompt(text, target)
        scores = attribute(handle, prompt, config=AttributionConfig(steps=steps))
        out.append(top_neuron(scores) == brute_force_ranking(handle, prompt).top(1)[0])
    return out


def topk_jaccard(seeds, k: int = 10, steps: int = 20) -> list[float]:
    """Per seed: Jaccard of IG top-k (by magnitude) and ablation top-k on 3-planted toys."""
    out = []
    for seed in seeds:
        spec = random_toy_spec(seed, n_planted=3)
        handle = build_toy_model(spec)
        text, target = planted_prompt(spec)
        prompt = handle.tokenize_prompt(text, target)
        scores = attribute(handle, prompt, config=AttributionConfig(steps=steps))
        a = set(top_k(scores, k, by_magnitude=True))
        b = set(brute_force_ranking(handle, prompt).top(k))
        out.append(len(a & b) / len(a | b))
    return out


def suppression_wins(seeds, trials: int = 50) -> list[bool]:
    """Per seed: does zeroing the planted neuron cut the target probability more
    than the mean of ``trials`` random single-neuron ablations?"""
    out = []
    for seed in seeds:
        spec = random_toy_spec(seed, n_planted=1)
        handle = build_toy_model(spec)
        text, target = planted_prompt(spec)
        p = spec.planted[0]
        planted = NeuronSet([NeuronRef(p.layer, p.neuron_index)])
        report = suppression_experiment(handle, text, target, planted, trials=trials, seed=seed)
        out.append(report.attributed_drop > report.mean_random_drop)
    return out


def run_suite(n_seeds: int = 100, trials: int = 50, steps: int = 20) -> dict:
    seeds = range(n_seeds)
    top1 = top1_agreement(seeds, steps)
    jac = topk_jaccard(seeds, steps=steps)
    supp = suppression_wins(seeds, trials)
    checks = [
        {"name": "top1-agreement", "value": float(np.mean(top1)), "required": TOP1_REQUIRED,
         "passed": bool(np.mean(top1) >= TOP1_REQUIRED)},
        {"name": "top10-jaccard", "value": float(np.mean(jac)), "required": TOPK_JACCARD_REQUIRED,
         "passed": bool(np.mean(jac) >= TOPK_JACCARD_REQUIRED)},
        {"name": "suppression-asymmetry", "value": float(np.mean(supp)),
         "required": SUPPRESSION_REQUIRED, "passed": bool(np.mean(supp) >= SUPPRESSION_REQUIRED)},
    ]
    return {"seeds": n_seeds, "trials": trials, "steps": steps, "checks": checks,
            "passed": all(c["passed"] for c in checks)}
