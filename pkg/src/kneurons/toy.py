"""Small masked-LM-shaped models with planted key-value memories.

A toy model is a residual stack over one-hot token directions (the residual
width equals the vocabulary size).  The mask position's residual starts as the
bag-of-words sum of the prompt's token embeddings; each layer applies
``relu(W_in r + b_in)`` and adds ``W_out h`` back to the residual; the readout
is the identity (``linear``) or the elementwise square (``square``).

A planted neuron fires with activation 1 when its trigger multiset is present
(and by a margin of 1 stays off when any trigger token is missing), and writes
``strength`` onto its value token's logit.  Everything else is seeded noise of
size ``noise * mean(strength)``.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .errors import CapacityError, ConstructionError
from .model import MASK_PLACEHOLDER, MaskedLMHandle, TokenizedPrompt
from .selection import NeuronRef

SPECIAL_TOKENS = ("[PAD]", "[UNK]", MASK_PLACEHOLDER)
_WORD_RE = re.compile(r"\[MASK\]|\w+|[^\w\s]")
MAX_BRUTE_FORCE_NEURONS = 10_000


class ToyModel(MaskedLMHandle):
    """Model handle over explicit weight arrays (float64 throughout).

    Shapes: ``w_in`` (L, D, V), ``b_in`` (L, D), ``w_out`` (L, V, D),
    ``unembed`` (V, V).
    """

    def __init__(self, w_in, b_in, w_out, unembed=None, vocab=None,
                 readout: str = "linear", identifier: str = "toy"):
        self.w_in = torch.as_tensor(np.asarray(w_in, dtype=np.float64))
        self.b_in = torch.as_tensor(np.asarray(b_in, dtype=np.float64))
        self.w_out = torch.as_tensor(np.asarray(w_out, dtype=np.float64))
        L, D, V = self.w_in.shape
        if self.b_in.shape != (L, D) or self.w_out.shape != (L, V, D):
            raise ConstructionError("inconsistent toy weight shapes")
        if unembed is None:
            unembed = np.eye(V)
        self.unembed = torch.as_tensor(np.asarray(unembed, dtype=np.float64))
        if readout not in ("linear", "square"):
            raise ConstructionError(f"unknown readout {readout!r}")
        self.readout = readout
        self.vocab = list(vocab) if vocab is not None else default_vocab(V)
        if len(self.vocab) != V:
            raise ConstructionError(f"vocab has {len(self.vocab)} entries, expected {V}")
        for tok in SPECIAL_TOKENS[1:]:
            if tok not in self.vocab:
                raise ConstructionError(f"vocab must contain {tok}")
        self._index = {tok: i for i, tok in enumerate(self.vocab)}
        self.layer_count, self.intermediate_dim, self.vocab_size = L, D, V
        self.identifier = identifier
        self.mask_token = MASK_PLACEHOLDER

    @property
    def dtype(self):
        return torch.float64

    @property
    def mask_token_id(self) -> int:
        return self._index[MASK_PLACEHOLDER]

    def word_pieces(self, word: str) -> list[int]:
        """Greedy longest-match WordPiece split; unknown words map to [UNK]."""
        if word in self._index:
            return [self._index[word]]
        pieces, start = [], 0
        while start < len(word):
            end = len(word)
            while end > start:
                piece = word[start:end] if start == 0 else "##" + word[start:end]
                if piece in self._index:
                    break
                end -= 1
            if end == start:
                return [self._index["[UNK]"]]
            pieces.append(self._index[piece])
            start = end
        return pieces

    def _encode(self, text: str) -> list[int]:
        ids = []
        for word in _WORD_RE.findall(text):
            ids.extend(self.word_pieces(word))
        return ids

    def _mask_logits(self, prompt, batch, edits):
        r = torch.zeros(self.vocab_size, dtype=torch.float64)
        for tok in prompt.token_ids:
            r[tok] += 1.0
        r = r.expand(batch, -1)
        for layer in range(self.layer_count):
            h = torch.relu(r @ self.w_in[layer].T + self.b_in[layer])
            if layer in edits:
                h = edits[layer](h)
            r = r + h @ self.w_out[layer].T
        if self.readout == "square":
            r = r * r
        return r @ self.unembed.T


def default_vocab(size: int) -> list[str]:
    if size < len(SPECIAL_TOKENS) + 1:
        raise ConstructionError(f"vocab_size must be at least {len(SPECIAL_TOKENS) + 1}")
    return list(SPECIAL_TOKENS) + [f"w{i}" for i in range(len(SPECIAL_TOKENS), size)]


@dataclass
class PlantedNeuron:
    layer: int
    neuron_index: int
    trigger: list[int]
    value_token: int
    strength: float


@dataclass
class ToyModelSpec:
    layer_count: int
    intermediate_dim: int
    vocab_size: int
    planted: list[PlantedNeuron] = field(default_factory=list)
    seed: int = 0
    noise: float = 1e-3
    readout: str = "linear"
    vocab: list[str] | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = "toy"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyModelSpec":
        d = dict(d)
        if d.pop("kind", "toy") != "toy":
            raise ValueError("not a toy model spec")
        d["planted"] = [PlantedNeuron(**p) for p in d.get("planted", [])]
        return cls(**d)

    def validate(self) -> None:
        L, D, V = self.layer_count, self.intermediate_dim, self.vocab_size
        if L < 1 or D < 1 or V < 2:
            raise ConstructionError(f"need L>=1, D>=1, V>=2; got L={L} D={D} V={V}")
        if self.noise < 0:
            raise ConstructionError("noise must be non-negative")
        seen = set()
        for p in self.planted:
            key = (p.layer, p.neuron_index)
            if not (0 <= p.layer < L and 0 <= p.neuron_index < D):
                raise ConstructionError(f"planted neuron {key} out of bounds")
            if key in seen:
                raise ConstructionError(f"neuron {key} planted twice")
            seen.add(key)
            if not p.trigger or any(not 0 <= t < V for t in p.trigger):
                raise ConstructionError(f"bad trigger {p.trigger} for {key}")
            if not 0 <= p.value_token < V:
                raise ConstructionError(f"value token {p.value_token} out of range")
            if not p.strength > 0:
                raise ConstructionError(f"strength must be positive, got {p.strength}")


def build_toy_model(spec: ToyModelSpec, identifier: str | None = None) -> ToyModel:
    spec.validate()
    L, D, V = spec.layer_count, spec.intermediate_dim, spec.vocab_size
    rng = np.random.default_rng(spec.seed)
    ref = np.mean([p.strength for p in spec.planted]) if spec.planted else 1.0
    sigma = spec.noise * ref
    w_in = rng.normal(0.0, 1.0, (L, D, V)) * sigma
    b_in = rng.normal(0.0, 1.0, (L, D)) * sigma
    w_out = rng.normal(0.0, 1.0, (L, V, D)) * sigma
    for p in spec.planted:
        counts = Counter(p.trigger)
        w_in[p.layer, p.neuron_index, :] = 0.0
        for tok in counts:
            w_in[p.layer, p.neuron_index, tok] = 2.0
        b_in[p.layer, p.neuron_index] = 1.0 - 2.0 * len(p.trigger)
        w_out[p.layer, :, p.neuron_index] = 0.0
        w_out[p.layer, p.value_token, p.neuron_index] = p.strength
    return ToyModel(w_in, b_in, w_out, vocab=spec.vocab or default_vocab(V),
                    readout=spec.readout,
                    identifier=identifier or f"toy(L={L},D={D},V={V},seed={spec.seed})")


def random_toy_spec(seed: int, n_planted: int = 1, layer_count: int = 4,
                    intermediate_dim: int = 16, vocab_size: int = 40,
                    trigger_size: int = 2, noise: float = 1e-3) -> ToyModelSpec:
    """Random spec whose planted neurons all write to one shared value token."""
    rng = np.random.default_rng(seed)
    content = np.arange(len(SPECIAL_TOKENS), vocab_size)
    value = int(rng.choice(content))
    pool = [int(t) for t in rng.permutation(content) if t != value]
    cells = rng.choice(layer_count * intermediate_dim, size=n_planted, replace=False)
    planted = []
    for k, cell in enumerate(cells):
        trigger = sorted(pool[k * trigger_size:(k + 1) * trigger_size])
        planted.append(PlantedNeuron(int(cell // intermediate_dim), int(cell % intermediate_dim),
                                     trigger, value, float(rng.uniform(1.0, 3.0))))
    return ToyModelSpec(layer_count, intermediate_dim, vocab_size, planted, seed, noise)


def planted_prompt(spec: ToyModelSpec, n_filler: int = 3) -> tuple[str, str]:
    """A prompt containing every planted trigger, plus filler, and its target word."""
    vocab = spec.vocab or default_vocab(spec.vocab_size)
    rng = np.random.default_rng(spec.seed + 1)
    used = {t for p in spec.planted for t in p.trigger} | {p.value_token for p in spec.planted}
    free = [t for t in range(len(SPECIAL_TOKENS), spec.vocab_size) if t not in used]
    tokens = [t for p in spec.planted for t in p.trigger]
    tokens += [int(t) for t in rng.choice(free, size=min(n_filler, len(free)), replace=False)]
    words = [vocab[t] for t in rng.permutation(tokens)] + [MASK_PLACEHOLDER]
    target = vocab[spec.planted[0].value_token] if spec.planted else vocab[-1]
    return " ".join(words), target


@dataclass
class AblationRanking:
    entries: list[tuple[NeuronRef, float]]

    def top(self, k: int) -> list[NeuronRef]:
        return [ref for ref, _ in self.entries[:k]]

    def deltas(self, layer_count: int, intermediate_dim: int) -> np.ndarray:
        out = np.zeros((layer_count, intermediate_dim))
        for ref, d in self.entries:
            out[ref.layer, ref.index] = d
        return out


def brute_force_ranking(handle: MaskedLMHandle, prompt: TokenizedPrompt | str,
                        target: str | None = None) -> AblationRanking:
    """Rank every neuron by the logit drop from zeroing it alone."""
    L, D = handle.layer_count, handle.intermediate_dim
    if L * D > MAX_BRUTE_FORCE_NEURONS:
        raise CapacityError(f"{L * D} neurons exceeds brute-force cap {MAX_BRUTE_FORCE_NEURONS}")
    if not isinstance(prompt, TokenizedPrompt):
        prompt = handle.tokenize_prompt(prompt, target)
    # row 0 is the unmodified pass so every delta comes from one batch
    scales = np.vstack([np.ones((1, D)), 1.0 - np.eye(D)])
    entries = []
    for layer in range(L):
        logits, _ = handle.scaled_forward_batch(prompt, layer, scales)
        for i, d in enumerate(logits[0] - logits[1:]):
            entries.append((NeuronRef(layer, i), float(d)))
    entries.sort(key=lambda e: (-abs(e[1]), e[0].layer, e[0].index))
    return AblationRanking(entries)


def toy_spec_for_prompts(prompt_sets, layer_count: int = 4, intermediate_dim: int = 16,
                         seed: int = 0, strength: float = 2.0) -> ToyModelSpec:
    """Toy spec whose vocabulary covers the given prompt sets.

    Each set gets one planted neuron triggered by the word that occurs in the
    most of its prompts (ties alphabetical, triggers not reused) and writing
    to the set's answer word.
    """
    words = set()
    for ps in prompt_sets:
        for text in ps.prompts:
            words.update(w for w in _WORD_RE.findall(text) if w != MASK_PLACEHOLDER)
        words.add(ps.fact.object)
    vocab = list(SPECIAL_TOKENS) + sorted(words)
    index = {w: i for i, w in enumerate(vocab)}
    rng = np.random.default_rng(seed)
    cells = rng.choice(layer_count * intermediate_dim, size=len(prompt_sets), replace=False)
    planted, used = [], set()
    for ps, cell in zip(prompt_sets, cells):
        freq = Counter()
        for text in ps.prompts:
            freq.update({w for w in _WORD_RE.findall(text) if w.isalnum()})
        candidates = [w for w in sorted(freq, key=lambda w: (-freq[w], w))
                      if w not in used and w != ps.fact.object]
        if not candidates:
            raise ConstructionError(f"no trigger word available for {ps.set_id}")
        used.add(candidates[0])
        planted.append(PlantedNeuron(int(cell // intermediate_dim), int(cell % intermediate_dim),
                                     [index[candidates[0]]], index[ps.fact.object], strength))
    return ToyModelSpec(layer_count, intermediate_dim, len(vocab), planted, seed, vocab=vocab)
