"""Uniform access to a masked LM's feed-forward intermediate activations.

Every handle exposes the activations of the position-wise feed-forward block
(after the nonlinearity, width ``intermediate_dim``) at the mask position, lets
callers rescale or replace them during a forward pass, and differentiates one
output logit with respect to them.  Only the mask position is touched.

Layers are 0-based here.  Anything user-facing (CLI text, plots, result files)
reports them 1-based.
"""

from __future__ import annotations

import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .errors import (
    CapabilityError,
    LayerBoundsError,
    LoadError,
    MultiTokenTargetError,
    PromptStructureError,
)

log = logging.getLogger(__name__)

MASK_PLACEHOLDER = "[MASK]"

Edit = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class TokenizedPrompt:
    token_ids: tuple[int, ...]
    mask_position: int
    target_id: int
    text: str = ""
    target: str = ""


@dataclass(frozen=True)
class ActivationVector:
    layer: int
    values: np.ndarray


class MaskedLMHandle(ABC):
    """Base class for model handles.

    Subclasses implement tokenization and :meth:`_mask_logits`; everything
    else (scaling, gradients, capture) is built on top of that one primitive.
    A handle is not safe for simultaneous use from several threads.
    """

    layer_count: int
    intermediate_dim: int
    vocab_size: int
    identifier: str
    mask_token: str

    @abstractmethod
    def _encode(self, text: str) -> list[int]: ...

    @abstractmethod
    def word_pieces(self, word: str) -> list[int]:
        """Vocabulary ids a bare word tokenizes to."""

    @property
    @abstractmethod
    def mask_token_id(self) -> int: ...

    @abstractmethod
    def _mask_logits(
        self, prompt: TokenizedPrompt, batch: int, edits: Mapping[int, Edit]
    ) -> torch.Tensor:
        """Run ``batch`` copies of the prompt and return (batch, V) logits at the mask.

        ``edits[layer]`` receives the (batch, D) intermediate activations at the
        mask position and returns their replacement.
        """

    # ------------------------------------------------------------------
    def tokenize_prompt(self, text: str, target: str) -> TokenizedPrompt:
        if not target or not target.strip():
            raise PromptStructureError("target word is empty")
        n_masks = text.count(MASK_PLACEHOLDER)
        if n_masks != 1:
            raise PromptStructureError(
                f"prompt must contain exactly one {MASK_PLACEHOLDER}, found {n_masks}: {text!r}"
            )
        model_text = text.replace(MASK_PLACEHOLDER, self.mask_token)
        ids = self._encode(model_text)
        positions = [i for i, t in enumerate(ids) if t == self.mask_token_id]
        if len(positions) != 1:
            raise PromptStructureError(
                f"tokenized prompt has {len(positions)} mask tokens: {text!r}"
            )
        pieces = self.word_pieces(target)
        if len(pieces) != 1:
            raise MultiTokenTargetError(
                f"target {target!r} tokenizes to {len(pieces)} pieces {pieces}; "
                "only single-token targets are supported"
            )
        return TokenizedPrompt(tuple(ids), positions[0], pieces[0], text, target)

    def check_layer(self, layer: int) -> None:
        if not 0 <= layer < self.layer_count:
            raise LayerBoundsError(f"layer {layer} outside [0, {self.layer_count})")

    def _scale_tensor(self, scale) -> torch.Tensor:
        s = torch.as_tensor(np.asarray(scale, dtype=np.float64), dtype=self.dtype)
        if s.shape[-1] != self.intermediate_dim:
            raise ValueError(f"scale has width {s.shape[-1]}, expected {self.intermediate_dim}")
        if not torch.isfinite(s).all():
            raise ValueError("scale must be finite")
        return s

    @property
    def dtype(self) -> torch.dtype:
        return torch.float32

    def forward_with_scales(
        self, prompt: TokenizedPrompt, scales: Mapping[int, Sequence[float]]
    ) -> tuple[float, float]:
        """Target (logit, probability) with several layers rescaled at once."""
        edits = {}
        for layer, scale in scales.items():
            self.check_layer(layer)
            s = self._scale_tensor(scale).reshape(1, -1)
            edits[layer] = lambda h, s=s: h * s
        with torch.no_grad():
            logits = self._mask_logits(prompt, 1, edits)[0]
        prob = torch.softmax(logits.double(), dim=-1)[prompt.target_id]
        return float(logits[prompt.target_id]), float(prob)

    def scaled_forward(
        self, prompt: TokenizedPrompt, layer: int, scale: Sequence[float]
    ) -> tuple[float, float]:
        return self.forward_with_scales(prompt, {layer: scale})

    def unmodified_forward(self, prompt: TokenizedPrompt) -> tuple[float, float]:
        with torch.no_grad():
            logits = self._mask_logits(prompt, 1, {})[0]
        prob = torch.softmax(logits.double(), dim=-1)[prompt.target_id]
        return float(logits[prompt.target_id]), float(prob)

    def scaled_forward_batch(
        self, prompt: TokenizedPrompt, layer: int, scales: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised :meth:`scaled_forward` over rows of a (B, D) scale matrix."""
        self.check_layer(layer)
        s = self._scale_tensor(scales)
        if s.ndim != 2:
            raise ValueError("scales must be a (B, D) matrix")
        with torch.no_grad():
            logits = self._mask_logits(prompt, s.shape[0], {layer: lambda h: h * s})
        probs = torch.softmax(logits.double(), dim=-1)[:, prompt.target_id]
        return logits[:, prompt.target_id].double().numpy(), probs.numpy()

    def capture_activations(self, prompt: TokenizedPrompt) -> list[ActivationVector]:
        seen: dict[int, torch.Tensor] = {}

        def recorder(layer):
            def record(h):
                seen[layer] = h[0].detach().clone()
                return h

            return record

        with torch.no_grad():
            self._mask_logits(prompt, 1, {l: recorder(l) for l in range(self.layer_count)})
        return [
            ActivationVector(l, seen[l].double().numpy()) for l in range(self.layer_count)
        ]

    def layer_activation(self, prompt: TokenizedPrompt, layer: int) -> torch.Tensor:
        self.check_layer(layer)
        seen = {}

        def record(h):
            seen["h"] = h[0].detach().clone()
            return h

        with torch.no_grad():
            self._mask_logits(prompt, 1, {layer: record})
        return seen["h"]

    def grad_intermediate_batch(
        self, prompt: TokenizedPrompt, layer: int, alphas: Sequence[float]
    ) -> np.ndarray:
        """Gradients of the target logit w.r.t. the layer's activations set to alpha*x.

        Returns a (len(alphas), D) array; row k is evaluated at alphas[k].
        """
        x = self.layer_activation(prompt, layer)
        a = torch.as_tensor(np.asarray(alphas, dtype=np.float64), dtype=x.dtype)
        h = (a[:, None] * x[None, :]).requires_grad_(True)
        with torch.enable_grad():
            logits = self._mask_logits(prompt, len(a), {layer: lambda _: h})
            # rows are independent, so the gradient of the sum is per-row
            logits[:, prompt.target_id].sum().backward()
        return h.grad.double().numpy()

    def grad_intermediate(self, prompt: TokenizedPrompt, layer: int, alpha: float) -> np.ndarray:
        return self.grad_intermediate_batch(prompt, layer, [alpha])[0]


class HFMaskedLM(MaskedLMHandle):
    """Adapter over a Hugging Face ``*ForMaskedLM`` with BERT-style layers.

    The hook point is ``encoder.layer[i].intermediate``, whose output is the
    post-activation feed-forward hidden vector.
    """

    def __init__(self, model, tokenizer, identifier: str):
        self.model = model.eval()
        self.tokenizer = tokenizer
        self.identifier = identifier
        self._layers = self._find_intermediate_modules(model)
        self.layer_count = len(self._layers)
        self.intermediate_dim = int(model.config.intermediate_size)
        self.vocab_size = int(model.config.vocab_size)
        if tokenizer.mask_token is None:
            raise CapabilityError(f"{identifier}: tokenizer has no mask token")
        self.mask_token = tokenizer.mask_token
        for p in self.model.parameters():
            p.requires_grad_(False)

    @staticmethod
    def _find_intermediate_modules(model):
        base = getattr(model, "base_model", model)
        encoder = getattr(base, "encoder", None)
        layers = getattr(encoder, "layer", None)
        if layers is None or not all(hasattr(l, "intermediate") for l in layers):
            raise CapabilityError(
                f"unsupported architecture {type(model).__name__}: "
                "expected encoder.layer[*].intermediate modules"
            )
        return [l.intermediate for l in layers]

    @property
    def dtype(self):
        return next(self.model.parameters()).dtype

    @property
    def mask_token_id(self) -> int:
        return int(self.tokenizer.mask_token_id)

    def _encode(self, text: str) -> list[int]:
        return list(self.tokenizer(text)["input_ids"])

    def word_pieces(self, word: str) -> list[int]:
        return list(self.tokenizer.convert_tokens_to_ids(self.tokenizer.tokenize(word)))

    def _mask_logits(self, prompt, batch, edits):
        pos = prompt.mask_position
        handles = []
        for layer, edit in edits.items():

            def hook(module, inputs, output, edit=edit):
                out = output.clone()
                out[:, pos, :] = edit(output[:, pos, :])
                return out

            handles.append(self._layers[layer].register_forward_hook(hook))
        try:
            ids = torch.tensor([prompt.token_ids] * batch)
            out = self.model(input_ids=ids, attention_mask=torch.ones_like(ids))
        finally:
            for h in handles:
                h.remove()
        return out.logits[:, pos, :]


def load_model(source: str | Path) -> MaskedLMHandle:
    """Open a checkpoint directory, hub name, or toy-spec JSON file."""
    path = Path(source)
    if path.is_file():
        if path.suffix == ".json":
            from .toy import ToyModelSpec, build_toy_model

            try:
                spec = ToyModelSpec.from_dict(json.loads(path.read_text()))
            except (OSError, ValueError, KeyError, TypeError) as exc:
                raise LoadError(f"cannot read toy spec {path}: {exc}") from exc
            return build_toy_model(spec, identifier=f"toy:{path.name}")
        raise LoadError(f"{path} is neither a checkpoint directory nor a toy spec (.json)")
    if not path.exists() and str(source).startswith((".", "/", "~")):
        raise LoadError(f"checkpoint {source} does not exist")
    # directories and hub identifiers both go through transformers
    return _load_hf(str(source))


def _load_hf(source: str) -> HFMaskedLM:
    from transformers import AutoConfig, AutoModelForMaskedLM, AutoTokenizer
    from transformers.utils import logging as hf_logging

    hf_logging.disable_progress_bar()
    try:
        config = AutoConfig.from_pretrained(source)
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read checkpoint {source}: {exc}") from exc
    try:
        model = AutoModelForMaskedLM.from_pretrained(source, config=config)
    except ValueError as exc:
        raise CapabilityError(f"{source}: not a masked-LM architecture ({exc})") from exc
    except OSError as exc:
        raise LoadError(f"cannot read weights from {source}: {exc}") from exc
    try:
        tokenizer = AutoTokenizer.from_pretrained(source)
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read tokenizer from {source}: {exc}") from exc
    handle = HFMaskedLM(model, tokenizer, identifier=source)
    log.info("loaded %s: L=%d D=%d V=%d", source, handle.layer_count,
             handle.intermediate_dim, handle.vocab_size)
    return handle
