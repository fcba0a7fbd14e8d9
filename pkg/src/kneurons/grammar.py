"""Number-agreement attribution: good vs bad verb forms, by attractor count.

Ingestion format (JSON Lines, one example per line)::

    {"example_id": "17", "sentence": "the keys to the cabinet are on the table",
     "mask_index": 5, "good": "are", "bad": "is", "n_attractors": 1}

``mask_index`` is the 0-based whitespace word position that gets replaced by
``[MASK]``.  A sentence may instead already contain ``[MASK]`` with
``mask_index`` null.  :func:`convert_colorless_green` produces this format
from the tab-separated layout of the public agreement corpus.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .analysis import CI_Z, LayerStats, layer_stats
from .attribution import AttributionConfig, AttributionMap, attribute
from .errors import ArgumentError, DegenerateMapError, KnowledgeNeuronsError, LoadError
from .model import MASK_PLACEHOLDER, MaskedLMHandle
from .selection import NeuronSet, adaptive_select

log = logging.getLogger(__name__)

DEFAULT_FRACTION = 0.5


@dataclass(frozen=True)
class AgreementExample:
    sentence: str
    good_form: str
    bad_form: str
    n_attractors: int
    example_id: str

    def __post_init__(self):
        if self.good_form == self.bad_form:
            raise ArgumentError(f"{self.example_id}: good and bad forms are identical")
        if self.sentence.count(MASK_PLACEHOLDER) != 1:
            raise ArgumentError(f"{self.example_id}: sentence needs exactly one mask")
        if self.n_attractors < 0:
            raise ArgumentError(f"{self.example_id}: negative attractor count")


@dataclass(frozen=True)
class SkipRecord:
    line: int
    reason: str


def _example_from_row(row: dict, lineno: int) -> AgreementExample:
    if not isinstance(row, dict):
        raise ArgumentError("row is not an object")
    for key in ("sentence", "good", "bad", "n_attractors"):
        if key not in row:
            raise ArgumentError(f"missing field {key!r}")
    sentence = row["sentence"]
    mask_index = row.get("mask_index")
    if mask_index is not None:
        words = sentence.split()
        if not isinstance(mask_index, int) or not 0 <= mask_index < len(words):
            raise ArgumentError(f"mask_index {mask_index!r} outside sentence of {len(words)} words")
        words[mask_index] = MASK_PLACEHOLDER
        sentence = " ".join(words)
    n_att = row["n_attractors"]
    if not isinstance(n_att, int) or isinstance(n_att, bool):
        raise ArgumentError(f"n_attractors must be an integer, got {n_att!r}")
    return AgreementExample(sentence, str(row["good"]), str(row["bad"]), n_att,
                            str(row.get("example_id", lineno)))


def load_agreement_dataset(path: str | Path, handle: MaskedLMHandle | None = None
                           ) -> tuple[list[AgreementExample], list[SkipRecord]]:
    """Parse and validate examples.

    With a handle, examples whose good or bad form is not a single vocabulary
    token are skipped.  Malformed rows are skipped too; both kinds come back as
    :class:`SkipRecord` entries.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise LoadError(f"cannot read agreement data {path}: {exc}") from exc
    examples, skipped = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            ex = _example_from_row(json.loads(line), lineno)
        except json.JSONDecodeError as exc:
            skipped.append(SkipRecord(lineno, f"invalid JSON: {exc.msg}"))
            continue
        except (ArgumentError, TypeError, AttributeError) as exc:
            skipped.append(SkipRecord(lineno, str(exc)))
            continue
        if handle is not None:
            multi = [w for w in (ex.good_form, ex.bad_form) if len(handle.word_pieces(w)) != 1]
            if multi:
                skipped.append(SkipRecord(lineno, f"not single-token: {', '.join(multi)}"))
                continue
        examples.append(ex)
    if skipped:
        log.info("skipped %d of %d agreement rows", len(skipped), len(skipped) + len(examples))
    return examples, skipped


def convert_colorless_green(src: str | Path, dst: str | Path) -> int:
    """Convert the corpus's tab-separated file to the JSON Lines ingestion format.

    Needs a header with ``pattern, constr_id, sent_id, class, form, n_attr,
    len_prefix, sent``.  Rows come in pairs sharing ``(pattern, constr_id,
    sent_id)``: ``class == "correct"`` carries the good form, ``"wrong"`` the
    bad one.  ``len_prefix`` is the verb's word index.  Returns the number of
    examples written.
    """
    try:
        with open(src, encoding="utf-8", newline="") as f:
            rows = list(csv.DictReader(f, delimiter="\t"))
    except OSError as exc:
        raise LoadError(f"cannot read {src}: {exc}") from exc
    required = {"pattern", "constr_id", "sent_id", "class", "form", "n_attr", "len_prefix", "sent"}
    if rows and not required <= set(rows[0]):
        raise LoadError(f"{src}: missing columns {sorted(required - set(rows[0]))}")
    groups: dict[tuple, dict] = {}
    for row in rows:
        key = (row["pattern"], row["constr_id"], row["sent_id"])
        groups.setdefault(key, {})[row["class"]] = row
    written = 0
    with open(dst, "w", encoding="utf-8") as out:
        for key, pair in groups.items():
            if "correct" not in pair or "wrong" not in pair:
                continue
            good, bad = pair["correct"], pair["wrong"]
            record = {"example_id": "-".join(key), "sentence": good["sent"],
                      "mask_index": int(good["len_prefix"]), "good": good["form"],
                      "bad": bad["form"], "n_attractors": int(good["n_attr"])}
            out.write(json.dumps(record, ensure_ascii=False) + "\n")
            written += 1
    return written


@dataclass
class GrammarRecord:
    example_id: str
    n_attractors: int
    good_map: AttributionMap
    bad_map: AttributionMap


def attribute_pair(handle: MaskedLMHandle, example: AgreementExample,
                   config: AttributionConfig = AttributionConfig()) -> GrammarRecord:
    """Attribute one tokenized prompt twice: toward the good form and the bad form."""
    good_prompt = handle.tokenize_prompt(example.sentence, example.good_form)
    bad_prompt = handle.tokenize_prompt(example.sentence, example.bad_form)
    # the sentence is identical, so only the target differs
    bad_prompt = replace(good_prompt, target_id=bad_prompt.target_id, target=example.bad_form)
    good_map = attribute(handle, good_prompt, config=config, prompt_id=f"{example.example_id}/good")
    bad_map = attribute(handle, bad_prompt, config=config, prompt_id=f"{example.example_id}/bad")
    return GrammarRecord(example.example_id, example.n_attractors, good_map, bad_map)


def attribute_dataset(handle: MaskedLMHandle, examples: Iterable[AgreementExample],
                      config: AttributionConfig = AttributionConfig()) -> list[GrammarRecord]:
    records = []
    for ex in examples:
        try:
            records.append(attribute_pair(handle, ex, config))
        except KnowledgeNeuronsError as exc:
            log.warning("example %s skipped: %s", ex.example_id, exc)
    return records


def stratify_stats(records: Sequence[GrammarRecord], strata: Iterable[int] | None = None
                   ) -> dict[int, tuple[LayerStats, LayerStats]]:
    """``{n_attractors: (good_stats, bad_stats)}`` over the requested strata."""
    if not records:
        raise ArgumentError("no grammar records to stratify")
    groups: dict[int, list[GrammarRecord]] = defaultdict(list)
    for r in records:
        groups[r.n_attractors].append(r)
    wanted = sorted(groups) if strata is None else list(strata)
    unknown = [s for s in wanted if s not in groups]
    if unknown:
        raise ArgumentError(f"no records with attractor counts {unknown}; have {sorted(groups)}")
    return {s: (layer_stats([r.good_map for r in groups[s]]),
                layer_stats([r.bad_map for r in groups[s]])) for s in wanted}


@dataclass
class DecidedUndecidedCounts:
    common: np.ndarray
    distinct: np.ndarray


def common_distinct(good_set: NeuronSet, bad_set: NeuronSet, layer_count: int
                    ) -> DecidedUndecidedCounts:
    """Per-layer counts of undecided (in both) and decided (in exactly one) neurons."""
    common = np.zeros(layer_count, dtype=np.int64)
    distinct = np.zeros(layer_count, dtype=np.int64)
    for ref in good_set.members & bad_set.members:
        common[ref.layer] += 1
    for ref in good_set.members ^ bad_set.members:
        distinct[ref.layer] += 1
    return DecidedUndecidedCounts(common, distinct)


def _adaptive_or_empty(m: AttributionMap, fraction: float) -> NeuronSet:
    try:
        return adaptive_select(m, fraction)
    except DegenerateMapError:
        return NeuronSet()


def record_counts(record: GrammarRecord, fraction: float = DEFAULT_FRACTION
                  ) -> DecidedUndecidedCounts:
    layer_count = record.good_map.shape[0]
    return common_distinct(_adaptive_or_empty(record.good_map, fraction),
                           _adaptive_or_empty(record.bad_map, fraction), layer_count)


def counts_by_stratum(records: Sequence[GrammarRecord], fraction: float = DEFAULT_FRACTION
                      ) -> dict[int, dict[str, list[float]]]:
    """Mean common/distinct counts per layer for each attractor count, with 95% half-widths."""
    groups: dict[int, list[DecidedUndecidedCounts]] = defaultdict(list)
    for r in records:
        groups[r.n_attractors].append(record_counts(r, fraction))
    out = {}
    for s in sorted(groups):
        entry = {"n": len(groups[s])}
        for name in ("common", "distinct"):
            arr = np.stack([getattr(c, name) for c in groups[s]]).astype(np.float64)
            half = (CI_Z * arr.std(axis=0, ddof=1) / np.sqrt(len(arr)) if len(arr) > 1
                    else np.zeros(arr.shape[1]))
            entry[name] = [float(v) for v in arr.mean(axis=0)]
            entry[f"{name}_ci"] = [float(v) for v in half]
        out[s] = entry
    return out
