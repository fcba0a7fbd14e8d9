"""Facts, their masked prompt sets, and the bundled fixture sets.

Prompt files are JSON Lines, one prompt per line::

    {"set_id": "...", "language": "en", "subject": "France", "relation": "capital",
     "object": "Paris", "prompt_text": "The capital of france is [MASK]"}

Rows sharing a ``set_id`` form one :class:`PromptSet` and must agree on the
fact fields.  ``[MASK]`` is written literally; handles substitute their own
mask token at tokenization time.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import KnowledgeNeuronsError, LoadError, MultiTokenTargetError
from .model import MASK_PLACEHOLDER, MaskedLMHandle

log = logging.getLogger(__name__)

FIELDS = ("set_id", "language", "subject", "relation", "object", "prompt_text")
BUNDLED_FILE = "prompts.jsonl"


@dataclass(frozen=True)
class Fact:
    subject: str
    relation: str
    object: str
    language: str


@dataclass
class PromptSet:
    set_id: str
    fact: Fact
    prompts: list[str] = field(default_factory=list)

    def triples(self) -> list[tuple[str, str, str]]:
        """``(prompt_id, text, target)`` for each prompt, ids ``<set_id>/<k>`` from 1."""
        return [(f"{self.set_id}/{k}", p, self.fact.object) for k, p in enumerate(self.prompts, 1)]

    def __len__(self) -> int:
        return len(self.prompts)


@dataclass(frozen=True)
class Rejection:
    line: int
    reason: str


def _check_row(row) -> str | None:
    if not isinstance(row, dict):
        return "row is not an object"
    missing = [f for f in FIELDS if not isinstance(row.get(f), str) or not row[f].strip()]
    if missing:
        return f"missing or empty fields: {', '.join(missing)}"
    n = row["prompt_text"].count(MASK_PLACEHOLDER)
    if n == 0:
        return "no mask placeholder"
    if n > 1:
        return "multiple masks"
    return None


def parse_prompts(text: str) -> tuple[list[PromptSet], list[Rejection]]:
    sets: dict[str, PromptSet] = {}
    rejected = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            rejected.append(Rejection(lineno, f"invalid JSON: {exc.msg}"))
            continue
        reason = _check_row(row)
        if reason is None:
            fact = Fact(row["subject"], row["relation"], row["object"], row["language"])
            existing = sets.get(row["set_id"])
            if existing is not None and existing.fact != fact:
                reason = f"fact fields disagree with earlier rows of set {row['set_id']!r}"
        if reason is not None:
            rejected.append(Rejection(lineno, reason))
            continue
        sets.setdefault(row["set_id"], PromptSet(row["set_id"], fact)).prompts.append(
            row["prompt_text"])
    for r in rejected:
        log.warning("prompt file line %d rejected: %s", r.line, r.reason)
    return list(sets.values()), rejected


def load_prompts(path: str | Path) -> tuple[list[PromptSet], list[Rejection]]:
    """Load a prompt file; malformed rows come back as rejections, not exceptions."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise LoadError(f"cannot read prompt file {path}: {exc}") from exc
    return parse_prompts(text)


def dumps_prompts(sets: list[PromptSet]) -> str:
    lines = []
    for s in sets:
        for p in s.prompts:
            row = {"set_id": s.set_id, "language": s.fact.language, "subject": s.fact.subject,
                   "relation": s.fact.relation, "object": s.fact.object, "prompt_text": p}
            lines.append(json.dumps(row, ensure_ascii=False) + "\n")
    return "".join(lines)


def dump_prompts(sets: list[PromptSet], path: str | Path) -> None:
    Path(path).write_text(dumps_prompts(sets), encoding="utf-8")


def bundled_text() -> str:
    return resources.files("kneurons").joinpath("data", BUNDLED_FILE).read_text(encoding="utf-8")


def bundled_prompt_sets() -> dict[str, PromptSet]:
    sets, _ = parse_prompts(bundled_text())
    return {s.set_id: s for s in sets}


def get_prompt_set(name: str) -> PromptSet:
    """A bundled set by id, or ``path`` / ``path:set_id`` for a prompt file."""
    bundled = bundled_prompt_sets()
    if name in bundled:
        return bundled[name]
    path, set_id = name, ""
    if not Path(name).exists() and ":" in name:
        path, _, set_id = name.rpartition(":")
    sets, _ = load_prompts(path)
    if set_id:
        sets = [s for s in sets if s.set_id == set_id]
    if len(sets) != 1:
        raise LoadError(f"{name!r} does not name exactly one prompt set "
                        f"(bundled: {', '.join(sorted(bundled))})")
    return sets[0]


@dataclass
class ValidationReport:
    set_id: str
    failures: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def validate_prompt(handle: MaskedLMHandle, prompt_set: PromptSet) -> ValidationReport:
    """Check every prompt has one mask and the fact's object is a single token."""
    report = ValidationReport(prompt_set.set_id)
    for text in prompt_set.prompts:
        n = text.count(MASK_PLACEHOLDER)
        if n != 1:
            report.failures.append((text, "multiple masks" if n > 1 else "no mask placeholder"))
            continue
        try:
            handle.tokenize_prompt(text, prompt_set.fact.object)
        except MultiTokenTargetError as exc:
            report.failures.append((text, f"multi-token target: {exc}"))
        except KnowledgeNeuronsError as exc:
            report.failures.append((text, str(exc)))
    return report
