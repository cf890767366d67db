"""Output checks for enhanced prompts.

All checks return a :class:`ValidationReport` instead of raising, so a batch
run can keep going and record the diagnostic next to the sample.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable

_WS = re.compile(r"\s+")
_BOUNDARY = re.compile(r"[.!?][\"')\]]?\s+[\"'(\[]?[A-Z]")
_ABBREV = re.compile(r"\b(?:Dr|Mr|Mrs|Ms|Prof|St|Jr|Sr|Mt|vs|e\.g|i\.e)\.", re.IGNORECASE)


@dataclass(frozen=True)
class Issue:
    code: str
    message: str


@dataclass
class ValidationReport:
    issues: list[Issue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    @property
    def codes(self) -> list[str]:
        return [i.code for i in self.issues]

    def add(self, code: str, message: str) -> None:
        self.issues.append(Issue(code, message))

    def to_dict(self) -> dict:
        return {"ok": self.ok, "issues": [{"code": i.code, "message": i.message} for i in self.issues]}


def normalize_ws(text: str) -> str:
    return _WS.sub(" ", text).strip()


def is_single_sentence(text: str) -> bool:
    """No line breaks and at most one sentence terminator, which must come last.

    A text with no terminator at all is accepted so that a bare caption
    (``"The football quarterback"``) validates against itself.
    """
    if "\n" in text or "\r" in text:
        return False
    s = _ABBREV.sub(lambda m: m.group(0)[:-1].replace(".", ""), text.strip())
    if not s:
        return False
    body = s[:-1] if s[-1] in ".!?" else s
    if body.rstrip().endswith((".", "!", "?")):
        return False
    return _BOUNDARY.search(body) is None


def _load_json(name: str) -> dict:
    return json.loads(resources.files("idguide").joinpath(f"data/{name}").read_text())


@lru_cache(maxsize=None)
def default_attribute_blacklist() -> tuple[str, ...]:
    doc = _load_json("pe_blacklist.json")
    return tuple(t for key in ("clothing", "accessories", "background") for t in doc[key])


@lru_cache(maxsize=None)
def default_meta_blacklist() -> tuple[str, ...]:
    return tuple(_load_json("meta_blacklist.json")["phrases"])


def load_blacklist(path: str | Path) -> tuple[str, ...]:
    """Read a blacklist JSON file: either a flat list or a map of category -> terms."""
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, list):
        return tuple(doc)
    return tuple(t for k, v in doc.items() if k != "schema_version" for t in v)


def find_terms(text: str, terms: Iterable[str]) -> list[str]:
    low = text.lower()
    hits = []
    for term in terms:
        t = term.lower()
        if re.fullmatch(r"[\w\- ]+", t):
            if re.search(rf"(?<![\w-]){re.escape(t)}(?![\w-])", low):
                hits.append(term)
        elif t in low:
            hits.append(term)
    return hits


def validate_pe(
    prompt: str,
    enhanced: str,
    blacklist: Iterable[str] | None = None,
    strict: bool = False,
) -> ValidationReport:
    """Check an enhanced caption against its source caption.

    Passes iff the source caption appears contiguously, as whole words, in the enhanced one
    (whitespace-normalised unless ``strict``), the result is one sentence, and
    the inserted text names nothing on the clothing/accessory/background list.
    """
    report = ValidationReport()
    if not prompt.strip() or not enhanced.strip():
        report.add("empty", "prompt and enhanced prompt must be nonempty")
        return report
    src, out = (prompt.strip(), enhanced.strip()) if strict else (normalize_ws(prompt), normalize_ws(enhanced))
    # a trailing period on the source may legitimately move to the end of the clause
    core = src[:-1] if not strict and src.endswith(".") and src[:-1] in out else src
    # whole-word match, so "quarterback" is not preserved inside "quarterbacks"
    m = re.search(rf"(?<!\w){re.escape(core)}(?!\w)", out)
    if m is None:
        report.add("verbatim", "original prompt not preserved verbatim")
        added = out
    else:
        added = out[: m.start()] + " " + out[m.end() :]
    if not is_single_sentence(enhanced):
        report.add("single_sentence", "enhanced prompt is not a single sentence")
    terms = default_attribute_blacklist() if blacklist is None else tuple(blacklist)
    hits = find_terms(added, terms)
    if hits:
        report.add("non-facial attribute", f"inserted text mentions non-facial attributes: {', '.join(hits)}")
    return report


def validate_ref_prompt(text: str, blacklist: Iterable[str] | None = None) -> ValidationReport:
    report = ValidationReport()
    if not text.strip():
        report.add("empty", "reference prompt is empty")
        return report
    if not is_single_sentence(text):
        report.add("single_sentence", "reference prompt is not a single sentence")
    terms = default_meta_blacklist() if blacklist is None else tuple(blacklist)
    hits = find_terms(text, terms)
    if hits:
        report.add("meta language", f"reference prompt contains meta language: {', '.join(hits)}")
    return report
