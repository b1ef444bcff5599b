"""Extraction of boxes and answers from free-form model output.

Box extraction is two-tier: a structured pass that hunts for the first
well-formed JSON value binding "bbox_2d" to a four-number array, then a
regex fallback for a bare bracketed four-number list. The structured tier
wins even when a bare list appears earlier in the text. Numbers are taken
at face value in the caller-declared coordinate mode; range checking and
sanitization happen downstream, never here.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass

from .geometry import BBox2D, CoordinateMode

PARSE_FAILED = "parse_failed"

_NUM = r"[+-]?(?:\d+(?:\.\d+)?|\.\d+)"
_LIST_RE = re.compile(
    r"\[\s*(" + _NUM + r")\s*,\s*(" + _NUM + r")\s*,\s*(" + _NUM + r")\s*,\s*(" + _NUM + r")\s*\]"
)
_DECODER = json.JSONDecoder()
_ARTICLES = ("a", "an", "the")
_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


@dataclass(frozen=True)
class ParseOutcome:
    """Either a parsed box or a failure reason, plus the raw text it came from."""

    result: BBox2D | None
    failure_reason: str | None
    raw_text: str

    def __post_init__(self) -> None:
        if (self.result is None) == (self.failure_reason is None):
            raise ValueError("exactly one of result and failure_reason must be set")

    @property
    def ok(self) -> bool:
        return self.result is not None


def _is_number(v: object) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _walk_for_key(value: object, key: str, length: int | None) -> list[float] | None:
    """Depth-first search of a decoded JSON value for `key` bound to a number array."""
    stack = [value]
    while stack:
        node = stack.pop(0)
        if isinstance(node, dict):
            v = node.get(key)
            if (
                isinstance(v, list)
                and (length is None or len(v) == length)
                and v
                and all(_is_number(x) for x in v)
            ):
                return [float(x) for x in v]
            stack.extend(node.values())
        elif isinstance(node, list):
            stack.extend(node)
    return None


def first_json_number_array(text: str, key: str, length: int | None = None) -> list[float] | None:
    """First number array bound to `key` inside any well-formed JSON value in `text`."""
    n = len(text)
    i = 0
    while i < n:
        ch = text[i]
        if ch != "{" and ch != "[":
            i += 1
            continue
        try:
            value, end = _DECODER.raw_decode(text, i)
        except (ValueError, RecursionError):
            i += 1
            continue
        hit = _walk_for_key(value, key, length)
        if hit is not None:
            return hit
        i = end if end > i else i + 1
    return None


def extract_bbox(text: str, declared_mode: CoordinateMode) -> ParseOutcome:
    """Totalize arbitrary text into a ParseOutcome; never raises."""
    raw = text if isinstance(text, str) else str(text)
    values: list[float] | None = None
    try:
        values = first_json_number_array(raw, "bbox_2d", 4)
        if values is None:
            m = _LIST_RE.search(raw)
            if m is not None:
                values = [float(g) for g in m.groups()]
    except Exception:
        values = None
    if values is None:
        return ParseOutcome(None, PARSE_FAILED, raw)
    x1, y1, x2, y2 = values
    return ParseOutcome(BBox2D(x1, y1, x2, y2, declared_mode), None, raw)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace, drop leading articles."""
    tokens = text.lower().translate(_PUNCT_TABLE).split()
    while tokens and tokens[0] in _ARTICLES:
        tokens.pop(0)
    return " ".join(tokens)
