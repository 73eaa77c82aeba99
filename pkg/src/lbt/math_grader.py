"""Final-answer extraction, normalization, and equivalence for math problems.

The normalization rule list below is the grading contract: deterministic,
auditable, and frozen by a regression corpus. There is deliberately no
symbolic algebra; two answers are equal iff their canonical strings match or
both parse numerically and agree within relative tolerance 1e-6.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Union

FINAL_ANSWER_MARKER = "[[Final Answer]]:"
FENCE = "'''"

NUMERIC_REL_TOL = 1e-6

# Lone textual units dropped from the tail of an answer ("42 cm" -> "42").
UNITS = frozenset(
    {
        "degrees",
        "degree",
        "cm",
        "mm",
        "m",
        "km",
        "meters",
        "inches",
        "inch",
        "feet",
        "ft",
        "units",
        "cents",
        "dollars",
        "hours",
        "minutes",
        "seconds",
        "percent",
        "points",
        "mph",
    }
)
_UNIT_PREFIXES = ("square", "cubic")


class ExtractionMiss(ValueError):
    """Completion carries no final-answer block."""


Numeric = Union[Fraction, float]


@dataclass(frozen=True)
class ExtractedAnswer:
    raw: str
    canonical: str
    numeric_value: Optional[Numeric] = None


def extract_final_answer(completion_text: str) -> ExtractedAnswer:
    """Content of the last final-answer block; never guesses when absent.

    Models sometimes restate their answer, so the last block wins. The block
    ends at the closing ''' fence when present, otherwise at end of text.
    """
    idx = completion_text.rfind(FINAL_ANSWER_MARKER)
    if idx < 0:
        raise ExtractionMiss("no final-answer marker in completion")
    block = completion_text[idx + len(FINAL_ANSWER_MARKER):]
    fence = block.find(FENCE)
    if fence >= 0:
        block = block[:fence]
    raw = block.strip()
    if not raw:
        raise ExtractionMiss("final-answer block is empty")
    return make_answer(raw)


def try_extract_final_answer(completion_text: str) -> Optional[ExtractedAnswer]:
    try:
        return extract_final_answer(completion_text)
    except ExtractionMiss:
        return None


def make_answer(raw: str) -> ExtractedAnswer:
    canonical = normalize_answer(raw)
    return ExtractedAnswer(raw=raw, canonical=canonical, numeric_value=_parse_numeric(canonical))


def _strip_edges(s: str) -> str:
    s = s.strip()
    while s.endswith("."):
        s = s[:-1].rstrip()
    return s


def _unwrap_boxed(s: str) -> str:
    start = s.rfind("\\boxed{")
    if start < 0:
        return s
    i = start + len("\\boxed{")
    depth = 1
    content = []
    while i < len(s):
        ch = s[i]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return "".join(content)
        content.append(ch)
        i += 1
    return s  # unbalanced braces: leave untouched


_FRAC_INT_RE = re.compile(r"^(-?)\\frac\{(-?\d+)\}\{(-?\d+)\}$")


def _strip_units(s: str) -> str:
    words = s.split(" ")
    while len(words) > 1:
        last = words[-1].lower().rstrip(".")
        if last not in UNITS:
            break
        words.pop()
        if len(words) > 1 and words[-1].lower() in _UNIT_PREFIXES:
            words.pop()
    return " ".join(words)


def normalize_answer(raw: str) -> str:
    """Apply the normalization rules, in order. Total and idempotent."""
    s = _strip_edges(raw)
    s = s.replace("\\$", "").replace("$", "")
    s = _unwrap_boxed(s)
    s = s.replace("\\left", "").replace("\\right", "")
    s = s.replace("\\dfrac", "\\frac").replace("\\tfrac", "\\frac")
    s = re.sub(r"\s+", " ", s).strip()
    m = _FRAC_INT_RE.match(s)
    if m:
        sign, num, den = m.groups()
        s = f"{sign}{num}/{den}"
    s = _strip_units(s)
    return _strip_edges(s)


def _parse_numeric(canonical: str) -> Optional[Numeric]:
    s = canonical.replace(" ", "")
    try:
        return Fraction(s)
    except (ValueError, ZeroDivisionError):
        pass
    try:
        return float(s)
    except (ValueError, OverflowError):
        return None


def answers_equal(a: ExtractedAnswer, b: ExtractedAnswer) -> bool:
    """Canonical-string equality, with a numeric fallback at rel tol 1e-6.

    The fallback widens equality only; a canonical match is always equal.
    """
    if a.canonical == b.canonical:
        return True
    if a.numeric_value is not None and b.numeric_value is not None:
        if isinstance(a.numeric_value, Fraction) and isinstance(b.numeric_value, Fraction):
            if a.numeric_value == b.numeric_value:
                return True
        return math.isclose(
            float(a.numeric_value), float(b.numeric_value), rel_tol=NUMERIC_REL_TOL, abs_tol=0.0
        )
    return False


REASON_MATCH = "match"
REASON_MISMATCH = "mismatch"
REASON_NO_ANSWER = "no_answer"


@dataclass(frozen=True)
class GradeResult:
    score: int  # 0 or 1
    reason: str


def grade_exam(ea: Optional[ExtractedAnswer], gt: str) -> GradeResult:
    """0/1 exam score against a ground-truth answer string.

    An extraction miss (ea is None) grades 0 but keeps a distinct reason so
    parsing failures are separable from wrong math in run logs.
    """
    if not gt:
        raise ValueError("ground truth must be non-empty")
    if ea is None:
        return GradeResult(score=0, reason=REASON_NO_ANSWER)
    if answers_equal(ea, make_answer(gt)):
        return GradeResult(score=1, reason=REASON_MATCH)
    return GradeResult(score=0, reason=REASON_MISMATCH)
