"""Iterative refinement of labeled in-context exemplars from student failures.

Each iteration: the current exemplar set is used to classify a sampled batch
of statements with one or more students; mismatches become failure cases; the
teacher reflects on them and proposes candidate exemplar sets; candidates
(plus the incumbent, always) are scored as the teacher's own shots on a fixed
training evaluation set and the best is kept. Incumbent inclusion makes the
kept training F1 non-decreasing across iterations.
"""

from __future__ import annotations

import json
import random
import re
import statistics
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import prompts
from .gateway import Gateway, SamplingParams, user_request

LABEL_POSITIVE = "positive"
LABEL_NEGATIVE = "negative"

_LABEL_WORD = {LABEL_POSITIVE: "Yes", LABEL_NEGATIVE: "No"}
_WORD_LABEL = {"yes": LABEL_POSITIVE, "no": LABEL_NEGATIVE}

_LABEL_REPLY_RE = re.compile(r"^\W*(yes|no)\W*$", re.IGNORECASE | re.DOTALL)
_EXEMPLAR_LINE_RE = re.compile(
    r"Example\s+\d+\s*:\s*(.+?)\s*\[\s*(Yes|No)\s*\]\s*$", re.IGNORECASE
)


class InitializationError(RuntimeError):
    """Initial exemplar generation could not be parsed."""


@dataclass(frozen=True)
class Exemplar:
    text: str
    label: str

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("exemplar text must be non-empty")
        if self.label not in (LABEL_POSITIVE, LABEL_NEGATIVE):
            raise ValueError(f"unknown label {self.label!r}")


@dataclass(frozen=True)
class ExemplarSet:
    exemplars: tuple[Exemplar, ...]
    iteration: int = 0
    train_f1: Optional[float] = None

    @property
    def k(self) -> int:
        return len(self.exemplars)

    def with_score(self, iteration: int, train_f1: float) -> "ExemplarSet":
        return ExemplarSet(self.exemplars, iteration=iteration, train_f1=train_f1)

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "train_f1": self.train_f1,
            "exemplars": [{"text": e.text, "label": e.label} for e in self.exemplars],
        }


@dataclass
class FailureCase:
    ep: str
    predicted: str
    gold: str
    students: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.predicted == self.gold:
            raise ValueError("a failure case must disagree with its gold label")


def format_exemplars(exemplar_set: ExemplarSet) -> str:
    lines = [
        f"Example {i}: {e.text} [{_LABEL_WORD[e.label]}]"
        for i, e in enumerate(exemplar_set.exemplars, start=1)
    ]
    return "\n".join(lines)


def build_classify_prompt(question: str, exemplar_set: ExemplarSet, statement: str) -> str:
    return (
        f"{question}\n"
        "\n"
        f"{format_exemplars(exemplar_set)}\n"
        "\n"
        f"Text: {statement}\n"
        "\n"
        "Answer with Yes or No."
    )


def parse_label(text: str) -> Optional[str]:
    """Yes/No with surrounding punctuation tolerated; anything else is None."""
    m = _LABEL_REPLY_RE.match(text)
    if not m:
        return None
    return _WORD_LABEL[m.group(1).lower()]


def classify(
    gateway: Gateway,
    backend: tuple[str, str],
    question: str,
    exemplar_set: ExemplarSet,
    statement: str,
) -> tuple[Optional[str], bool]:
    """Returns (label or None, flagged). Unparseable replies count as wrong."""
    backend_id, model_name = backend
    prompt = build_classify_prompt(question, exemplar_set, statement)
    request = user_request(backend_id, model_name, prompt, SamplingParams(temperature=0.0), 1)
    completion = gateway.complete(request)[0]
    label = parse_label(completion.text)
    return label, label is None


def _flip(label: str) -> str:
    return LABEL_NEGATIVE if label == LABEL_POSITIVE else LABEL_POSITIVE


def collect_failures(
    gateway: Gateway,
    question: str,
    exemplar_set: ExemplarSet,
    students: Sequence[tuple[str, str]],
    eps: Sequence[str],
    golds: Sequence[str],
) -> list[FailureCase]:
    """One classification pass per (student, statement); mismatches come back
    deduplicated by (statement, predicted) with student provenance retained.

    An unparseable reply counts as predicting the wrong label.
    """
    if len(eps) != len(golds):
        raise ValueError("eps and golds must have equal length")
    failures: dict[tuple[str, str], FailureCase] = {}
    for student in students:
        for ep, gold in zip(eps, golds):
            label, flagged = classify(gateway, student, question, exemplar_set, ep)
            predicted = _flip(gold) if flagged or label is None else label
            if predicted == gold:
                continue
            key = (ep, predicted)
            if key in failures:
                failures[key].students.append(student[0])
            else:
                failures[key] = FailureCase(
                    ep=ep, predicted=predicted, gold=gold, students=[student[0]]
                )
    return list(failures.values())


def format_failures(failures: Sequence[FailureCase]) -> str:
    blocks = []
    for i, failure in enumerate(failures, start=1):
        blocks.append(
            f"Failure Case {i}:\n"
            f"Input: {failure.ep}\n"
            f"Label: {_LABEL_WORD[failure.gold]}\n"
            f"Prediction: {_LABEL_WORD[failure.predicted]}"
        )
    return "\n\n".join(blocks)


_NUMBERED_RE = re.compile(r"^\s*\d+[.)]\s+", re.MULTILINE)


def split_reasons(text: str, num_feedbacks: int) -> list[str]:
    """Best-effort split of an enumerated reply; unsplit text is used whole."""
    matches = list(_NUMBERED_RE.finditer(text))
    if len(matches) != num_feedbacks:
        return [text.strip()]
    parts = []
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        parts.append(text[m.end():end].strip())
    return parts


def reflect(
    gateway: Gateway,
    teacher: tuple[str, str],
    question: str,
    exemplar_set: ExemplarSet,
    failures: Sequence[FailureCase],
    num_feedbacks: int,
    sampling: SamplingParams,
) -> list[str]:
    if not failures:
        raise ValueError("reflect requires at least one failure")
    backend_id, model_name = teacher
    prompt = prompts.render(
        "m3_reflect",
        {
            "k": str(exemplar_set.k),
            "task": question,
            "failure_cases": format_failures(failures),
            "num_feedbacks": str(num_feedbacks),
        },
    )
    request = user_request(backend_id, model_name, prompt, sampling, 1)
    completion = gateway.complete(request)[0]
    return split_reasons(completion.text, num_feedbacks)


def parse_exemplar_set(text: str, k: int) -> Optional[ExemplarSet]:
    """Parse bracketed example lines; anything but exactly k lines is a miss."""
    exemplars = []
    for line in text.splitlines():
        m = _EXEMPLAR_LINE_RE.search(line)
        if m:
            exemplars.append(Exemplar(text=m.group(1), label=_WORD_LABEL[m.group(2).lower()]))
    if len(exemplars) != k:
        return None
    return ExemplarSet(exemplars=tuple(exemplars))


def propose(
    gateway: Gateway,
    teacher: tuple[str, str],
    question: str,
    incumbent: ExemplarSet,
    failures: Sequence[FailureCase],
    reflections: Sequence[str],
    n_candidates: int,
    sampling: SamplingParams,
) -> tuple[list[ExemplarSet], int]:
    """N improve completions parsed into exemplar sets, incumbent appended last.

    Returns (candidates, discarded_count); candidates always end with the
    incumbent so keep-best can never regress.
    """
    if n_candidates < 1:
        raise ValueError("n_candidates must be >= 1")
    backend_id, model_name = teacher
    prompt = prompts.render(
        "m3_improve",
        {
            "k": str(incumbent.k),
            "task": question,
            "failure_cases": format_failures(failures),
            "reflection": " ".join(reflections),
        },
    )
    request = user_request(backend_id, model_name, prompt, sampling, n_candidates)
    completions = gateway.complete(request)
    candidates: list[ExemplarSet] = []
    discarded = 0
    for completion in completions:
        parsed = parse_exemplar_set(completion.text, incumbent.k)
        if parsed is None:
            discarded += 1
            continue
        candidates.append(parsed)
    candidates.append(incumbent)
    return candidates, discarded


def f1(predictions: Sequence, golds: Sequence) -> float:
    """F1 of the positive class, 2*P*R/(P+R); defined 0 when P+R is 0.

    Evaluated in the algebraically reduced form 2*TP/(2*TP+FP+FN): one
    correctly-rounded division, so the result is exact with respect to the
    rational F1 value and never depends on intermediate rounding.
    """
    if len(predictions) != len(golds):
        raise ValueError("predictions and golds must have equal length")
    tp = fp = fn = 0
    for p, g in zip(predictions, golds):
        pos_p = (p == LABEL_POSITIVE or p.lower() == "yes") if type(p) is str else bool(p)
        pos_g = (g == LABEL_POSITIVE or g.lower() == "yes") if type(g) is str else bool(g)
        if pos_p and pos_g:
            tp += 1
        elif pos_p:
            fp += 1
        elif pos_g:
            fn += 1
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0



def generate_initial_set(
    gateway: Gateway,
    teacher: tuple[str, str],
    question: str,
    k: int,
    sampling: SamplingParams,
) -> ExemplarSet:
    backend_id, model_name = teacher
    prompt = prompts.render(
        "m3_init", {"k": str(k), "task": question, "exemplars": ""}
    )
    request = user_request(backend_id, model_name, prompt, sampling, 1)
    completion = gateway.complete(request)[0]
    parsed = parse_exemplar_set(completion.text, k)
    if parsed is None:
        raise InitializationError(f"initial completion did not parse into {k} exemplars")
    return parsed


def evaluate_set(
    gateway: Gateway,
    backend: tuple[str, str],
    question: str,
    exemplar_set: ExemplarSet,
    statements: Sequence[str],
    golds: Sequence[str],
) -> float:
    """F1 of one backend using the exemplar set as its shots.

    Unparseable replies are scored as the wrong label.
    """
    predictions = []
    for statement, gold in zip(statements, golds):
        label, flagged = classify(gateway, backend, question, exemplar_set, statement)
        predictions.append(_flip(gold) if flagged or label is None else label)
    return f1(predictions, golds)


@dataclass
class IterationRecord:
    iteration: int
    best: ExemplarSet
    train_f1: float
    eval_f1: float
    candidate_f1s: list[float]
    n_failures: int
    discarded_candidates: int
    reflections: list[str]

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "train_f1": self.train_f1,
            "eval_f1": self.eval_f1,
            "candidate_f1s": self.candidate_f1s,
            "n_failures": self.n_failures,
            "discarded_candidates": self.discarded_candidates,
            "reflections": self.reflections,
            "best": self.best.to_json(),
        }


@dataclass
class OptHistory:
    seed: int
    students: list[str]
    iterations: list[IterationRecord] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "students": self.students,
            "iterations": [it.to_json() for it in self.iterations],
        }


@dataclass
class OptConfig:
    k: int = 8
    n_candidates: int = 4
    iterations: int = 5
    num_feedbacks: int = 1
    failure_sample_size: int = 64
    max_failures_in_prompt: int = 8
    train_eval_size: Optional[int] = None  # None = full training split
    sampling: SamplingParams = SamplingParams(temperature=0.7)


def optimize(
    gateway: Gateway,
    question: str,
    train: Sequence[tuple[str, str]],
    eval_items: Sequence[tuple[str, str]],
    teacher: tuple[str, str],
    students: Sequence[tuple[str, str]],
    cfg: OptConfig,
    seed: int,
) -> OptHistory:
    """Run the full iterative loop; deterministic given scripted backends.

    train/eval_items are (statement, gold_label) pairs. Failure collection
    draws a fresh seeded sample each iteration; keep-best evaluation uses one
    fixed train evaluation set per run so kept F1 can only improve.
    """
    rng = random.Random(seed)
    eval_rng = random.Random(seed * 1_000_003 + 1)

    if cfg.train_eval_size is not None and cfg.train_eval_size < len(train):
        train_eval = eval_rng.sample(list(train), cfg.train_eval_size)
    else:
        train_eval = list(train)
    train_eval_statements = [s for s, _ in train_eval]
    train_eval_golds = [g for _, g in train_eval]
    eval_statements = [s for s, _ in eval_items]
    eval_golds = [g for _, g in eval_items]

    incumbent = generate_initial_set(gateway, teacher, question, cfg.k, cfg.sampling)
    history = OptHistory(seed=seed, students=[s[0] for s in students])

    for t in range(1, cfg.iterations + 1):
        sample_size = min(cfg.failure_sample_size, len(train))
        batch = rng.sample(list(train), sample_size)
        failures = collect_failures(
            gateway,
            question,
            incumbent,
            students,
            [s for s, _ in batch],
            [g for _, g in batch],
        )
        reflections: list[str] = []
        if failures:
            recent = failures[-cfg.max_failures_in_prompt:]
            reflections = reflect(
                gateway, teacher, question, incumbent, recent, cfg.num_feedbacks, cfg.sampling
            )
            candidates, discarded = propose(
                gateway,
                teacher,
                question,
                incumbent,
                recent,
                reflections,
                cfg.n_candidates,
                cfg.sampling,
            )
        else:
            candidates, discarded = [incumbent], 0

        candidate_f1s = [
            evaluate_set(
                gateway, teacher, question, c, train_eval_statements, train_eval_golds
            )
            for c in candidates
        ]
        best_idx = min(range(len(candidates)), key=lambda i: (-candidate_f1s[i], i))
        best = candidates[best_idx].with_score(iteration=t, train_f1=candidate_f1s[best_idx])
        eval_f1 = evaluate_set(
            gateway, teacher, question, best, eval_statements, eval_golds
        )
        history.iterations.append(
            IterationRecord(
                iteration=t,
                best=best,
                train_f1=candidate_f1s[best_idx],
                eval_f1=eval_f1,
                candidate_f1s=candidate_f1s,
                n_failures=len(failures),
                discarded_candidates=discarded,
                reflections=reflections,
            )
        )
        incumbent = best

    return history


def summarize_runs(histories: Sequence[OptHistory]) -> list[dict]:
    """Per-iteration mean and standard error of train/eval F1 across runs."""
    if not histories:
        return []
    n_iterations = len(histories[0].iterations)
    rows = []
    for t in range(n_iterations):
        train_scores = [h.iterations[t].train_f1 for h in histories]
        eval_scores = [h.iterations[t].eval_f1 for h in histories]
        rows.append(
            {
                "iteration": t + 1,
                "train_f1_mean": statistics.fmean(train_scores),
                "train_f1_se": _standard_error(train_scores),
                "eval_f1_mean": statistics.fmean(eval_scores),
                "eval_f1_se": _standard_error(eval_scores),
            }
        )
    return rows


def _standard_error(values: Sequence[float]) -> float:
    if len(values) < 2:
        return 0.0
    return statistics.stdev(values) / len(values) ** 0.5


def save_history(history: OptHistory, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(history.to_json(), f, sort_keys=True, indent=2)
        f.write("\n")
