"""Teacher sampling, student exams, rationale scoring, and answer selection.

One teaching record is a sampled (problem, rationale, answer) triple. Its
score is the mean exam score of students taught with it in-context; per-answer
aggregation (MAX or SUM over records sharing an answer) then picks the final
answer. Self-consistency, greedy, and self-evaluation baselines run over the
same sampled records.

Score arithmetic uses exact rationals internally (means of 0/1 exam scores and
their sums), serialized as floats; selections therefore never depend on float
summation order.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence, Union

from . import math_grader, prompts
from .gateway import (
    GREEDY,
    ChatRequest,
    Gateway,
    GatewayError,
    SamplingParams,
    user_request,
)

MODE_MAX = "MAX"
MODE_SUM = "SUM"
KEY_ANSWER_EQUIVALENCE = "answer_equivalence"
KEY_PER_PAIR = "per_pair"


class PipelineError(RuntimeError):
    """A problem could not be processed at all (e.g. zero valid records)."""


class ConfigurationError(ValueError):
    """Operation invoked with an unsupported mode/key combination."""


class SelectionError(ValueError):
    """Selection requested over an empty score table."""


@dataclass
class TeachingRecord:
    tp_id: str
    sample_index: int
    tr: str
    ta: Union[math_grader.ExtractedAnswer, str, None]
    completion_text: str
    valid: bool = True
    invalid_reason: Optional[str] = None
    correctness: Optional[int] = None
    per_pair_lbt: Optional[Fraction] = None

    @property
    def ta_text(self) -> str:
        if isinstance(self.ta, math_grader.ExtractedAnswer):
            return self.ta.raw
        return self.ta or ""

    def to_json(self) -> dict:
        return {
            "tp_id": self.tp_id,
            "sample_index": self.sample_index,
            "tr": self.tr,
            "ta": self.ta_text,
            "valid": self.valid,
            "invalid_reason": self.invalid_reason,
            "correctness": self.correctness,
            "per_pair_lbt": None if self.per_pair_lbt is None else float(self.per_pair_lbt),
        }


@dataclass
class ExamRecord:
    tp_id: str
    sample_index: int
    ep_id: str
    repeat_index: int
    student_id: str
    er: str
    ea: Optional[math_grader.ExtractedAnswer]
    score: int
    reason: str

    def sort_key(self) -> tuple:
        return (self.sample_index, self.ep_id, self.repeat_index, self.student_id)

    def to_json(self) -> dict:
        return {
            "tp_id": self.tp_id,
            "sample_index": self.sample_index,
            "ep_id": self.ep_id,
            "repeat_index": self.repeat_index,
            "student_id": self.student_id,
            "er": self.er,
            "ea": None if self.ea is None else self.ea.raw,
            "score": self.score,
            "reason": self.reason,
        }


@dataclass
class ScoreTable:
    mode: str
    key_kind: str
    entries: dict[str, Fraction] = field(default_factory=dict)
    first_index: dict[str, int] = field(default_factory=dict)
    representative: dict[str, str] = field(default_factory=dict)

    def as_json(self) -> dict:
        return {key: float(score) for key, score in sorted(self.entries.items())}


@dataclass(frozen=True)
class ExamProblem:
    ep_id: str
    statement: str
    gt: str


def split_completion_math(text: str) -> tuple[str, math_grader.ExtractedAnswer]:
    """Split a teacher completion into rationale and extracted answer."""
    ta = math_grader.extract_final_answer(text)
    idx = text.rfind(math_grader.FINAL_ANSWER_MARKER)
    tr = text[:idx].rstrip().rstrip("'").rstrip()
    return tr, ta


def sample_teaching(
    gateway: Gateway,
    backend_id: str,
    model_name: str,
    tp_id: str,
    tp_statement: str,
    n: int,
    params: SamplingParams,
    task: str = "math",
    gt: Optional[str] = None,
) -> list[TeachingRecord]:
    """Sample n teaching records from the teacher backend.

    Extraction failures yield records flagged invalid; they are excluded from
    aggregation downstream but kept for logs. All-invalid is a pipeline error.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    request = build_teacher_request(backend_id, model_name, tp_statement, params, n, task)
    completions = gateway.complete(request)
    records: list[TeachingRecord] = []
    for completion in completions:
        record = TeachingRecord(
            tp_id=tp_id,
            sample_index=completion.sample_index,
            tr="",
            ta=None,
            completion_text=completion.text,
        )
        try:
            if task == "math":
                record.tr, record.ta = split_completion_math(completion.text)
                if gt is not None:
                    record.correctness = math_grader.grade_exam(record.ta, gt).score
            else:
                from . import code_exam

                record.tr, record.ta = code_exam.split_completion_code(completion.text)
        except (math_grader.ExtractionMiss, ValueError) as e:
            record.valid = False
            record.invalid_reason = str(e)
        records.append(record)
    if not any(r.valid for r in records):
        raise PipelineError(f"all {n} teaching records for {tp_id} failed extraction")
    return records


def build_teacher_request(
    backend_id: str,
    model_name: str,
    tp_statement: str,
    params: SamplingParams,
    n_samples: int,
    task: str = "math",
) -> ChatRequest:
    if task == "math":
        prompt = prompts.render(
            "teacher_math", {"shots": prompts.joined_shots("math"), "tp": tp_statement}
        )
    else:
        prompt = prompts.render("teacher_code", {"tp": tp_statement})
    return user_request(backend_id, model_name, prompt, params, n_samples)


def build_student_request(
    backend_id: str,
    model_name: str,
    tp_statement: str,
    record: TeachingRecord,
    ep_statement: str,
    params: SamplingParams,
    n_samples: int,
) -> ChatRequest:
    prompt = prompts.render(
        "student_math",
        {
            "shots": prompts.joined_shots("math"),
            "tp": tp_statement,
            "tr": record.tr,
            "ta": record.ta_text,
            "ep": ep_statement,
        },
    )
    return user_request(backend_id, model_name, prompt, params, n_samples)


def run_exams(
    gateway: Gateway,
    record: TeachingRecord,
    tp_statement: str,
    eps: Sequence[ExamProblem],
    students: Sequence[tuple[str, str]],
    repeats: int,
    params: SamplingParams,
) -> list[ExamRecord]:
    """Exam one teaching record on every (student, EP, repeat) combination.

    Produces |eps| * repeats * |students| records; a backend failure scores
    the affected exams 0 with a distinct reason and the run continues.
    """
    if not eps:
        raise ValueError("eps must be non-empty")
    exams: list[ExamRecord] = []
    for student_id, student_model in students:
        for ep in eps:
            request = build_student_request(
                student_id, student_model, tp_statement, record, ep.statement, params, repeats
            )
            try:
                completions = gateway.complete(request)
            except GatewayError:
                for repeat_index in range(repeats):
                    exams.append(
                        ExamRecord(
                            tp_id=record.tp_id,
                            sample_index=record.sample_index,
                            ep_id=ep.ep_id,
                            repeat_index=repeat_index,
                            student_id=student_id,
                            er="",
                            ea=None,
                            score=0,
                            reason="backend_error",
                        )
                    )
                continue
            for completion in completions:
                ea = math_grader.try_extract_final_answer(completion.text)
                grade = math_grader.grade_exam(ea, ep.gt)
                exams.append(
                    ExamRecord(
                        tp_id=record.tp_id,
                        sample_index=record.sample_index,
                        ep_id=ep.ep_id,
                        repeat_index=completion.sample_index,
                        student_id=student_id,
                        er=completion.text,
                        ea=ea,
                        score=grade.score,
                        reason=grade.reason,
                    )
                )
    exams.sort(key=ExamRecord.sort_key)
    return exams


def per_pair_lbt_score(exams: Sequence[ExamRecord]) -> Fraction:
    """Arithmetic mean of exam scores, kept exact."""
    if not exams:
        raise ValueError("at least one exam record required")
    return Fraction(sum(e.score for e in exams), len(exams))


def _equivalence_groups(records: Sequence[TeachingRecord]) -> list[list[TeachingRecord]]:
    """Group valid records by answer equivalence (transitive closure).

    Numeric-tolerance equality is not transitive in general, so groups are
    the connected components of the pairwise-equal graph.
    """
    valid = [r for r in records if r.valid]
    parent = list(range(len(valid)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(valid)):
        for j in range(i + 1, len(valid)):
            a, b = valid[i].ta, valid[j].ta
            if isinstance(a, math_grader.ExtractedAnswer) and isinstance(
                b, math_grader.ExtractedAnswer
            ):
                equal = math_grader.answers_equal(a, b)
            else:
                equal = valid[i].ta_text == valid[j].ta_text
            if equal:
                parent[find(i)] = find(j)
    groups: dict[int, list[TeachingRecord]] = {}
    for i, record in enumerate(valid):
        groups.setdefault(find(i), []).append(record)
    ordered = sorted(groups.values(), key=lambda g: min(r.sample_index for r in g))
    for group in ordered:
        group.sort(key=lambda r: r.sample_index)
    return ordered


def _group_key(group: Sequence[TeachingRecord]) -> str:
    lead = group[0]
    if isinstance(lead.ta, math_grader.ExtractedAnswer):
        return lead.ta.canonical
    return lead.ta_text


def aggregate(
    records: Sequence[TeachingRecord],
    mode: str,
    key_kind: str = KEY_ANSWER_EQUIVALENCE,
) -> ScoreTable:
    """Fold per-record scores into a per-answer table.

    MAX keeps the best record per answer; SUM accumulates them, which needs
    an answer-equivalence oracle and is therefore rejected for per-pair keys.
    """
    if mode not in (MODE_MAX, MODE_SUM):
        raise ConfigurationError(f"unknown aggregation mode {mode!r}")
    if mode == MODE_SUM and key_kind == KEY_PER_PAIR:
        raise ConfigurationError("SUM aggregation requires answer-equivalence keys")
    table = ScoreTable(mode=mode, key_kind=key_kind)
    if key_kind == KEY_PER_PAIR:
        groups = [[r] for r in records if r.valid]
        groups.sort(key=lambda g: g[0].sample_index)
    else:
        groups = _equivalence_groups(records)
    for group in groups:
        for record in group:
            if record.per_pair_lbt is None:
                raise ValueError(
                    f"record {record.tp_id}#{record.sample_index} has no per-pair score"
                )
        if key_kind == KEY_PER_PAIR:
            key = f"{group[0].sample_index}"
        else:
            key = _group_key(group)
        scores = [r.per_pair_lbt for r in group]
        table.entries[key] = max(scores) if mode == MODE_MAX else sum(scores, Fraction(0))
        table.first_index[key] = group[0].sample_index
        table.representative[key] = group[0].ta_text
    return table


def select_answer(table: ScoreTable) -> str:
    """Argmax by score; exact ties go to the earliest-sampled answer."""
    if not table.entries:
        raise SelectionError("score table is empty")
    return min(
        table.entries,
        key=lambda key: (-table.entries[key], table.first_index[key]),
    )


def self_consistency(records: Sequence[TeachingRecord]) -> tuple[str, dict[str, int]]:
    """Most frequent answer under equivalence; ties to the earliest sample.

    Returns the winning group key and the per-key frequency table.
    """
    groups = _equivalence_groups(records)
    if not groups:
        raise SelectionError("no valid records")
    counts = {_group_key(g): len(g) for g in groups}
    first = {_group_key(g): g[0].sample_index for g in groups}
    winner = min(counts, key=lambda key: (-counts[key], first[key]))
    return winner, counts


SELF_EVAL_PROMPT = (
    "Rate the correctness of the following solution on a scale from 0 to 10, "
    "where 10 means certainly correct and 0 means certainly wrong.\n"
    "\n"
    "[[Question]]:\n"
    "\n"
    "{tp}\n"
    "\n"
    "[[Solution]]:\n"
    "\n"
    "{tr}\n"
    "\n"
    "[[Final Answer]]:\n"
    "\n"
    "{ta}\n"
    "\n"
    "Reply with a single number between 0 and 10."
)

_SCORE_RE = re.compile(r"(\d+(?:\.\d+)?)(\s*/\s*10)?")


def build_self_eval_request(
    backend_id: str, model_name: str, tp_statement: str, record: TeachingRecord
) -> ChatRequest:
    prompt = SELF_EVAL_PROMPT.format(tp=tp_statement, tr=record.tr, ta=record.ta_text)
    return user_request(backend_id, model_name, prompt, GREEDY, 1)


def parse_self_eval(text: str) -> tuple[float, bool]:
    """Parse a 0-10 rating; returns (score in [0,1], flagged)."""
    m = _SCORE_RE.search(text)
    if not m:
        return 0.0, True
    value = float(m.group(1))
    if value > 10:
        return 0.0, True
    return value / 10.0, False


def self_eval_score(
    gateway: Gateway,
    backend_id: str,
    model_name: str,
    tp_statement: str,
    record: TeachingRecord,
) -> tuple[float, bool]:
    request = build_self_eval_request(backend_id, model_name, tp_statement, record)
    completion = gateway.complete(request)[0]
    return parse_self_eval(completion.text)


@dataclass(frozen=True)
class M1Group:
    tp_id: str
    statement: str
    gt: str
    eps: tuple[ExamProblem, ...]


@dataclass
class M1Config:
    teacher_backend: str
    teacher_model: str
    students: tuple[tuple[str, str], ...]
    n: int = 256
    repeats: int = 3
    sampling: SamplingParams = SamplingParams(temperature=0.7, top_k=20)
    include_self_eval: bool = False


@dataclass
class Selection:
    answer: str
    correct: int


@dataclass
class M1Result:
    tp_id: str
    greedy: Selection
    sc: Selection
    m1_max: Selection
    m1_sum: Selection
    self_eval: Optional[Selection]
    max_table: ScoreTable
    sum_table: ScoreTable
    sc_counts: dict[str, int]
    records: list[TeachingRecord]
    exams: list[ExamRecord]
    invalid_count: int

    def to_json(self) -> dict:
        out = {
            "tp_id": self.tp_id,
            "greedy": vars(self.greedy),
            "sc": vars(self.sc),
            "m1_max": vars(self.m1_max),
            "m1_sum": vars(self.m1_sum),
            "tables": {
                "max": self.max_table.as_json(),
                "sum": self.sum_table.as_json(),
                "sc_counts": dict(sorted(self.sc_counts.items())),
            },
            "invalid_count": self.invalid_count,
        }
        if self.self_eval is not None:
            out["self_eval"] = vars(self.self_eval)
        return out


def _grade_selection(answer_text: str, gt: str) -> Selection:
    answer = math_grader.make_answer(answer_text)
    return Selection(answer=answer_text, correct=math_grader.grade_exam(answer, gt).score)


def run_m1(gateway: Gateway, group: M1Group, cfg: M1Config) -> M1Result:
    """All four selections (greedy, SC, MAX, SUM) over one shared record set."""
    greedy_request = build_teacher_request(
        cfg.teacher_backend, cfg.teacher_model, group.statement, GREEDY, 1, "math"
    )
    greedy_text = gateway.complete(greedy_request)[0].text
    greedy_ea = math_grader.try_extract_final_answer(greedy_text)
    greedy = Selection(
        answer="" if greedy_ea is None else greedy_ea.raw,
        correct=math_grader.grade_exam(greedy_ea, group.gt).score,
    )

    records = sample_teaching(
        gateway,
        cfg.teacher_backend,
        cfg.teacher_model,
        group.tp_id,
        group.statement,
        cfg.n,
        cfg.sampling,
        task="math",
        gt=group.gt,
    )
    exams: list[ExamRecord] = []
    for record in records:
        if not record.valid:
            continue
        record_exams = run_exams(
            gateway, record, group.statement, group.eps, cfg.students, cfg.repeats, cfg.sampling
        )
        record.per_pair_lbt = per_pair_lbt_score(record_exams)
        exams.extend(record_exams)
    exams.sort(key=ExamRecord.sort_key)

    max_table = aggregate(records, MODE_MAX)
    sum_table = aggregate(records, MODE_SUM)
    sc_key, sc_counts = self_consistency(records)

    self_eval_sel: Optional[Selection] = None
    if cfg.include_self_eval:
        best: Optional[tuple[float, int, TeachingRecord]] = None
        for record in records:
            if not record.valid:
                continue
            score, _ = self_eval_score(
                gateway, cfg.teacher_backend, cfg.teacher_model, group.statement, record
            )
            candidate = (-score, record.sample_index, record)
            if best is None or candidate < best:
                best = candidate
        assert best is not None
        self_eval_sel = _grade_selection(best[2].ta_text, group.gt)

    result = M1Result(
        tp_id=group.tp_id,
        greedy=greedy,
        sc=_grade_selection(sum_table.representative[sc_key], group.gt),
        m1_max=_grade_selection(max_table.representative[select_answer(max_table)], group.gt),
        m1_sum=_grade_selection(sum_table.representative[select_answer(sum_table)], group.gt),
        self_eval=self_eval_sel,
        max_table=max_table,
        sum_table=sum_table,
        sc_counts=sc_counts,
        records=records,
        exams=exams,
        invalid_count=sum(1 for r in records if not r.valid),
    )
    return result


def write_jsonl(path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
            f.flush()
