"""Code-synthesis exams: candidate extraction, test execution, V/S scoring.

Execution goes through an executor abstraction: a live runner process
speaking a JSON stdin/stdout protocol, or a fixture executor replaying
recorded reports so the whole code path is testable with no interpreter.

V-score is binary (all visible tests pass); S-score is the hidden-test pass
fraction, standing in for a judge submission. A candidate's teaching score is
the mean exam V-score of students taught with it.
"""

from __future__ import annotations

import hashlib
import json
import re
import subprocess
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

from . import core, prompts
from .gateway import GREEDY, Gateway, user_request

REASON_OK = "ok"
REASON_WRONG_OUTPUT = "wrong_output"
REASON_EXCEPTION = "exception"
REASON_TIMEOUT = "timeout"
REASON_PROTOCOL_ERROR = "protocol_error"

DEFAULT_TIMEOUT_MS = 10_000


class ExtractionMiss(ValueError):
    """Completion carries no fenced code block."""


class ExecutorMissError(RuntimeError):
    """Fixture executor asked for a job outside its recorded set."""


class RunnerEnvironmentError(RuntimeError):
    """Runner executable missing; the run cannot proceed."""


@dataclass(frozen=True)
class TestCase:
    input: object
    expected: object


@dataclass(frozen=True)
class CodeProblem:
    id: str
    title_abbrev: str
    statement: str
    entry_point: str
    visible_tests: tuple[TestCase, ...]
    hidden_tests: tuple[TestCase, ...] = ()


@dataclass(frozen=True)
class TestResult:
    passed: bool
    reason: str
    ms: int = 0


@dataclass(frozen=True)
class ExecutionReport:
    per_test: tuple[TestResult, ...]

    @property
    def all_passed(self) -> bool:
        return all(t.passed for t in self.per_test)


def job_payload(
    program: str, entry_point: str, tests: Sequence[TestCase], timeout_ms: int
) -> dict:
    """The runner wire-protocol job document (also the fixture key basis)."""
    return {
        "program": program,
        "entry_point": entry_point,
        "tests": [{"input": t.input, "expected": t.expected} for t in tests],
        "timeout_ms": timeout_ms,
    }


def job_digest(program: str, entry_point: str, tests: Sequence[TestCase], timeout_ms: int) -> str:
    blob = json.dumps(
        job_payload(program, entry_point, tests, timeout_ms),
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class Executor:
    def run(
        self, program: str, entry_point: str, tests: Sequence[TestCase], timeout_ms: int
    ) -> ExecutionReport:
        raise NotImplementedError


class FixtureExecutor(Executor):
    """Replays recorded execution reports keyed by job digest."""

    def __init__(self, reports: Optional[dict[str, list[dict]]] = None):
        self.reports: dict[str, list[dict]] = dict(reports or {})

    @classmethod
    def from_file(cls, path) -> "FixtureExecutor":
        with open(path, encoding="utf-8") as f:
            return cls(json.load(f))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.reports, f, sort_keys=True, indent=2)

    def record(
        self,
        program: str,
        entry_point: str,
        tests: Sequence[TestCase],
        timeout_ms: int,
        results: Sequence[TestResult],
    ) -> None:
        digest = job_digest(program, entry_point, tests, timeout_ms)
        self.reports[digest] = [vars(r) for r in results]

    def record_outcomes(
        self,
        program: str,
        entry_point: str,
        tests: Sequence[TestCase],
        timeout_ms: int,
        passed: Sequence[bool],
    ) -> None:
        """Shorthand: pass/fail flags become ok/wrong_output results."""
        results = [
            TestResult(p, REASON_OK if p else REASON_WRONG_OUTPUT, 1) for p in passed
        ]
        self.record(program, entry_point, tests, timeout_ms, results)

    def run(
        self, program: str, entry_point: str, tests: Sequence[TestCase], timeout_ms: int
    ) -> ExecutionReport:
        digest = job_digest(program, entry_point, tests, timeout_ms)
        rows = self.reports.get(digest)
        if rows is None:
            raise ExecutorMissError(f"no recorded report for job digest {digest}")
        return ExecutionReport(
            per_test=tuple(TestResult(r["passed"], r["reason"], r.get("ms", 0)) for r in rows)
        )


class SubprocessRunnerExecutor(Executor):
    """Drives the external runner over its JSON stdin/stdout wire protocol.

    A nonzero runner exit or a malformed reply marks every test
    protocol_error; a missing runner binary aborts the run.
    """

    def __init__(self, cmd: Sequence[str]):
        self.cmd = list(cmd)

    def run(
        self, program: str, entry_point: str, tests: Sequence[TestCase], timeout_ms: int
    ) -> ExecutionReport:
        job = json.dumps(job_payload(program, entry_point, tests, timeout_ms))
        try:
            proc = subprocess.run(
                self.cmd,
                input=job.encode("utf-8"),
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                timeout=(timeout_ms * (len(tests) + 1)) / 1000 + 60,
            )
        except FileNotFoundError as e:
            raise RunnerEnvironmentError(f"runner executable not found: {self.cmd[0]}") from e
        except subprocess.TimeoutExpired:
            return self._protocol_failure(len(tests))
        if proc.returncode != 0:
            return self._protocol_failure(len(tests))
        try:
            reply = json.loads(proc.stdout.decode("utf-8"))
            rows = reply["results"]
            if not isinstance(rows, list) or len(rows) != len(tests):
                return self._protocol_failure(len(tests))
            per_test = tuple(
                TestResult(bool(r["passed"]), str(r["reason"]), int(r.get("ms", 0)))
                for r in rows
            )
        except (ValueError, KeyError, TypeError):
            return self._protocol_failure(len(tests))
        return ExecutionReport(per_test=per_test)

    @staticmethod
    def _protocol_failure(n_tests: int) -> ExecutionReport:
        return ExecutionReport(
            per_test=tuple(TestResult(False, REASON_PROTOCOL_ERROR, 0) for _ in range(n_tests))
        )


_FENCE_RE = re.compile(r"```[a-zA-Z0-9_+-]*\n(.*?)```", re.DOTALL)
FINAL_CODE_MARKER = "[[Final Code]]"


def extract_code(completion_text: str) -> str:
    """Last fenced code block, preferring blocks after a final-code marker."""
    matches = list(_FENCE_RE.finditer(completion_text))
    if not matches:
        raise ExtractionMiss("no fenced code block in completion")
    marker = completion_text.rfind(FINAL_CODE_MARKER)
    if marker >= 0:
        after = [m for m in matches if m.start() > marker]
        if after:
            return after[-1].group(1).rstrip("\n")
    return matches[-1].group(1).rstrip("\n")


def split_completion_code(text: str) -> tuple[str, str]:
    """Split a completion into (rationale text, program text)."""
    program = extract_code(text)
    matches = list(_FENCE_RE.finditer(text))
    marker = text.rfind(FINAL_CODE_MARKER)
    chosen = matches[-1]
    if marker >= 0:
        after = [m for m in matches if m.start() > marker]
        if after:
            chosen = after[-1]
    tr = text[: chosen.start()].rstrip()
    if tr.endswith(":") and tr[: tr.rfind("\n") + 1].rstrip().endswith(FINAL_CODE_MARKER + ":"):
        tr = tr[: tr.rfind("\n")].rstrip()
    elif tr.endswith(FINAL_CODE_MARKER + ":"):
        tr = tr[: -len(FINAL_CODE_MARKER + ":")].rstrip()
    return tr, program


@dataclass(frozen=True)
class VScore:
    v: int  # 0 or 1


@dataclass(frozen=True)
class SScore:
    s: Fraction

    def __float__(self) -> float:
        return float(self.s)


def run_visible(
    problem: CodeProblem, program: str, executor: Executor, timeout_ms: int = DEFAULT_TIMEOUT_MS
) -> tuple[VScore, ExecutionReport]:
    """V-score 1 iff every visible test passes; any failure mode forces 0."""
    report = executor.run(program, problem.entry_point, problem.visible_tests, timeout_ms)
    return VScore(v=1 if report.all_passed else 0), report


def run_hidden(
    problem: CodeProblem, program: str, executor: Executor, timeout_ms: int = DEFAULT_TIMEOUT_MS
) -> SScore:
    """Fraction of hidden tests passed."""
    if not problem.hidden_tests:
        raise ValueError(f"problem {problem.id} has no hidden tests")
    report = executor.run(program, problem.entry_point, problem.hidden_tests, timeout_ms)
    passed = sum(1 for t in report.per_test if t.passed)
    return SScore(s=Fraction(passed, len(report.per_test)))


def build_self_debug_request(
    backend_id: str, model_name: str, statement: str, rationale: str, program: str
):
    prompt = prompts.render(
        "self_debug", {"problem": statement, "rationale": rationale, "code": program}
    )
    return user_request(backend_id, model_name, prompt, GREEDY, 1)


def self_debug(
    gateway: Gateway,
    backend_id: str,
    model_name: str,
    statement: str,
    rationale: str,
    program: str,
) -> tuple[str, bool]:
    """One-iteration repair pass; keeps the original program on a failed parse.

    Returns (program, kept_original_flag).
    """
    request = build_self_debug_request(backend_id, model_name, statement, rationale, program)
    completion = gateway.complete(request)[0]
    try:
        return extract_code(completion.text), False
    except ExtractionMiss:
        return program, True


def build_code_student_request(
    backend_id: str,
    model_name: str,
    tp_statement: str,
    record: core.TeachingRecord,
    ep_statement: str,
):
    prompt = prompts.render(
        "student_code",
        {
            "tp": tp_statement,
            "tr": record.tr,
            "ta": record.ta_text,
            "ep": ep_statement,
        },
    )
    return user_request(backend_id, model_name, prompt, GREEDY, 1)


def lbt_code_score(
    gateway: Gateway,
    record: core.TeachingRecord,
    tp_statement: str,
    eps: Sequence[CodeProblem],
    student: tuple[str, str],
    executor: Executor,
    apply_sd: bool = False,
    timeout_ms: int = DEFAULT_TIMEOUT_MS,
) -> Fraction:
    """Mean exam V-score of the student over the remaining problems.

    With apply_sd, each exam answer gets one repair pass before scoring, which
    makes the exam V-score more indicative of the teaching pair's quality.
    """
    if not eps:
        raise ValueError("eps must be non-empty")
    student_id, student_model = student
    total = Fraction(0)
    for ep in eps:
        request = build_code_student_request(
            student_id, student_model, tp_statement, record, ep.statement
        )
        completion = gateway.complete(request)[0]
        try:
            er, ea_program = split_completion_code(completion.text)
        except ExtractionMiss:
            continue  # scores 0 for this EP
        if apply_sd:
            ea_program, _ = self_debug(
                gateway, student_id, student_model, ep.statement, er, ea_program
            )
        vscore, _ = run_visible(ep, ea_program, executor, timeout_ms)
        total += vscore.v
    return total / len(eps)


@dataclass
class CodeCandidate:
    record: core.TeachingRecord
    program: Optional[str]
    v: int
    s: Optional[Fraction]
    lbt: Fraction
    no_code: bool = False

    def to_json(self) -> dict:
        return {
            "tp_id": self.record.tp_id,
            "sample_index": self.record.sample_index,
            "v": self.v,
            "s": None if self.s is None else float(self.s),
            "lbt": float(self.lbt),
            "no_code": self.no_code,
        }


NO_CANDIDATE = "-"


@dataclass
class CodeM1Result:
    tp_id: str
    candidates: list[CodeCandidate]
    metrics: dict[str, object] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "tp_id": self.tp_id,
            "candidates": [c.to_json() for c in self.candidates],
            "metrics": self.metrics,
        }


def _mean_s(candidates: Sequence[CodeCandidate]) -> object:
    if not candidates:
        return NO_CANDIDATE
    total = sum((c.s if c.s is not None else Fraction(0)) for c in candidates)
    return float(total / len(candidates))


def _argmax_lbt(candidates: Sequence[CodeCandidate]) -> object:
    if not candidates:
        return NO_CANDIDATE
    best = min(candidates, key=lambda c: (-c.lbt, c.record.sample_index))
    return float(best.s) if best.s is not None else 0.0


def summarize_candidates(candidates: Sequence[CodeCandidate]) -> dict[str, object]:
    """Table-shaped metrics: average and selected S-scores, raw and filtered.

    The V-score=1 filter keeps exactly the candidates passing all visible
    tests; an empty filtered set is reported as "-", never a fabricated score.
    """
    filtered = [c for c in candidates if c.v == 1]
    return {
        "avg": _mean_s(candidates),
        "m1_max": _argmax_lbt(candidates),
        "avg_v1": _mean_s(filtered),
        "m1_max_v1": _argmax_lbt(filtered),
    }


@dataclass
class CodeM1Config:
    teacher_backend: str
    teacher_model: str
    student: tuple[str, str]
    n: int = 8
    sampling: object = None  # SamplingParams; default set by caller per model family
    apply_sd: bool = False
    timeout_ms: int = DEFAULT_TIMEOUT_MS


def run_code_m1(
    gateway: Gateway,
    tp: CodeProblem,
    plan: Sequence[CodeProblem],
    cfg: CodeM1Config,
    executor: Executor,
) -> CodeM1Result:
    """Teach with each sampled candidate, score by student exams, and select.

    Exam problems are the remaining problems of the teaching problem's plan.
    """
    eps = [p for p in plan if p.id != tp.id]
    records = core.sample_teaching(
        gateway,
        cfg.teacher_backend,
        cfg.teacher_model,
        tp.id,
        tp.statement,
        cfg.n,
        cfg.sampling,
        task="code",
    )
    candidates: list[CodeCandidate] = []
    for record in records:
        if not record.valid:
            record.per_pair_lbt = Fraction(0)
            candidates.append(
                CodeCandidate(
                    record=record, program=None, v=0, s=Fraction(0), lbt=Fraction(0), no_code=True
                )
            )
            continue
        program = record.ta_text
        if cfg.apply_sd:
            program, _ = self_debug(
                gateway, cfg.teacher_backend, cfg.teacher_model, tp.statement, record.tr, program
            )
            record.ta = program
        vscore, _ = run_visible(tp, program, executor, cfg.timeout_ms)
        s = (
            run_hidden(tp, program, executor, cfg.timeout_ms).s
            if tp.hidden_tests
            else None
        )
        lbt = lbt_code_score(
            gateway, record, tp.statement, eps, cfg.student, executor, cfg.apply_sd, cfg.timeout_ms
        )
        record.per_pair_lbt = lbt
        candidates.append(
            CodeCandidate(record=record, program=program, v=vscore.v, s=s, lbt=lbt)
        )
    result = CodeM1Result(tp_id=tp.id, candidates=candidates)
    result.metrics = summarize_candidates(candidates)
    return result
