"""Deterministic scripted worlds used across the test suite.

A world is a CallableBackend whose replies are a pure function of the prompt
content (plus, for exemplar-improvement calls, a per-run call counter). Worlds
drive whole pipeline runs without any live model; wrapping the backend in
RecordingBackend yields fixture files for CLI --fixtures runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

from lbt import core
from lbt.exemplar_opt import LABEL_POSITIVE
from lbt.gateway import (
    CallableBackend,
    ChatRequest,
    CompletionCache,
    FixtureMissError,
    Gateway,
)


def teacher_completion(rationale: str, answer: str) -> str:
    return f"{rationale}\n\n'''\n\n[[Final Answer]]:\n\n{answer}\n\n'''"


def student_completion(answer: str) -> str:
    return f"Following the example.\n\n'''\n\n[[Final Answer]]:\n\n{answer}\n\n'''"


def rationale_marker(sample_index: int) -> str:
    return f"sample-{sample_index}"


@dataclass
class MathWorld:
    """One teaching problem, its exam problems, and every scripted reply."""

    tp_id: str
    statement: str
    gt: str
    eps: list[core.ExamProblem]
    teacher_answers: list[str]
    greedy_answer: str
    # (sample_index, ep_id) -> exam answer text per repeat; optionally
    # (student_id, sample_index, ep_id) for per-student behavior.
    exam_answers: dict = field(default_factory=dict)
    self_eval_ratings: dict = field(default_factory=dict)

    def group(self) -> core.M1Group:
        return core.M1Group(
            tp_id=self.tp_id, statement=self.statement, gt=self.gt, eps=tuple(self.eps)
        )

    def teacher_text(self, sample_index: int) -> str:
        return teacher_completion(
            f"Rationale {rationale_marker(sample_index)} for {self.tp_id}.",
            self.teacher_answers[sample_index],
        )

    def reply(self, request: ChatRequest, sample_index: int) -> Optional[str]:
        prompt = request.messages[-1][1]
        for i in range(len(self.teacher_answers)):
            if f"Rationale {rationale_marker(i)} for {self.tp_id}." not in prompt:
                continue
            if prompt.startswith("Rate the correctness"):
                return self.self_eval_ratings.get(i, "5")
            tail = prompt.split("[[Final Answer]]:")[-1]
            for ep in self.eps:
                if ep.statement in tail:
                    answers = self.exam_answers.get(
                        (request.backend_id, i, ep.ep_id)
                    ) or self.exam_answers.get((i, ep.ep_id))
                    if answers is None:
                        return None
                    return student_completion(answers[sample_index])
            return None
        if self.statement in prompt:
            if request.params.is_greedy:
                return teacher_completion("Greedy rationale.", self.greedy_answer)
            return self.teacher_text(sample_index)
        return None


class MultiWorldBackend(CallableBackend):
    def __init__(self, worlds: Sequence[MathWorld]):
        self.worlds = list(worlds)
        super().__init__(self._reply)

    def _reply(self, request: ChatRequest, sample_index: int) -> str:
        for world in self.worlds:
            text = world.reply(request, sample_index)
            if text is not None:
                return text
        raise FixtureMissError(
            f"world has no reply for prompt: {request.messages[-1][1][:120]!r}"
        )


def make_gateway(tmp_path, backends: dict, name="cache") -> Gateway:
    return Gateway(backends, CompletionCache(tmp_path / name))


def uniform_world(
    tp_id: str = "tp1",
    n: int = 4,
    repeats: int = 2,
    n_eps: int = 3,
    correct_answer: str = "4",
    wrong_answer: str = "7",
    correct_samples: Sequence[int] = (0, 1),
    exam_pass: Optional[dict] = None,
) -> MathWorld:
    """A compact world: some samples answer correctly, the rest agree on a
    wrong answer; exam outcomes default to 'pass iff the sample was correct'.
    """
    statement = f"Problem {tp_id}: what is 2+2?"
    eps = [
        core.ExamProblem(
            ep_id=f"{tp_id}-v{j}", statement=f"Variant {j} of {tp_id}: what is 3+1?", gt="4"
        )
        for j in range(n_eps)
    ]
    answers = [correct_answer if i in correct_samples else wrong_answer for i in range(n)]
    exam_answers = {}
    for i in range(n):
        for ep in eps:
            if exam_pass is not None and (i, ep.ep_id) in exam_pass:
                flags = exam_pass[(i, ep.ep_id)]
            else:
                flags = [i in correct_samples] * repeats
            exam_answers[(i, ep.ep_id)] = [ep.gt if ok else "999" for ok in flags]
    return MathWorld(
        tp_id=tp_id,
        statement=statement,
        gt="4",
        eps=eps,
        teacher_answers=answers,
        greedy_answer=correct_answer,
        exam_answers=exam_answers,
    )


def write_math_corpus(path, worlds: Sequence[MathWorld], split: str = "test") -> None:
    rows = []
    for world in worlds:
        rows.append(
            {
                "id": world.tp_id,
                "statement": world.statement,
                "gt_answer": world.gt,
                "variant_group": f"g-{world.tp_id}",
                "is_variant": False,
                "split": split,
            }
        )
        for ep in world.eps:
            rows.append(
                {
                    "id": ep.ep_id,
                    "statement": ep.statement,
                    "gt_answer": ep.gt,
                    "variant_group": f"g-{world.tp_id}",
                    "is_variant": True,
                    "split": split,
                }
            )
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


# --- code-synthesis worlds -----------------------------------------------


def code_completion(rationale: str, program: str) -> str:
    return f"{rationale}\n\n[[Final Code]]:\n\n```python\n{program}\n```"


@dataclass
class CodeWorld:
    """A code teaching problem with scripted candidates, exams, and reports.

    Execution outcomes live in a FixtureExecutor; completions in a
    CallableBackend. Candidate i writes candidate_programs[i]; the student
    taught with candidate i answers exam ep with ea_programs[(i, ep_id)].
    """

    tp: "CodeProblem"
    eps: list
    candidate_programs: list[str]
    candidate_visible: dict  # i -> list[bool]
    candidate_hidden: dict  # i -> list[bool]
    ea_programs: dict  # (i, ep_id) -> program text
    ea_visible: dict  # (i, ep_id) -> list[bool]
    timeout_ms: int = 10_000

    def executor(self):
        from lbt.code_exam import FixtureExecutor

        executor = FixtureExecutor()
        for i, program in enumerate(self.candidate_programs):
            executor.record_outcomes(
                program, self.tp.entry_point, self.tp.visible_tests, self.timeout_ms,
                self.candidate_visible[i],
            )
            if self.tp.hidden_tests and i in self.candidate_hidden:
                executor.record_outcomes(
                    program, self.tp.entry_point, self.tp.hidden_tests, self.timeout_ms,
                    self.candidate_hidden[i],
                )
        for (i, ep_id), program in self.ea_programs.items():
            ep = next(e for e in self.eps if e.id == ep_id)
            executor.record_outcomes(
                program, ep.entry_point, ep.visible_tests, self.timeout_ms,
                self.ea_visible[(i, ep_id)],
            )
        return executor

    def candidate_completion(self, i: int) -> str:
        return code_completion(
            f"Strategy cand-{i} for {self.tp.id}.", self.candidate_programs[i]
        )

    def reply(self, request: ChatRequest, sample_index: int) -> Optional[str]:
        prompt = request.messages[-1][1]
        if "follow the example" in prompt:
            for i in range(len(self.candidate_programs)):
                if f"cand-{i} for {self.tp.id}." not in prompt:
                    continue
                for ep in self.eps:
                    if ep.statement in prompt:
                        program = self.ea_programs.get((i, ep.ep_id if hasattr(ep, "ep_id") else ep.id))
                        if program is None:
                            return None
                        return code_completion(f"Exam strategy for {ep.id}.", program)
            return None
        if self.tp.statement in prompt and "debug this code" not in prompt:
            return self.candidate_completion(sample_index)
        return None


def make_code_problem(pid: str, abbrev: str, n_visible: int = 2, n_hidden: int = 4):
    from lbt.code_exam import CodeProblem, TestCase

    return CodeProblem(
        id=pid,
        title_abbrev=abbrev,
        statement=f"Problem {pid}: compute the winning move.",
        entry_point="solve",
        visible_tests=tuple(TestCase([i], i) for i in range(n_visible)),
        hidden_tests=tuple(TestCase([10 + i], 10 + i) for i in range(n_hidden)),
    )


# --- exemplar-optimization worlds ---------------------------------------


def set_marker(set_id: str) -> str:
    return f"marker-{set_id}"


def exemplar_block(set_id: str, k: int) -> str:
    lines = []
    for i in range(1, k + 1):
        label = "Yes" if i % 2 else "No"
        lines.append(f"Example {i}: {set_marker(set_id)} exemplar {i} [{label}]")
    return "\n".join(lines)


@dataclass
class M3World:
    """Classification world with pre-assigned per-set prediction behavior.

    correct[set_id] is the set of statements the exemplar set classifies
    correctly; every other statement gets the flipped label. The improve call
    counter makes candidate delivery deterministic per run, so build a fresh
    backend per optimize run.
    """

    question: str
    train: list[tuple[str, str]]
    eval_items: list[tuple[str, str]]
    k: int
    init_set: str
    schedule: list[list[str]]  # candidate set ids per improve call
    correct: dict[str, set]
    reflection: str = "1. The examples miss negated statements."
    invalid_candidate: str = "not an example list"

    def __post_init__(self):
        self.golds = dict(self.train) | dict(self.eval_items)
        self._improve_calls: dict[str, int] = {}

    def backend(self) -> CallableBackend:
        self._improve_calls = {}
        return CallableBackend(self._reply)

    def _statement_in(self, prompt: str) -> Optional[str]:
        text_line = [l for l in prompt.splitlines() if l.startswith("Text: ")]
        if not text_line:
            return None
        return text_line[-1][len("Text: "):]

    def _set_in(self, prompt: str) -> Optional[str]:
        for set_id in self.correct:
            if set_marker(set_id) in prompt:
                return set_id
        return None

    def _reply(self, request: ChatRequest, sample_index: int) -> str:
        prompt = request.messages[-1][1]
        statement = self._statement_in(prompt)
        if statement is not None:
            set_id = self._set_in(prompt)
            assert set_id is not None, f"unknown exemplar set in prompt: {prompt[:80]}"
            gold = self.golds[statement]
            is_correct = statement in self.correct[set_id]
            label = gold if is_correct else _flip(gold)
            return "Yes" if label == LABEL_POSITIVE else "No"
        if "The list of" in prompt and "are:" in prompt:
            return exemplar_block(self.init_set, self.k)
        if "reasons why these examples" in prompt:
            return self.reflection
        if "improved positive and negative learning examples" in prompt:
            call_index = self._improve_calls.setdefault(
                _digest_key(request), len(self._improve_calls)
            )
            batch = self.schedule[call_index % len(self.schedule)]
            set_id = batch[sample_index % len(batch)]
            if set_id == "invalid":
                return self.invalid_candidate
            return exemplar_block(set_id, self.k)
        raise AssertionError(f"m3 world has no reply for prompt: {prompt[:120]!r}")

    def set_f1(self, set_id: str, items: Sequence[tuple[str, str]]) -> float:
        """Oracle-side F1 of a set on items, straight from the world tables."""
        from lbt.exemplar_opt import f1

        preds = [
            (gold if stmt in self.correct[set_id] else _flip(gold))
            for stmt, gold in items
        ]
        return f1(preds, [gold for _, gold in items])


def _flip(label: str) -> str:
    return "negative" if label == LABEL_POSITIVE else LABEL_POSITIVE


def _digest_key(request: ChatRequest) -> str:
    from lbt.gateway import request_digest

    return request_digest(request)


def write_classification_corpus(path, world: M3World) -> None:
    rows = []
    for i, (stmt, gold) in enumerate(world.train):
        rows.append({"id": f"train-{i}", "statement": stmt, "gold": gold, "split": "train"})
    for i, (stmt, gold) in enumerate(world.eval_items):
        split = "dev" if i % 2 == 0 else "test"
        rows.append({"id": f"eval-{i}", "statement": stmt, "gold": gold, "split": split})
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def simple_m3_world(k: int = 2) -> M3World:
    """Three candidate sets of strictly increasing quality over two rounds."""
    train = [
        ("stmt-a", "positive"),
        ("stmt-b", "negative"),
        ("stmt-c", "positive"),
        ("stmt-d", "negative"),
    ]
    eval_items = [("stmt-e", "positive"), ("stmt-f", "negative")]
    correct = {
        "s0": {"stmt-a", "stmt-b", "stmt-e"},
        "s1": {"stmt-a", "stmt-b", "stmt-c", "stmt-e"},
        "s2": {"stmt-a", "stmt-b", "stmt-c", "stmt-d", "stmt-e", "stmt-f"},
    }
    return M3World(
        question="Is this statement about cats?",
        train=train,
        eval_items=eval_items,
        k=k,
        init_set="s0",
        schedule=[["s1"], ["s2"]],
        correct=correct,
    )
