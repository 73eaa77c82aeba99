from __future__ import annotations

import json
import sys
from fractions import Fraction

import pytest

from lbt import code_exam as ce
from lbt.gateway import CallableBackend, SamplingParams

from worlds import CodeWorld, code_completion, make_code_problem, make_gateway


class TestExtractCode:
    def test_single_block_after_marker(self):
        text = "thinking...\n\n[[Final Code]]:\n\n```python\nx = 1\n```"
        assert ce.extract_code(text) == "x = 1"

    def test_marker_before_second_block_picks_second(self):
        text = (
            "draft:\n```python\nbad = True\n```\n\n"
            "[[Final Code]]:\n\n```python\ngood = True\n```"
        )
        assert ce.extract_code(text) == "good = True"

    def test_no_fence_is_extraction_miss(self):
        with pytest.raises(ce.ExtractionMiss):
            ce.extract_code("just prose, no code anywhere")

    def test_no_marker_takes_last_block(self):
        text = "```python\na = 1\n```\ntext\n```python\nb = 2\n```"
        assert ce.extract_code(text) == "b = 2"

    def test_split_keeps_rationale(self):
        text = code_completion("Here is the plan.", "x = 1")
        tr, program = ce.split_completion_code(text)
        assert tr == "Here is the plan."
        assert program == "x = 1"


def passing_report(n):
    return ce.ExecutionReport(per_test=tuple(ce.TestResult(True, "ok", 1) for _ in range(n)))


class TestScores:
    def make_problem_and_executor(self, visible_flags, hidden_flags=None):
        problem = make_code_problem("p1", "SG-1", n_visible=len(visible_flags))
        executor = ce.FixtureExecutor()
        executor.record_outcomes(
            "prog", problem.entry_point, problem.visible_tests, 10_000, visible_flags
        )
        if hidden_flags is not None:
            problem = make_code_problem(
                "p1", "SG-1", n_visible=len(visible_flags), n_hidden=len(hidden_flags)
            )
            executor.record_outcomes(
                "prog", problem.entry_point, problem.visible_tests, 10_000, visible_flags
            )
            executor.record_outcomes(
                "prog", problem.entry_point, problem.hidden_tests, 10_000, hidden_flags
            )
        return problem, executor

    def test_all_visible_pass_v1(self):
        problem, executor = self.make_problem_and_executor([True, True, True])
        vscore, report = ce.run_visible(problem, "prog", executor)
        assert vscore.v == 1
        assert report.all_passed

    def test_exception_mid_suite_forces_v0(self):
        problem = make_code_problem("p1", "SG-1", n_visible=3)
        executor = ce.FixtureExecutor()
        executor.record(
            "prog",
            problem.entry_point,
            problem.visible_tests,
            10_000,
            [
                ce.TestResult(True, "ok", 1),
                ce.TestResult(False, "exception", 1),
                ce.TestResult(True, "ok", 1),
            ],
        )
        vscore, report = ce.run_visible(problem, "prog", executor)
        assert vscore.v == 0
        assert [t.reason for t in report.per_test] == ["ok", "exception", "ok"]

    def test_timeout_forces_v0(self):
        problem = make_code_problem("p1", "SG-1", n_visible=2)
        executor = ce.FixtureExecutor()
        executor.record(
            "loop",
            problem.entry_point,
            problem.visible_tests,
            10_000,
            [ce.TestResult(True, "ok", 1), ce.TestResult(False, "timeout", 10_050)],
        )
        vscore, report = ce.run_visible(problem, "loop", executor)
        assert vscore.v == 0
        assert report.per_test[1].reason == "timeout"
        assert report.per_test[1].ms >= 10_000

    def test_hidden_pass_rate(self):
        problem, executor = self.make_problem_and_executor(
            [True, True], [True] * 7 + [False] * 3
        )
        assert ce.run_hidden(problem, "prog", executor).s == Fraction(7, 10)

    def test_hidden_all_pass(self):
        problem, executor = self.make_problem_and_executor([True, True], [True] * 4)
        assert ce.run_hidden(problem, "prog", executor).s == 1

    def test_empty_hidden_rejected(self):
        problem = make_code_problem("p1", "SG-1", n_hidden=0)
        with pytest.raises(ValueError):
            ce.run_hidden(problem, "prog", ce.FixtureExecutor())

    def test_fixture_miss_raises(self):
        problem = make_code_problem("p1", "SG-1")
        with pytest.raises(ce.ExecutorMissError):
            ce.run_visible(problem, "unseen program", ce.FixtureExecutor())

    def test_vscore_monotone_under_failing_test_removal(self):
        # Removing a failing visible test can only raise or preserve v.
        full = make_code_problem("p1", "SG-1", n_visible=3)
        fewer = ce.CodeProblem(
            id="p1", title_abbrev="SG-1", statement=full.statement,
            entry_point=full.entry_point, visible_tests=full.visible_tests[:2],
            hidden_tests=full.hidden_tests,
        )
        executor = ce.FixtureExecutor()
        executor.record_outcomes(
            "prog", full.entry_point, full.visible_tests, 10_000, [True, True, False]
        )
        executor.record_outcomes(
            "prog", fewer.entry_point, fewer.visible_tests, 10_000, [True, True]
        )
        v_full, _ = ce.run_visible(full, "prog", executor)
        v_fewer, _ = ce.run_visible(fewer, "prog", executor)
        assert v_fewer.v >= v_full.v

    def test_fixture_determinism(self):
        problem, executor = self.make_problem_and_executor([True, False])
        first = ce.run_visible(problem, "prog", executor)
        second = ce.run_visible(problem, "prog", executor)
        assert first == second


class TestSelfDebug:
    def prompt_contains(self, fragment):
        def fn(request, index):
            prompt = request.messages[-1][1]
            assert fragment in prompt
            return code_completion("fixed it", "import math\nx = math.gcd(4, 6)")

        return fn

    def test_scripted_fix_applied(self, tmp_path):
        gateway = make_gateway(
            tmp_path, {"debug": CallableBackend(self.prompt_contains("debug this code"))}
        )
        program, kept = ce.self_debug(
            gateway, "debug", "m", "stmt", "rationale", "x = math.gcd(4, 6)"
        )
        assert "import math" in program
        assert kept is False

    def test_identity_response_keeps_program(self, tmp_path):
        original = "def solve(n):\n    return n"
        backend = CallableBackend(lambda req, i: code_completion("correct already", original))
        gateway = make_gateway(tmp_path, {"debug": backend})
        program, kept = ce.self_debug(gateway, "debug", "m", "stmt", "r", original)
        assert program == original
        assert kept is False

    def test_unparseable_revision_keeps_original_flagged(self, tmp_path):
        backend = CallableBackend(lambda req, i: "I cannot help with that.")
        gateway = make_gateway(tmp_path, {"debug": backend})
        program, kept = ce.self_debug(gateway, "debug", "m", "stmt", "r", "orig = 1")
        assert program == "orig = 1"
        assert kept is True


def build_world(n=2, n_eps=4, ea_pass=None):
    tp = make_code_problem("tp", "SG-1")
    eps = [make_code_problem(f"ep{j}", f"EP-{j}") for j in range(n_eps)]
    candidate_programs = [f"def solve(x):\n    return x  # cand {i}" for i in range(n)]
    ea_programs = {}
    ea_visible = {}
    for i in range(n):
        for ep in eps:
            ea_programs[(i, ep.id)] = f"def solve(x):\n    return x  # ea {i} {ep.id}"
            flags = ea_pass.get((i, ep.id), True) if ea_pass else True
            ea_visible[(i, ep.id)] = [flags] * len(ep.visible_tests)
    return CodeWorld(
        tp=tp,
        eps=eps,
        candidate_programs=candidate_programs,
        candidate_visible={i: [True] * 2 for i in range(n)},
        candidate_hidden={i: [True] * 4 for i in range(n)},
        ea_programs=ea_programs,
        ea_visible=ea_visible,
    )


def world_gateway(tmp_path, world):
    backend = CallableBackend(
        lambda req, i: world.reply(req, i) or (_ for _ in ()).throw(AssertionError(req))
    )
    return make_gateway(tmp_path, {"teacher": backend, "student": backend})


class TestLbtCodeScore:
    def test_two_of_four_eps_passed(self, tmp_path):
        from lbt import core

        world = build_world(
            n=1,
            n_eps=4,
            ea_pass={(0, "ep0"): True, (0, "ep1"): True, (0, "ep2"): False, (0, "ep3"): False},
        )
        gateway = world_gateway(tmp_path, world)
        records = core.sample_teaching(
            gateway, "teacher", "m", world.tp.id, world.tp.statement, 1,
            SamplingParams(temperature=1.0), task="code",
        )
        score = ce.lbt_code_score(
            gateway, records[0], world.tp.statement, world.eps, ("student", "m"),
            world.executor(),
        )
        assert score == Fraction(1, 2)

    def test_all_eps_fail(self, tmp_path):
        from lbt import core

        world = build_world(n=1, n_eps=3, ea_pass={(0, f"ep{j}"): False for j in range(3)})
        gateway = world_gateway(tmp_path, world)
        records = core.sample_teaching(
            gateway, "teacher", "m", world.tp.id, world.tp.statement, 1,
            SamplingParams(temperature=1.0), task="code",
        )
        score = ce.lbt_code_score(
            gateway, records[0], world.tp.statement, world.eps, ("student", "m"),
            world.executor(),
        )
        assert score == 0


class TestSummarize:
    def make_candidate(self, i, v, s, lbt):
        from lbt.core import TeachingRecord

        record = TeachingRecord(
            tp_id="tp", sample_index=i, tr="", ta=f"prog{i}", completion_text="",
            per_pair_lbt=Fraction(lbt).limit_denominator(10**6),
        )
        return ce.CodeCandidate(
            record=record, program=f"prog{i}", v=v,
            s=None if s is None else Fraction(s).limit_denominator(10**6),
            lbt=Fraction(lbt).limit_denominator(10**6),
        )

    def test_empty_filter_reports_dash(self):
        candidates = [self.make_candidate(0, 0, 0.4, 0.5), self.make_candidate(1, 0, 0.2, 0.1)]
        metrics = ce.summarize_candidates(candidates)
        assert metrics["avg_v1"] == "-"
        assert metrics["m1_max_v1"] == "-"
        assert metrics["avg"] == pytest.approx(0.3)

    def test_filter_keeps_exactly_v1(self):
        candidates = [
            self.make_candidate(0, 1, 1.0, 0.9),
            self.make_candidate(1, 0, 0.0, 1.0),
            self.make_candidate(2, 1, 0.5, 0.2),
        ]
        metrics = ce.summarize_candidates(candidates)
        assert metrics["avg_v1"] == pytest.approx(0.75)
        # Highest teaching score overall is the v=0 candidate; filtered pick differs.
        assert metrics["m1_max"] == pytest.approx(0.0)
        assert metrics["m1_max_v1"] == pytest.approx(1.0)


class TestSubprocessRunner:
    def fake_runner(self, script):
        return ce.SubprocessRunnerExecutor([sys.executable, "-c", script])

    def test_missing_binary_aborts(self):
        executor = ce.SubprocessRunnerExecutor(["/no/such/runner-binary"])
        problem = make_code_problem("p", "P")
        with pytest.raises(ce.RunnerEnvironmentError):
            executor.run("prog", "solve", problem.visible_tests, 1000)

    def test_nonzero_exit_marks_protocol_error(self):
        executor = self.fake_runner("import sys; sys.exit(3)")
        problem = make_code_problem("p", "P")
        report = executor.run("prog", "solve", problem.visible_tests, 1000)
        assert all(t.reason == "protocol_error" and not t.passed for t in report.per_test)
        assert len(report.per_test) == len(problem.visible_tests)

    def test_malformed_reply_marks_protocol_error(self):
        executor = self.fake_runner("print('not json')")
        problem = make_code_problem("p", "P")
        report = executor.run("prog", "solve", problem.visible_tests, 1000)
        assert all(t.reason == "protocol_error" for t in report.per_test)

    def test_wrong_result_count_marks_protocol_error(self):
        script = 'import json; print(json.dumps({"results": [{"passed": True, "reason": "ok", "ms": 1}]}))'
        executor = self.fake_runner(script)
        problem = make_code_problem("p", "P", n_visible=2)
        report = executor.run("prog", "solve", problem.visible_tests, 1000)
        assert all(t.reason == "protocol_error" for t in report.per_test)

    def test_valid_reply_round_trip(self):
        script = (
            "import json, sys\n"
            "job = json.load(sys.stdin)\n"
            "results = [{'passed': True, 'reason': 'ok', 'ms': 2} for _ in job['tests']]\n"
            "print(json.dumps({'results': results}))\n"
        )
        executor = self.fake_runner(script)
        problem = make_code_problem("p", "P", n_visible=3)
        report = executor.run("prog", "solve", problem.visible_tests, 1000)
        assert report.all_passed
        assert len(report.per_test) == 3

    def test_job_payload_shape(self):
        problem = make_code_problem("p", "P", n_visible=1)
        payload = ce.job_payload("prog", "solve", problem.visible_tests, 1234)
        assert json.dumps(payload)  # serializable
        assert payload == {
            "program": "prog",
            "entry_point": "solve",
            "tests": [{"input": [0], "expected": 0}],
            "timeout_ms": 1234,
        }
