from __future__ import annotations

from pathlib import Path

import pytest

from lbt import prompts

GOLDEN_DIR = Path(__file__).parent / "golden"

# Bindings that fill each template with the literal placeholders of its
# canonical prompt box; rendering must reproduce it byte for byte.
GOLDEN_BINDINGS = {
    "teacher_math": {"shots": "{4-shot examples}", "tp": "{TP}"},
    "student_math": {
        "shots": "{4-shot examples}",
        "tp": "{TP}",
        "tr": "{TR}",
        "ta": "{TA}",
        "ep": "{EP}",
    },
    "teacher_code": {"tp": "{TP}"},
    "student_code": {"tp": "{TP}", "tr": "{TR}", "ta": "{TA}", "ep": "{EP}"},
    "self_debug": {
        "problem": "{TP or EP}",
        "rationale": "{TR or ER}",
        "code": "{TA or EA}",
    },
    "m3_init": {"k": "{k}", "task": "{task}", "exemplars": "{exemplars}"},
    "m3_reflect": {
        "k": "{k}",
        "task": "{task}",
        "failure_cases": "{failure_cases}",
        "num_feedbacks": "{num_feedbacks}",
    },
    "m3_improve": {
        "k": "{k}",
        "task": "{task}",
        "failure_cases": "{failure_cases}",
        "reflection": "{reflection}",
    },
}


def read_golden(template_id: str) -> str:
    text = (GOLDEN_DIR / f"{template_id}.txt").read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text


@pytest.mark.parametrize("template_id", prompts.TEMPLATE_IDS)
def test_golden_conformance(template_id):
    rendered = prompts.render(template_id, GOLDEN_BINDINGS[template_id])
    assert rendered == read_golden(template_id)


def test_all_eight_templates_present():
    assert set(prompts.load_templates()) == set(prompts.TEMPLATE_IDS)
    assert set(GOLDEN_BINDINGS) == set(prompts.TEMPLATE_IDS)


def test_teacher_math_structure():
    out = prompts.render("teacher_math", {"shots": "S", "tp": "What is 2+2?"})
    assert "[[Question]]:" in out
    assert "What is 2+2?" in out
    assert out.index("[[Question]]:") < out.index("What is 2+2?")
    assert out.endswith("Let's think step by step.")


def test_student_math_teacher_shot_precedes_exam_problem():
    out = prompts.render(
        "student_math",
        {"shots": "S", "tp": "TP-text", "tr": "TR-text", "ta": "TA-text", "ep": "EP-text"},
    )
    # The taught solution is the final in-context shot, before the exam problem.
    assert out.index("TP-text") < out.index("TR-text") < out.index("TA-text") < out.index("EP-text")


def test_m3_reflect_embeds_feedback_count():
    out = prompts.render(
        "m3_reflect",
        {"k": "8", "task": "q", "failure_cases": "fc", "num_feedbacks": "2"},
    )
    assert "Give 2 reasons" in out


def test_missing_slot_names_the_slot():
    with pytest.raises(prompts.RenderError, match="tp"):
        prompts.render("teacher_math", {"shots": "S"})


def test_unknown_template_id():
    with pytest.raises(prompts.TemplateLookupError):
        prompts.render("nope", {})


def test_render_is_pure_and_verbatim():
    bindings = {"shots": "  spaced  ", "tp": "{weird {braces}} and\nnewlines"}
    a = prompts.render("teacher_math", bindings)
    b = prompts.render("teacher_math", bindings)
    assert a == b
    assert "{weird {braces}} and\nnewlines" in a
    assert "  spaced  " in a


def test_slot_content_is_not_rescanned():
    out = prompts.render("teacher_code", {"tp": "statement with {tp} inside"})
    assert "statement with {tp} inside" in out


def test_static_shots_math():
    shots = prompts.load_static_shots("math")
    assert len(shots) == 4
    for shot in shots:
        assert shot.startswith("[[Question]]:")
        assert "[[Final Answer]]:" in shot


def test_static_shots_code_empty():
    assert prompts.load_static_shots("code") == ()


def test_static_shots_deterministic():
    assert prompts.load_static_shots("math") == prompts.load_static_shots("math")


def test_static_shots_unknown_task():
    with pytest.raises(prompts.ShotsError):
        prompts.load_static_shots("poetry")
