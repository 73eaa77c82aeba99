"""Prompt templates with named slots, loaded from data files.

Templates live as plain-text files next to a sidecar manifest declaring each
template's required slots. Rendering is a single substitution pass: slot
content is inserted verbatim and never re-scanned, so braces inside problem
statements cannot be mistaken for slot markers.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

TEMPLATE_IDS = (
    "teacher_math",
    "student_math",
    "teacher_code",
    "student_code",
    "self_debug",
    "m3_init",
    "m3_reflect",
    "m3_improve",
)

_SLOT_RE = re.compile(r"\{([a-z][a-z0-9_]*)\}")


class TemplateLookupError(KeyError):
    """Unknown template_id."""


class RenderError(ValueError):
    """A required slot was not bound."""


class ShotsError(FileNotFoundError):
    """Static-shots data file missing or malformed."""


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    required_slots: frozenset[str]


def _data_dir():
    return resources.files("lbt") / "data"


@lru_cache(maxsize=1)
def load_templates() -> dict[str, PromptTemplate]:
    base = _data_dir() / "templates"
    manifest = json.loads((base / "manifest.json").read_text(encoding="utf-8"))
    templates: dict[str, PromptTemplate] = {}
    for template_id, info in manifest.items():
        body = (base / info["file"]).read_text(encoding="utf-8")
        if body.endswith("\n"):
            body = body[:-1]
        required = frozenset(info["required_slots"])
        markers = frozenset(_SLOT_RE.findall(body))
        if markers != required:
            raise ValueError(
                f"template {template_id}: manifest slots {sorted(required)} "
                f"do not match body markers {sorted(markers)}"
            )
        templates[template_id] = PromptTemplate(template_id, body, required)
    return templates


def get_template(template_id: str) -> PromptTemplate:
    templates = load_templates()
    if template_id not in templates:
        raise TemplateLookupError(f"unknown template_id {template_id!r}")
    return templates[template_id]


def render(template_id: str, bindings: dict[str, str]) -> str:
    """Substitute every slot marker with its binding, verbatim."""
    template = get_template(template_id)
    missing = template.required_slots - bindings.keys()
    if missing:
        raise RenderError(
            f"template {template_id}: missing slot(s) {', '.join(sorted(missing))}"
        )

    def _fill(match: re.Match) -> str:
        return bindings[match.group(1)]

    return _SLOT_RE.sub(_fill, template.body)


@lru_cache(maxsize=None)
def load_static_shots(task: str) -> tuple[str, ...]:
    """Fixed in-context shot prefix for a task.

    Math carries a 4-shot prefix (shipped as a data file so it can be
    swapped); code prompts carry no static shots.
    """
    if task == "code":
        return ()
    if task != "math":
        raise ShotsError(f"no static shots defined for task {task!r}")
    path = _data_dir() / "shots_math.json"
    try:
        shots = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ShotsError(f"shots file missing: {path}") from e
    if not isinstance(shots, list) or not all(isinstance(s, str) for s in shots):
        raise ShotsError(f"shots file {path} must hold a JSON list of strings")
    return tuple(shots)


def joined_shots(task: str) -> str:
    """Shots joined the way the math templates embed them (blank line between)."""
    return "\n\n".join(load_static_shots(task))
