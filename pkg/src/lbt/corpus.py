"""Dataset ingestion (math variants, code plans, binary classification) and
embedding-based similar-problem selection.

File schemas are this project's own JSON/JSONL layouts, documented in the
README; converters from upstream dataset formats are left to scripts.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .code_exam import CodeProblem, TestCase
from .core import ExamProblem, M1Group
from .exemplar_opt import LABEL_NEGATIVE, LABEL_POSITIVE

logger = logging.getLogger(__name__)

# Shape of the full math-variants dataset; checked only on demand.
FULL_MATH_EXPECTED = {"test_problems": 500, "variant_tps": 181, "train_problems": 1564}


class IngestionError(ValueError):
    """Schema violation, reported with file and line."""

    def __init__(self, path, line: Optional[int], message: str):
        location = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{location}: {message}")


class SelectionError(ValueError):
    """Similar-problem selection could not be satisfied."""


class ProviderError(RuntimeError):
    """Embedding provider failed or returned malformed vectors."""


@dataclass(frozen=True)
class MathProblem:
    id: str
    statement: str
    gt_answer: str
    variant_group: str
    is_variant: bool
    split: str  # train | test
    difficulty_level: Optional[int] = None


@dataclass
class MathGroup:
    group_id: str
    base: Optional[MathProblem] = None
    variants: list[MathProblem] = field(default_factory=list)


@dataclass
class MathCorpus:
    problems: list[MathProblem]
    groups: dict[str, MathGroup]

    def summary(self) -> dict:
        test = [p for p in self.problems if p.split == "test"]
        train = [p for p in self.problems if p.split == "train"]
        variant_tps = sum(
            1
            for g in self.groups.values()
            if g.base is not None and g.base.split == "test" and len(g.variants) == 3
        )
        return {
            "problems": len(self.problems),
            "test_problems": len([p for p in test if not p.is_variant]),
            "train_problems": len([p for p in train if not p.is_variant]),
            "variant_tps": variant_tps,
        }


_MATH_REQUIRED = ("id", "statement", "gt_answer", "variant_group", "is_variant", "split")


def load_math_functional(path: str | Path) -> MathCorpus:
    """Load the JSONL math corpus, grouped by variant group."""
    path = Path(path)
    problems: list[MathProblem] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestionError(path, line_no, f"bad JSON: {e}") from e
            for key in _MATH_REQUIRED:
                if key not in row or row[key] in (None, ""):
                    raise IngestionError(path, line_no, f"missing field {key!r}")
            if row["split"] not in ("train", "test"):
                raise IngestionError(path, line_no, f"bad split {row['split']!r}")
            if row["id"] in seen:
                raise IngestionError(path, line_no, f"duplicate problem id {row['id']!r}")
            seen.add(row["id"])
            problems.append(
                MathProblem(
                    id=str(row["id"]),
                    statement=str(row["statement"]),
                    gt_answer=str(row["gt_answer"]),
                    variant_group=str(row["variant_group"]),
                    is_variant=bool(row["is_variant"]),
                    split=str(row["split"]),
                    difficulty_level=row.get("difficulty_level"),
                )
            )
    groups: dict[str, MathGroup] = {}
    for problem in problems:
        group = groups.setdefault(problem.variant_group, MathGroup(problem.variant_group))
        if problem.is_variant:
            group.variants.append(problem)
        else:
            if group.base is not None:
                raise IngestionError(
                    path, None, f"group {problem.variant_group!r} has two base problems"
                )
            group.base = problem
    corpus = MathCorpus(problems=problems, groups=groups)
    logger.info("loaded math corpus %s: %s", path, corpus.summary())
    return corpus


def m1_groups(
    corpus: MathCorpus,
    split: str = "test",
    expected_variants: Optional[int] = 3,
    tp_ids: Optional[Sequence[str]] = None,
) -> list[M1Group]:
    """Teaching problems with their variant exam problems, ready for a run."""
    wanted = set(tp_ids) if tp_ids else None
    out: list[M1Group] = []
    for group in sorted(corpus.groups.values(), key=lambda g: g.group_id):
        if group.base is None or group.base.split != split:
            continue
        if wanted is not None and group.base.id not in wanted:
            continue
        if not group.variants:
            continue
        if expected_variants is not None and len(group.variants) != expected_variants:
            raise IngestionError(
                "<corpus>",
                None,
                f"group {group.group_id!r} has {len(group.variants)} variants, "
                f"expected {expected_variants}",
            )
        eps = tuple(
            ExamProblem(ep_id=v.id, statement=v.statement, gt=v.gt_answer)
            for v in sorted(group.variants, key=lambda v: v.id)
        )
        out.append(
            M1Group(
                tp_id=group.base.id,
                statement=group.base.statement,
                gt=group.base.gt_answer,
                eps=eps,
            )
        )
    return out


def check_full_math_counts(corpus: MathCorpus) -> dict:
    """Compare loaded counts with the full dataset's expected shape."""
    actual = corpus.summary()
    return {
        key: {"expected": expected, "actual": actual.get(key)}
        for key, expected in FULL_MATH_EXPECTED.items()
    }


@dataclass
class CodePlan:
    name: str
    problems: list[CodeProblem]
    warnings: list[str] = field(default_factory=list)


def load_code_plan(path: str | Path, allow_empty_hidden: bool = False) -> CodePlan:
    """Load one study-plan JSON file of code problems with their tests.

    Problems with a single visible test are kept with a warning (the source
    data promises 2-3); empty hidden tests are allowed only in fixture mode,
    where the S-score is flagged unavailable.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise IngestionError(path, None, f"bad JSON: {e}") from e
    if "problems" not in data or not isinstance(data["problems"], list):
        raise IngestionError(path, None, "missing 'problems' list")
    plan = CodePlan(name=str(data.get("plan", path.stem)), problems=[])
    seen: set[str] = set()
    for row in data["problems"]:
        for key in ("id", "title_abbrev", "statement", "entry_point", "visible_tests"):
            if key not in row:
                raise IngestionError(path, None, f"problem missing field {key!r}")
        if row["id"] in seen:
            raise IngestionError(path, None, f"duplicate problem id {row['id']!r}")
        seen.add(row["id"])
        visible = tuple(TestCase(t["input"], t["expected"]) for t in row["visible_tests"])
        hidden = tuple(TestCase(t["input"], t["expected"]) for t in row.get("hidden_tests", []))
        if len(visible) < 2:
            plan.warnings.append(
                f"{row['id']}: {len(visible)} visible test(s), expected 2-3"
            )
        if not hidden:
            if not allow_empty_hidden:
                raise IngestionError(
                    path, None, f"problem {row['id']!r} has no hidden tests"
                )
            plan.warnings.append(f"{row['id']}: no hidden tests, S-score unavailable")
        plan.problems.append(
            CodeProblem(
                id=str(row["id"]),
                title_abbrev=str(row["title_abbrev"]),
                statement=str(row["statement"]),
                entry_point=str(row["entry_point"]),
                visible_tests=visible,
                hidden_tests=hidden,
            )
        )
    for warning in plan.warnings:
        logger.warning("%s: %s", path, warning)
    return plan


@dataclass(frozen=True)
class ClassificationItem:
    id: str
    statement: str
    gold: str  # positive | negative
    split: str  # train | dev | test


@dataclass
class ClassificationTask:
    name: str
    question: str
    items: list[ClassificationItem]

    def pairs(self, splits: Sequence[str]) -> list[tuple[str, str]]:
        return [(i.statement, i.gold) for i in self.items if i.split in splits]

    @property
    def train(self) -> list[tuple[str, str]]:
        return self.pairs(("train",))

    @property
    def eval_items(self) -> list[tuple[str, str]]:
        # Dev and test splits are reported combined.
        return self.pairs(("dev", "test"))


_CLS_REQUIRED = ("id", "statement", "gold", "split")


def load_classification(path: str | Path, question: str, name: str = "") -> ClassificationTask:
    """Load a JSONL binary classification corpus.

    Optional speaker/context fields are folded into the statement so the
    classifier prompt sees them.
    """
    path = Path(path)
    items: list[ClassificationItem] = []
    with path.open(encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestionError(path, line_no, f"bad JSON: {e}") from e
            for key in _CLS_REQUIRED:
                if key not in row or row[key] in (None, ""):
                    raise IngestionError(path, line_no, f"missing field {key!r}")
            gold = str(row["gold"]).lower()
            if gold not in (LABEL_POSITIVE, LABEL_NEGATIVE):
                raise IngestionError(path, line_no, f"bad gold label {row['gold']!r}")
            if row["split"] not in ("train", "dev", "test"):
                raise IngestionError(path, line_no, f"bad split {row['split']!r}")
            statement = str(row["statement"])
            if row.get("speaker"):
                statement = f"{statement} (Speaker: {row['speaker']})"
            if row.get("context"):
                statement = f"{statement} (Context: {row['context']})"
            items.append(
                ClassificationItem(
                    id=str(row["id"]), statement=statement, gold=gold, split=str(row["split"])
                )
            )
    return ClassificationTask(name=name or path.stem, question=question, items=items)


class EmbeddingProvider:
    provider_id: str = ""
    dimension: int = 0

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        raise NotImplementedError


class FixtureEmbeddingProvider(EmbeddingProvider):
    """Exact-match table of text -> vector; anything outside it is an error."""

    def __init__(self, table: dict[str, Sequence[float]], provider_id: str = "fixture"):
        if not table:
            raise ValueError("fixture table must be non-empty")
        self.table = {k: np.asarray(v, dtype=float) for k, v in table.items()}
        dims = {v.shape[0] for v in self.table.values()}
        if len(dims) != 1:
            raise ValueError(f"fixture vectors have mixed dimensions: {sorted(dims)}")
        self.dimension = dims.pop()
        self.provider_id = provider_id

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        vectors = []
        for text in texts:
            if text not in self.table:
                raise ProviderError(f"no fixture embedding for text {text[:60]!r}")
            vectors.append(self.table[text])
        return np.stack(vectors) if vectors else np.zeros((0, self.dimension))


class HttpEmbeddingProvider(EmbeddingProvider):
    """HTTP provider speaking {texts: [...]} -> {vectors: [[...]]}."""

    def __init__(self, base_url: str, dimension: int, provider_id: str = "http", post_fn=None):
        import requests

        self.base_url = base_url.rstrip("/")
        self.dimension = dimension
        self.provider_id = provider_id
        self._post = post_fn or requests.post

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        resp = self._post(f"{self.base_url}/embed", json={"texts": list(texts)}, timeout=120)
        if getattr(resp, "status_code", 200) != 200:
            raise ProviderError(f"embedding provider HTTP {resp.status_code}")
        try:
            vectors = np.asarray(resp.json()["vectors"], dtype=float)
        except (ValueError, KeyError, TypeError) as e:
            raise ProviderError(f"malformed embedding response: {e}") from e
        if vectors.ndim != 2 or vectors.shape != (len(texts), self.dimension):
            raise ProviderError(
                f"expected {(len(texts), self.dimension)} vectors, got {vectors.shape}"
            )
        return vectors


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0:
        raise ProviderError("zero-norm embedding vector")
    return float(1.0 - float(np.dot(a, b)) / denom)


def select_similar_eps(
    tp: MathProblem,
    pool: Sequence[MathProblem],
    provider: EmbeddingProvider,
    k: int = 2,
) -> list[tuple[MathProblem, float]]:
    """k nearest pool problems by cosine distance on statement embeddings.

    The teaching problem itself is excluded; ties break on problem id.
    """
    candidates = [p for p in pool if p.id != tp.id]
    if k > len(candidates):
        raise SelectionError(f"k={k} exceeds usable pool size {len(candidates)}")
    vectors = provider.embed([tp.statement] + [p.statement for p in candidates])
    tp_vec = vectors[0]
    scored = sorted(
        ((cosine_distance(tp_vec, vectors[i + 1]), p.id, p) for i, p in enumerate(candidates)),
        key=lambda t: (t[0], t[1]),
    )
    return [(p, distance) for distance, _, p in scored[:k]]


def rank_tps_by_ep_distance(
    tps: Sequence[MathProblem],
    pool: Sequence[MathProblem],
    provider: EmbeddingProvider,
    k: int = 2,
) -> list[tuple[MathProblem, float]]:
    """TPs ordered by mean distance to their k closest pool problems."""
    ranked = []
    for tp in tps:
        nearest = select_similar_eps(tp, pool, provider, k)
        mean_distance = sum(d for _, d in nearest) / len(nearest)
        ranked.append((tp, mean_distance))
    ranked.sort(key=lambda t: (t[1], t[0].id))
    return ranked


def closest_fraction(
    ranked: Sequence[tuple[MathProblem, float]], fraction: float
) -> list[tuple[MathProblem, float]]:
    """The closest share of a ranked TP list (for the fraction-sweep report)."""
    if not (0 < fraction <= 1):
        raise ValueError("fraction must be in (0, 1]")
    count = max(1, round(len(ranked) * fraction))
    return list(ranked[:count])
