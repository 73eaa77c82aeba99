"""Preference-pair mining over scored teaching records, for DPO training.

Each record's blended score is half correctness, half teaching score. Pairs
whose score difference strictly exceeds the threshold become (winner, loser)
rows; the largest differences win when the per-problem budget is tight.
Training itself is out of scope: this module emits the dataset plus a
hyperparameter manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .core import TeachingRecord

DEFAULT_THRESHOLD = 0.3
DEFAULT_MAX_PAIRS = 8


class ScoringError(ValueError):
    """Record is missing correctness or its teaching score."""


@dataclass(frozen=True)
class DpoManifest:
    learning_rate: float = 5e-7
    batch_size: int = 16
    epochs: int = 1
    beta: float = 0.1
    nll_weight: int = 50

    def to_json(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "beta": self.beta,
            "nll_weight": self.nll_weight,
        }


@dataclass(frozen=True)
class ScoredSide:
    tr: str
    ta: str
    blended_score: float
    sample_index: int
    completion_text: str


@dataclass(frozen=True)
class PreferencePair:
    tp_id: str
    prompt: str
    winner: ScoredSide
    loser: ScoredSide

    @property
    def diff(self) -> float:
        return self.winner.blended_score - self.loser.blended_score

    def to_json(self) -> dict:
        return {
            "prompt": self.prompt,
            "chosen": self.winner.completion_text,
            "rejected": self.loser.completion_text,
            "meta": {
                "tp_id": self.tp_id,
                "winner_score": self.winner.blended_score,
                "loser_score": self.loser.blended_score,
            },
        }


def blended_score(record: TeachingRecord) -> float:
    """Half correctness, half teaching score; both components required."""
    if record.correctness is None or record.per_pair_lbt is None:
        raise ScoringError(
            f"record {record.tp_id}#{record.sample_index} lacks correctness or teaching score"
        )
    return 0.5 * record.correctness + 0.5 * float(record.per_pair_lbt)


def _side(record: TeachingRecord, score: float) -> ScoredSide:
    return ScoredSide(
        tr=record.tr,
        ta=record.ta_text,
        blended_score=score,
        sample_index=record.sample_index,
        completion_text=record.completion_text,
    )


def build_pairs(
    records: Sequence[TeachingRecord],
    prompt: str,
    threshold: float = DEFAULT_THRESHOLD,
    max_pairs: int = DEFAULT_MAX_PAIRS,
    disjoint: bool = False,
) -> list[PreferencePair]:
    """Select up to max_pairs ordered pairs with score difference > threshold.

    Candidates are ranked by descending difference, then by (winner, loser)
    sample index. A record may appear in several pairs unless disjoint is set.
    Zero eligible pairs is a valid outcome.
    """
    scored = [(r, blended_score(r)) for r in records if r.valid]
    candidates: list[tuple[float, int, int, PreferencePair]] = []
    for wi, (winner, ws) in enumerate(scored):
        for li, (loser, ls) in enumerate(scored):
            if wi == li:
                continue
            diff = ws - ls
            if diff > threshold:
                pair = PreferencePair(
                    tp_id=winner.tp_id,
                    prompt=prompt,
                    winner=_side(winner, ws),
                    loser=_side(loser, ls),
                )
                candidates.append(
                    (-diff, winner.sample_index, loser.sample_index, pair)
                )
    candidates.sort(key=lambda c: c[:3])
    selected: list[PreferencePair] = []
    used: set[int] = set()
    for _, wi, li, pair in candidates:
        if len(selected) >= max_pairs:
            break
        if disjoint and (wi in used or li in used):
            continue
        selected.append(pair)
        used.update((wi, li))
    return selected


def emit_dpo_dataset(
    pairs: Sequence[PreferencePair],
    manifest: DpoManifest,
    dataset_path: str | Path,
    manifest_path: str | Path,
    allow_empty: bool = False,
) -> None:
    """Write the dataset JSONL plus the sidecar hyperparameter manifest.

    Rows are sorted by (tp_id, diff descending, sample indices) so a rerun
    with identical inputs reproduces the file byte for byte.
    """
    if not pairs and not allow_empty:
        raise ValueError("refusing to emit an empty dataset without allow_empty")
    ordered = sorted(
        pairs,
        key=lambda p: (p.tp_id, -p.diff, p.winner.sample_index, p.loser.sample_index),
    )
    with open(dataset_path, "w", encoding="utf-8") as f:
        for pair in ordered:
            f.write(json.dumps(pair.to_json(), sort_keys=True, ensure_ascii=False) + "\n")
    Path(manifest_path).write_text(
        json.dumps(manifest.to_json(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
