"""Few-shot mastery probes per (discipline, difficulty) cell."""

from __future__ import annotations

import csv
import json
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import templates
from ._util import fold_text, stable_hash
from .gateway import BatchError, Gateway, PromptRequest

OPTION_LETTERS = "ABCD"
_CHOICE = re.compile(r"(?:^|answer\s*(?:is)?\s*[:：]?\s*)\(?([A-Da-d])(?:[\.\):：]|\s|$)", re.I)
_LEADING_CHOICE = re.compile(r"^\s*\(?([A-Da-d])(?:[\.\):：]|\s|$)")
_INDEX = re.compile(r"^\s*([0-3])\s*$")


class InsufficientExemplars(ValueError):
    pass


@dataclass(frozen=True)
class ProbeItem:
    item_id: str
    question: str
    answer: str  # gold answer text; for MCQs "B. option text" or just the letter
    discipline: str
    h_level: str
    options: Optional[tuple[str, ...]] = None
    answer_index: Optional[int] = None

    @property
    def is_mcq(self) -> bool:
        return self.options is not None

    def render(self, with_answer: bool) -> str:
        lines = [f"Question: {self.question}"]
        if self.options:
            lines += [f"{OPTION_LETTERS[i]}. {o}" for i, o in enumerate(self.options)]
        lines.append(f"Answer: {self.gold_text()}" if with_answer else "Answer:")
        return "\n".join(lines)

    def gold_text(self) -> str:
        if self.options is not None and self.answer_index is not None:
            return f"{OPTION_LETTERS[self.answer_index]}. {self.options[self.answer_index]}"
        return self.answer

    @classmethod
    def from_synthesized(cls, qa) -> "ProbeItem":
        from .synthesize import McqItem

        disc = qa.discipline.primary_discipline if qa.discipline else "Other"
        lvl = qa.difficulty.h_level if qa.difficulty else "none"
        if isinstance(qa.item, McqItem):
            return cls(qa.qa_id, qa.item.question, qa.item.answer_text, disc, lvl,
                       tuple(qa.item.options), qa.item.answer_index)
        return cls(qa.qa_id, qa.item.question, qa.item.answer, disc, lvl)

    @classmethod
    def from_annotated(cls, ann) -> "ProbeItem":
        rec = ann.record
        if getattr(rec, "source_kind", None) != "qa_pair":
            raise ValueError("only QA seeds can be probed")
        return cls(rec.seed_id, rec.question, rec.answer, ann.discipline.primary_discipline, ann.h_level)


@dataclass(frozen=True)
class ProbeConfig:
    exemplar_pool: Sequence[ProbeItem]
    trials: int = 10
    shots: int = 5
    grading: Optional[str] = None  # None: choice_letter for MCQ, exact_match otherwise

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ValueError("trials must be positive")
        if self.shots < 0:
            raise ValueError("shots must be non-negative")
        if self.grading not in (None, "exact_match", "choice_letter"):
            raise ValueError(f"unknown grading {self.grading!r}")

    def grading_for(self, item: ProbeItem) -> str:
        return self.grading or ("choice_letter" if item.is_mcq else "exact_match")


@dataclass
class ProbeResult:
    cell: tuple[str, str, str]  # (discipline, h_level, checkpoint_tag)
    item_ids: list[str]
    per_trial_correct: list[list[Optional[bool]]]  # None = ungraded (backend error)
    grading: dict = field(default_factory=dict)

    @property
    def item_count(self) -> int:
        return len(self.item_ids)

    @property
    def graded(self) -> int:
        return sum(v is not None for row in self.per_trial_correct for v in row)

    @property
    def ungraded(self) -> int:
        return sum(v is None for row in self.per_trial_correct for v in row)

    @property
    def accuracy(self) -> float:
        g = self.graded
        if g == 0:
            return float("nan")
        return sum(v is True for row in self.per_trial_correct for v in row) / g


def _candidate_pool(item: ProbeItem, pool: Sequence[ProbeItem], shots: int) -> list[ProbeItem]:
    others = [e for e in pool if e.item_id != item.item_id and fold_text(e.question) != fold_text(item.question)]
    same = [e for e in others if e.discipline == item.discipline]
    return same if len(same) >= shots + 1 else others


def exemplar_sets(item: ProbeItem, config: ProbeConfig, rng_seed: int) -> list[tuple[int, ...]]:
    """Pairwise-distinct exemplar index sets for every trial of one item."""
    cand = _candidate_pool(item, config.exemplar_pool, config.shots)
    if config.shots == 0:
        return [()] * config.trials
    if len(cand) < config.shots:
        raise InsufficientExemplars(f"{len(cand)} exemplars available, {config.shots} needed")
    from math import comb

    if comb(len(cand), config.shots) < config.trials:
        raise InsufficientExemplars(
            f"only {comb(len(cand), config.shots)} distinct {config.shots}-shot sets for {config.trials} trials")
    rng = np.random.default_rng([rng_seed, stable_hash(item.item_id) & 0xFFFFFFFF])
    sets: list[tuple[int, ...]] = []
    seen: set[frozenset] = set()
    while len(sets) < config.trials:
        pick = tuple(int(i) for i in rng.choice(len(cand), size=config.shots, replace=False))
        key = frozenset(pick)
        if key in seen:
            continue
        seen.add(key)
        sets.append(pick)
    return sets


def build_fewshot_prompt(item: ProbeItem, config: ProbeConfig, trial_index: int, rng_seed: int,
                         request_prefix: str = "probe") -> PromptRequest:
    if not 0 <= trial_index < config.trials:
        raise ValueError(f"trial_index {trial_index} outside [0, {config.trials})")
    cand = _candidate_pool(item, config.exemplar_pool, config.shots)
    picks = exemplar_sets(item, config, rng_seed)[trial_index]
    blocks = [templates.PROBE_MARKER + "."]
    blocks += [cand[i].render(with_answer=True) for i in picks]
    blocks.append(item.render(with_answer=False))
    return PromptRequest(f"{request_prefix}-{item.item_id}-t{trial_index}", "\n\n".join(blocks),
                         decode_mode="greedy")


def _final_answer(text: str) -> str:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        return ""
    first = re.sub(r"^\s*answer\s*[:：]\s*", "", lines[0], flags=re.I)
    return first


def extract_choice(text: str) -> Optional[int]:
    ans = _final_answer(text)
    m = _INDEX.match(ans)
    if m:
        return int(m.group(1))
    m = _LEADING_CHOICE.match(ans) or _CHOICE.search(text)
    if m:
        return OPTION_LETTERS.index(m.group(1).upper())
    return None


def _gold_index(gold: ProbeItem) -> Optional[int]:
    if gold.answer_index is not None:
        return gold.answer_index
    return extract_choice(gold.answer)


def grade(response: str, gold: ProbeItem, grading: str) -> bool:
    if grading == "choice_letter":
        got = extract_choice(response)
        want = _gold_index(gold)
        return got is not None and got == want
    if grading == "exact_match":
        return fold_text(_final_answer(response)) == fold_text(gold.answer) != ""
    raise ValueError(f"unknown grading {grading!r}")


def run_probe(items: Sequence[ProbeItem], config: ProbeConfig, gateway: Gateway, checkpoint_tag: str,
              rng_seed: int = 0) -> list[ProbeResult]:
    """trials x greedy completions per item, graded and grouped by (discipline, h_level)."""
    reqs: list[PromptRequest] = []
    for it in items:
        for t in range(config.trials):
            reqs.append(build_fewshot_prompt(it, config, t, rng_seed, request_prefix=f"probe-{checkpoint_tag}"))
    responses = gateway.complete_batch(reqs)
    cells: dict = defaultdict(lambda: ([], []))
    k = 0
    for it in items:
        row: list[Optional[bool]] = []
        g = config.grading_for(it)
        for _ in range(config.trials):
            resp = responses[k]
            k += 1
            row.append(None if isinstance(resp, BatchError) else grade(resp.text, it, g))
        ids, rows = cells[(it.discipline, it.h_level, checkpoint_tag)]
        ids.append(it.item_id)
        rows.append(row)
    out = []
    for cell in sorted(cells):
        ids, rows = cells[cell]
        out.append(ProbeResult(cell, ids, rows, {"exact_match": "folded final answer",
                                                 "choice_letter": "first option letter"}))
    return out


def by_level(results: Iterable[ProbeResult]) -> dict[str, float]:
    """Pool cells across disciplines into one accuracy per h_level."""
    num: dict = defaultdict(int)
    den: dict = defaultdict(int)
    for r in results:
        lvl = r.cell[1]
        num[lvl] += sum(v is True for row in r.per_trial_correct for v in row)
        den[lvl] += r.graded
    return {lvl: num[lvl] / den[lvl] for lvl in sorted(den) if den[lvl]}


def write_results(results: Sequence[ProbeResult], out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, jsonl_path = out_dir / "probe_results.csv", out_dir / "probe_results.jsonl"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["discipline", "h_level", "checkpoint_tag", "item_count", "accuracy", "ungraded"])
        for r in results:
            w.writerow([*r.cell, r.item_count, repr(r.accuracy), r.ungraded])
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps({"cell": list(r.cell), "item_ids": r.item_ids, "accuracy": r.accuracy,
                                 "per_trial_correct": r.per_trial_correct, "grading": r.grading}) + "\n")
    return csv_path, jsonl_path
