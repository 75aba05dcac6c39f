"""Discipline classification, difficulty scoring, stratified sampling and label agreement."""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Hashable, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import templates
from ._util import extract_json_object, sha_hex, stable_hash
from .gateway import BatchError, Gateway, GatewayError, PromptRequest

DISCIPLINES: tuple[str, ...] = tuple(templates.discipline_list())
SPECIAL_LABELS = ("cross-discipline", "Other", "Invalid")
VOCABULARY: frozenset = frozenset(DISCIPLINES) | frozenset(SPECIAL_LABELS)
_CANON = {d.lower(): d for d in VOCABULARY}

STEM_DISCIPLINES = frozenset({
    "Mathematics", "Physics", "Chemistry", "Biology", "Computer Science and Technology",
    "Mechanics", "Materials Science", "Statistics",
})

OTHER_CONFIDENCE = 0.6

TIERS = ("basic", "standard", "improvement", "challenge", "extreme", "other")
H_LEVELS = ("H1", "H2", "H3", "H4", "H5")
TIER_TO_H = {"basic": "H1", "standard": "H2", "improvement": "H3",
             "challenge": "H4", "extreme": "H5", "other": "none"}
H_TO_TIER = {v: k for k, v in TIER_TO_H.items()}
# left-closed [lo, hi) pass-rate bands; basic also includes p == 1
TIER_BANDS = {
    "extreme": (0.0, 0.10),
    "challenge": (0.10, 0.30),
    "improvement": (0.30, 0.50),
    "standard": (0.50, 0.80),
    "basic": (0.80, 1.0),
}

_PASS_RATE = re.compile(r"pass rate[^0-9]*([0-9]+(?:\.[0-9]+)?)\s*(%?)", re.I)


class DomainError(ValueError):
    pass


class KeyMismatch(ValueError):
    pass


def tier_from_pass_rate(p: float) -> str:
    """Map a pass rate in [0, 1] to its difficulty tier (left-closed bands)."""
    if not 0.0 <= p <= 1.0 or p != p:
        raise DomainError(f"pass rate must be in [0, 1], got {p}")
    if p < 0.10:
        return "extreme"
    if p < 0.30:
        return "challenge"
    if p < 0.50:
        return "improvement"
    if p < 0.80:
        return "standard"
    return "basic"


def in_band(tier: str, p: float) -> bool:
    if tier not in TIER_BANDS:
        return False
    lo, hi = TIER_BANDS[tier]
    return lo <= p < hi or (tier == "basic" and p == 1.0)


@dataclass(frozen=True)
class DisciplineLabel:
    primary_discipline: str
    secondary_discipline: Optional[str] = None
    confidence: float = 0.0
    rejection_reason: Optional[str] = None
    parse_retries: int = 0

    def __post_init__(self) -> None:
        if self.primary_discipline not in VOCABULARY:
            raise ValueError(f"{self.primary_discipline!r} not in discipline vocabulary")
        if self.primary_discipline == "Invalid" and not self.rejection_reason:
            raise ValueError("Invalid labels need a rejection_reason")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DifficultyLabel:
    tier: str
    rationale: tuple[str, ...] = ()
    pass_rate_estimate: Optional[float] = None
    band_consistent: Optional[bool] = None
    parse_retries: int = 0
    error: Optional[str] = None

    def __post_init__(self) -> None:
        if self.tier not in TIERS:
            raise ValueError(f"unknown tier {self.tier!r}")

    @property
    def h_level(self) -> str:
        return TIER_TO_H[self.tier]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rationale"] = list(self.rationale)
        d["h_level"] = self.h_level
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DifficultyLabel":
        d = dict(d)
        d.pop("h_level", None)
        d["rationale"] = tuple(d.get("rationale", ()))
        return cls(**d)


@dataclass(frozen=True)
class AnnotatedSeed:
    """A seed (or any record) with its dual annotation."""

    record: object
    discipline: DisciplineLabel
    difficulty: DifficultyLabel

    @property
    def record_id(self) -> str:
        r = self.record
        return getattr(r, "seed_id", None) or getattr(r, "qa_id")

    @property
    def h_level(self) -> str:
        return self.difficulty.h_level

    def to_dict(self) -> dict:
        return {"record": self.record.to_dict(), "discipline": self.discipline.to_dict(),
                "difficulty": self.difficulty.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "AnnotatedSeed":
        from .ingest import SeedRecord

        return cls(SeedRecord.from_dict(d["record"]), DisciplineLabel(**d["discipline"]),
                   DifficultyLabel.from_dict(d["difficulty"]))


@dataclass(frozen=True)
class StratumQuota:
    stratum_key: Hashable
    target_count: int

    def __post_init__(self) -> None:
        if self.target_count < 1:
            raise ValueError("target_count must be >= 1")


# --- prompt rendering -----------------------------------------------------

def seed_data_text(record) -> str:
    if hasattr(record, "prompt_text"):
        return record.prompt_text()
    if getattr(record, "source_kind", None) == "qa_pair":
        return f"Question: {record.question}\nAnswer: {record.answer}"
    if hasattr(record, "body") and record.body:
        return record.body
    if isinstance(record, str):
        return record
    raise TypeError(f"cannot render {type(record).__name__} as seed data")


def _rid(record) -> str:
    return getattr(record, "seed_id", None) or getattr(record, "qa_id", None) or sha_hex(seed_data_text(record))


def discipline_request(record, attempt: int = 0) -> PromptRequest:
    text = templates.fill(templates.load_text("discipline_classifier.txt"), {
        "Discipline List": str(list(DISCIPLINES)),
        "Seed Data": seed_data_text(record),
    })
    suffix = f"-retry{attempt}" if attempt else ""
    return PromptRequest(f"disc-{_rid(record)}{suffix}", text)


def difficulty_request(record, attempt: int = 0) -> PromptRequest:
    text = templates.fill(templates.load_text("difficulty_scorer.txt"), {"Seed Data": seed_data_text(record)})
    suffix = f"-retry{attempt}" if attempt else ""
    return PromptRequest(f"diff-{_rid(record)}{suffix}", text)


# --- response parsing ------------------------------------------------------

class _ParseFailure(ValueError):
    pass


def parse_discipline(text: str, retries: int = 0) -> DisciplineLabel:
    try:
        obj = extract_json_object(text)
    except ValueError as exc:
        raise _ParseFailure(str(exc)) from exc
    primary = obj.get("primary_discipline")
    if not isinstance(primary, str) or not primary.strip():
        raise _ParseFailure("missing primary_discipline")
    conf = obj.get("confidence", 0.0)
    try:
        conf = float(conf)
    except (TypeError, ValueError):
        conf = 0.0
    conf = min(max(conf, 0.0), 1.0)
    secondary = obj.get("secondary_discipline")
    secondary = secondary if isinstance(secondary, str) and secondary else None
    reason = obj.get("rejection_reason")
    canon = _CANON.get(primary.strip().lower())
    if canon is None:
        return DisciplineLabel("Invalid", secondary, conf, "unknown discipline", retries)
    if canon == "Invalid":
        return DisciplineLabel("Invalid", secondary, conf, reason or "non-educational content", retries)
    if canon in DISCIPLINES and conf < OTHER_CONFIDENCE:
        return DisciplineLabel("Other", secondary, conf, None, retries)
    return DisciplineLabel(canon, secondary, conf, None, retries)


def parse_pass_rate(rationale: Sequence[str]) -> Optional[float]:
    for line in rationale:
        m = _PASS_RATE.search(str(line))
        if m:
            val = float(m.group(1))
            if m.group(2) == "%" or val > 1.0:
                val /= 100.0
            if 0.0 <= val <= 1.0:
                return val
    return None


def parse_difficulty(text: str, retries: int = 0) -> DifficultyLabel:
    try:
        obj = extract_json_object(text)
    except ValueError as exc:
        raise _ParseFailure(str(exc)) from exc
    tier = obj.get("difficulty_tier")
    if not isinstance(tier, str) or tier.strip().lower() not in TIERS:
        raise _ParseFailure(f"unknown difficulty_tier {tier!r}")
    tier = tier.strip().lower()
    rationale = obj.get("rationale") or []
    if isinstance(rationale, str):
        rationale = [rationale]
    rationale = tuple(str(r) for r in rationale)
    p = parse_pass_rate(rationale)
    consistent = None if p is None or tier == "other" else in_band(tier, p)
    return DifficultyLabel(tier, rationale, p, consistent, retries)


# --- backend-driven annotation --------------------------------------------

def _annotate_batch(records: Sequence, gateway: Gateway, make_request: Callable, parse: Callable,
                    degrade: Callable[[str, int], object]) -> list:
    """One call per record, a single re-ask on parse failure, then degrade."""
    results: list = [None] * len(records)
    pending = list(range(len(records)))
    for attempt in (0, 1):
        if not pending:
            break
        responses = gateway.complete_batch([make_request(records[i], attempt) for i in pending])
        retry = []
        for i, resp in zip(pending, responses):
            if isinstance(resp, BatchError):
                results[i] = degrade(f"backend error: {resp.error}", attempt)
                continue
            try:
                results[i] = parse(resp.text, attempt)
            except _ParseFailure as exc:
                if attempt == 0:
                    retry.append(i)
                else:
                    results[i] = degrade(f"unparsable response: {exc}", attempt)
        pending = retry
    return results


def _degrade_discipline(reason: str, retries: int) -> DisciplineLabel:
    return DisciplineLabel("Invalid", None, 0.0, reason, retries)


def _degrade_difficulty(reason: str, retries: int) -> DifficultyLabel:
    return DifficultyLabel("other", (), None, None, retries, error=reason)


def classify_discipline_batch(records: Sequence, gateway: Gateway) -> list[DisciplineLabel]:
    return _annotate_batch(records, gateway, discipline_request, parse_discipline, _degrade_discipline)


def score_difficulty_batch(records: Sequence, gateway: Gateway) -> list[DifficultyLabel]:
    return _annotate_batch(records, gateway, difficulty_request, parse_difficulty, _degrade_difficulty)


def classify_discipline(record, gateway: Gateway) -> DisciplineLabel:
    return classify_discipline_batch([record], gateway)[0]


def score_difficulty(record, gateway: Gateway) -> DifficultyLabel:
    return score_difficulty_batch([record], gateway)[0]


def annotate_records(records: Sequence, gateway: Gateway) -> list[AnnotatedSeed]:
    disc = classify_discipline_batch(records, gateway)
    diff = score_difficulty_batch(records, gateway)
    return [AnnotatedSeed(r, a, b) for r, a, b in zip(records, disc, diff)]


def is_question(ann: AnnotatedSeed) -> bool:
    """Items scored "other" belong to the non-question bucket."""
    return ann.difficulty.tier != "other" and ann.discipline.primary_discipline != "Invalid"


# --- sampling and agreement ------------------------------------------------

@dataclass
class StratifiedSample:
    items: list
    shortfall: dict = field(default_factory=dict)  # stratum -> missing count


def stratified_sample(labeled: Iterable, quotas: Sequence[StratumQuota], rng_seed: int,
                      key: Callable[[object], Hashable] = lambda a: a.discipline.primary_discipline,
                      ) -> StratifiedSample:
    """Uniform sampling without replacement inside each stratum, ``min(target, available)`` per stratum."""
    groups: dict = defaultdict(list)
    for item in labeled:
        groups[key(item)].append(item)
    out = StratifiedSample([])
    for q in quotas:
        pool = groups.get(q.stratum_key, [])
        take = min(q.target_count, len(pool))
        if take < q.target_count:
            out.shortfall[q.stratum_key] = q.target_count - take
        if take == 0:
            continue
        rng = np.random.default_rng([rng_seed, stable_hash(q.stratum_key) & 0xFFFFFFFF])
        idx = np.sort(rng.choice(len(pool), size=take, replace=False))
        out.items.extend(pool[i] for i in idx)
    return out


def label_consistency(a: Mapping[str, object], b: Mapping[str, object]) -> float:
    """Fraction of ids whose primary discipline agrees between two labelings."""
    if set(a) != set(b):
        raise KeyMismatch(f"label sets differ on {len(set(a) ^ set(b))} ids")
    if not a:
        raise KeyMismatch("no labels to compare")

    def prim(x) -> str:
        return x.primary_discipline if isinstance(x, DisciplineLabel) else str(x)

    agree = sum(prim(a[k]) == prim(b[k]) for k in a)
    return agree / len(a)
