"""Discipline/difficulty distributions, path comparisons and stage-alignment checks."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import templates
from ._util import extract_json_object, stable_hash
from .gateway import BatchError, Gateway, PromptRequest

TIER_KEYS = ("H1", "H2", "H3", "H4", "H5", "none")
STAGES = ("primary", "junior_high", "high_school", "college", "graduate", "other")
TARGET_STAGES = ("high_school", "college", "graduate")
DEFAULT_PER_STAGE = 10_000


class EmptyDataset(ValueError):
    pass


@dataclass
class DistributionReport:
    dataset_tag: str
    by_discipline: dict[str, float]
    by_tier: dict[str, float]
    h4h5_share: float
    sample_size: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DistributionReport":
        return cls(d["dataset_tag"], dict(d["by_discipline"]), dict(d["by_tier"]),
                   float(d["h4h5_share"]), int(d["sample_size"]))


def _labels_of(x) -> tuple[str, str]:
    if isinstance(x, tuple) and len(x) == 2 and all(isinstance(v, str) for v in x):
        return x
    if isinstance(x, Mapping):
        return x["discipline"], x["h_level"]
    disc = getattr(x, "discipline", None)
    diff = getattr(x, "difficulty", None)
    d = disc.primary_discipline if disc is not None else "Other"
    h = diff.h_level if diff is not None else "none"
    return d, h


def distribution(dataset: Iterable, tag: str) -> DistributionReport:
    """Exact shares over disciplines and tiers; "none"/"Other" buckets stay in the denominator."""
    disc_counts: Counter = Counter()
    tier_counts: Counter = Counter()
    n = 0
    for x in dataset:
        d, h = _labels_of(x)
        disc_counts[d] += 1
        tier_counts[h if h in TIER_KEYS else "none"] += 1
        n += 1
    if n == 0:
        raise EmptyDataset(f"dataset {tag!r} is empty")
    by_disc = {k: disc_counts[k] / n for k in sorted(disc_counts, key=lambda k: (-disc_counts[k], k))}
    by_tier = {k: tier_counts[k] / n for k in TIER_KEYS}
    h45 = (tier_counts["H4"] + tier_counts["H5"]) / n
    return DistributionReport(tag, by_disc, by_tier, h45, n)


@dataclass
class DifficultyComparison:
    a_tag: str
    b_tag: str
    deltas: dict[str, float]
    h4h5_ratio: Optional[float]
    ratio_defined: bool

    def to_dict(self) -> dict:
        return asdict(self)


def compare_difficulty(a: DistributionReport, b: DistributionReport) -> DifficultyComparison:
    """Per-tier deltas ``b - a`` and the H4/H5 share ratio ``b / a`` (undefined when a has none)."""
    if set(a.by_tier) != set(b.by_tier):
        raise ValueError("reports use different tier vocabularies")
    deltas = {k: b.by_tier[k] - a.by_tier[k] for k in a.by_tier}
    if a.h4h5_share == 0:
        return DifficultyComparison(a.dataset_tag, b.dataset_tag, deltas, None, False)
    return DifficultyComparison(a.dataset_tag, b.dataset_tag, deltas, b.h4h5_share / a.h4h5_share, True)


# --- stage alignment -------------------------------------------------------

@dataclass
class StageAlignmentTable:
    targeted_stage: str
    match_accuracy: float
    actual_distribution: dict[str, float]
    sample_size: int
    judged: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def stage_request(item, targeted_stage: str) -> PromptRequest:
    question = item.prompt_text() if hasattr(item, "prompt_text") else str(item)
    text = templates.fill(templates.load_text("stage_judge.txt"),
                          {"Targeted Stage": targeted_stage, "Question": question})
    rid = getattr(item, "qa_id", None) or f"h{stable_hash(question):x}"
    return PromptRequest(f"stage-{targeted_stage}-{rid}", text)


def _targeted(item) -> str:
    lineage = getattr(item, "lineage", None)
    if lineage is not None:
        return lineage.role
    return item["targeted_stage"]


def validate_stage_alignment(sample: Sequence, gateway: Gateway, per_stage: Optional[int] = DEFAULT_PER_STAGE,
                             rng_seed: int = 0) -> list[StageAlignmentTable]:
    """Judge the actual stage of items grouped by the stage their prompt targeted.

    Up to ``per_stage`` items per targeted stage are drawn uniformly (fixed seed).
    Match accuracy is the share of judged items the judge says meet their
    targeted stage; the distribution is over the judge's actual-stage labels.
    Items the judge fails on are excluded from both.
    """
    groups: dict[str, list] = {s: [] for s in TARGET_STAGES}
    for it in sample:
        groups.setdefault(_targeted(it), []).append(it)
    tables = []
    for stage in TARGET_STAGES:
        pool = groups.get(stage, [])
        if not pool:
            continue
        if per_stage is not None and len(pool) > per_stage:
            rng = np.random.default_rng([rng_seed, stable_hash(stage) & 0xFFFFFFFF])
            pool = [pool[i] for i in np.sort(rng.choice(len(pool), per_stage, replace=False))]
        responses = gateway.complete_batch([stage_request(it, stage) for it in pool])
        counts: Counter = Counter()
        meets = 0
        judged = 0
        for resp in responses:
            if isinstance(resp, BatchError):
                continue
            try:
                obj = extract_json_object(resp.text)
            except ValueError:
                continue
            actual = obj.get("actual_stage")
            actual = actual if actual in STAGES else "other"
            counts[actual] += 1
            meets += bool(obj.get("meets_target"))
            judged += 1
        if judged == 0:
            continue
        dist = {s: counts[s] / judged for s in STAGES}
        tables.append(StageAlignmentTable(stage, meets / judged, dist, len(pool), judged))
    return tables


# --- report emission -------------------------------------------------------

def _pct(x: float) -> str:
    return "n/a" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{100 * x:.2f}"


def _report_rows(rep: DistributionReport) -> list[list[str]]:
    rows = [["meta", "dataset_tag", rep.dataset_tag], ["meta", "sample_size", str(rep.sample_size)],
            ["meta", "h4h5_share", repr(rep.h4h5_share)]]
    rows += [["tier", k, repr(v)] for k, v in rep.by_tier.items()]
    rows += [["discipline", k, repr(v)] for k, v in rep.by_discipline.items()]
    return rows


def load_report_csv(path: str | Path) -> DistributionReport:
    meta: dict = {}
    tiers: dict = {}
    discs: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        next(r)
        for axis, key, val in r:
            if axis == "meta":
                meta[key] = val
            elif axis == "tier":
                tiers[key] = float(val)
            else:
                discs[key] = float(val)
    return DistributionReport(meta["dataset_tag"], discs, tiers, float(meta["h4h5_share"]), int(meta["sample_size"]))


def markdown_tier_table(reports: Sequence[DistributionReport]) -> str:
    head = "| dataset | " + " | ".join(TIER_KEYS) + " | H4/H5 | n |"
    sep = "|" + "---|" * (len(TIER_KEYS) + 3)
    lines = [head, sep]
    for r in reports:
        cells = " | ".join(_pct(r.by_tier[k]) for k in TIER_KEYS)
        lines.append(f"| {r.dataset_tag} | {cells} | {_pct(r.h4h5_share)} | {r.sample_size} |")
    return "\n".join(lines)


def emit_report(reports: Sequence[DistributionReport], fmt: str, out_dir: str | Path,
                comparisons: Sequence[DifficultyComparison] = (),
                stage_tables: Sequence[StageAlignmentTable] = (), name: str = "distribution") -> list[Path]:
    """Write reports in one format.  csv writes one file per report; json/markdown write one combined file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if fmt == "csv":
        for rep in reports:
            p = out_dir / f"{name}.{rep.dataset_tag}.csv"
            with open(p, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["axis", "key", "value"])
                w.writerows(_report_rows(rep))
            written.append(p)
        if stage_tables:
            p = out_dir / "stage_alignment.csv"
            with open(p, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["targeted_stage", "match_accuracy", *STAGES, "sample_size"])
                for t in stage_tables:
                    w.writerow([t.targeted_stage, repr(t.match_accuracy),
                                *(repr(t.actual_distribution[s]) for s in STAGES), t.sample_size])
            written.append(p)
    elif fmt == "json":
        p = out_dir / f"{name}.json"
        doc = {"reports": [r.to_dict() for r in reports],
               "comparisons": [c.to_dict() for c in comparisons],
               "stage_alignment": [t.to_dict() for t in stage_tables]}
        p.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        written.append(p)
    elif fmt == "markdown":
        p = out_dir / f"{name}.md"
        parts = ["# Difficulty distribution", "", markdown_tier_table(reports), ""]
        for c in comparisons:
            ratio = f"{c.h4h5_ratio:.2f}x" if c.ratio_defined else "undefined (baseline has no H4/H5)"
            parts += [f"H4/H5 share {c.b_tag} vs {c.a_tag}: {ratio}", ""]
        for r in reports:
            parts += [f"## Disciplines: {r.dataset_tag}", "", "| discipline | share (%) |", "|---|---|"]
            parts += [f"| {k} | {_pct(v)} |" for k, v in r.by_discipline.items()]
            parts.append("")
        if stage_tables:
            parts += ["## Stage alignment", "",
                      "| targeted | match acc. | " + " | ".join(STAGES) + " |",
                      "|" + "---|" * (len(STAGES) + 2)]
            for t in stage_tables:
                cells = " | ".join(_pct(t.actual_distribution[s]) for s in STAGES)
                parts.append(f"| {t.targeted_stage} | {_pct(t.match_accuracy)} | {cells} |")
            parts.append("")
        p.write_text("\n".join(parts), encoding="utf-8")
        written.append(p)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return written
