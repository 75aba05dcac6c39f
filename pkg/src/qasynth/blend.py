"""KnowEdu-style text selection and token-ratio blending of text with QA records."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from ._util import read_jsonl
from .ingest import count_tokens
from .synthesize import McqItem, SynthesizedQA

QA_FORMATS = ("plain", "cot")
DEFAULT_SHARD_TOKENS = 4_194_304
DEFAULT_DRIFT_BOUND = 0.02
DEFAULT_FINAL_TOLERANCE = 0.01
DEFAULT_TOP_FRACTION = 0.2
# a shard that cannot find an in-bound cut point is closed anyway at this multiple of shard size
HARD_CAP_FACTOR = 4


class EmptySource(ValueError):
    pass


class RatioUnachievable(RuntimeError):
    def __init__(self, message: str, result: "BlendResult"):
        super().__init__(message)
        self.result = result


class MissingCot(ValueError):
    pass


# --- KnowEdu selection -----------------------------------------------------

@dataclass(frozen=True)
class QualityScoredDoc:
    doc_id: str
    body: str
    knowledge_density_score: float
    educational_score: float
    token_count: int

    def __post_init__(self) -> None:
        if self.token_count <= 0:
            raise ValueError("token_count must be positive")
        for name in ("knowledge_density_score", "educational_score"):
            v = getattr(self, name)
            if v is None or not np.isfinite(v):
                raise ValueError(f"{name} must be a finite number")

    @classmethod
    def from_dict(cls, d: Mapping) -> "QualityScoredDoc":
        body = d.get("body", d.get("text"))
        tokens = d.get("token_count") or count_tokens(body)
        return cls(str(d.get("doc_id", d.get("id"))), body, float(d["knowledge_density_score"]),
                   float(d["educational_score"]), int(tokens))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SelectionReport:
    total: int
    kd_threshold: float
    edu_threshold: float
    kd_pass: int
    edu_pass: int
    both_pass: int

    @property
    def pass_rates(self) -> dict:
        n = self.total or 1
        return {"knowledge_density": self.kd_pass / n, "educational": self.edu_pass / n,
                "both": self.both_pass / n}

    def to_dict(self) -> dict:
        return {**asdict(self), "pass_rates": self.pass_rates}


def percentile_threshold(scores: Sequence[float], top_fraction: float = DEFAULT_TOP_FRACTION) -> float:
    """Score at which the top ``top_fraction`` of docs begins."""
    if not 0 < top_fraction <= 1:
        raise ValueError("top_fraction must be in (0, 1]")
    return float(np.quantile(np.asarray(scores, dtype=float), 1.0 - top_fraction))


def select_knowedu(docs: Iterable[QualityScoredDoc], kd_threshold: Optional[float] = None,
                   edu_threshold: Optional[float] = None,
                   top_fraction: float = DEFAULT_TOP_FRACTION) -> tuple[list[QualityScoredDoc], SelectionReport]:
    """Keep docs that clear both thresholds; missing thresholds default to the top-fraction percentile."""
    docs = list(docs)
    if docs:
        if kd_threshold is None:
            kd_threshold = percentile_threshold([d.knowledge_density_score for d in docs], top_fraction)
        if edu_threshold is None:
            edu_threshold = percentile_threshold([d.educational_score for d in docs], top_fraction)
    kd_threshold = float("inf") if kd_threshold is None else kd_threshold
    edu_threshold = float("inf") if edu_threshold is None else edu_threshold
    kept = []
    kd_pass = edu_pass = 0
    for d in docs:
        a = d.knowledge_density_score >= kd_threshold
        b = d.educational_score >= edu_threshold
        kd_pass += a
        edu_pass += b
        if a and b:
            kept.append(d)
    return kept, SelectionReport(len(docs), kd_threshold, edu_threshold, kd_pass, edu_pass, len(kept))


# --- QA record formats -----------------------------------------------------

def format_qa(item: SynthesizedQA, qa_format: str = "plain") -> str:
    if qa_format not in QA_FORMATS:
        raise ValueError(f"unknown qa_format {qa_format!r}")
    question = item.prompt_text()
    answer = item.item.answer_text if isinstance(item.item, McqItem) else item.item.answer
    if qa_format == "plain":
        return f"{question}\n{answer}"
    cot = item.cot
    if not cot or not cot.strip():
        raise MissingCot(f"{item.qa_id} has no reasoning block")
    return f"{question}\n{cot}\n{answer}"


# --- blending --------------------------------------------------------------

@dataclass(frozen=True)
class BlendManifest:
    text_source: Union[str, Path, Sequence]
    qa_source: Union[str, Path, Sequence]
    ratio_text_to_qa: tuple[float, float] = (1.0, 1.0)
    shard_size_tokens: int = DEFAULT_SHARD_TOKENS
    rng_seed: int = 0
    qa_format: str = "plain"
    drift_bound: float = DEFAULT_DRIFT_BOUND
    final_tolerance: float = DEFAULT_FINAL_TOLERANCE
    target_total_tokens: Optional[int] = None

    def __post_init__(self) -> None:
        a, b = self.ratio_text_to_qa
        if not (a > 0 and b > 0):
            raise ValueError("ratio components must be positive")
        if self.shard_size_tokens < 1:
            raise ValueError("shard_size_tokens must be positive")
        if self.qa_format not in QA_FORMATS:
            raise ValueError(f"unknown qa_format {self.qa_format!r}")
        if not (0 < self.final_tolerance and 0 < self.drift_bound):
            raise ValueError("drift bounds must be positive")


@dataclass(frozen=True)
class BlendRecord:
    text: str
    source: str  # "text" | "qa"
    tokens: int

    def to_dict(self) -> dict:
        return {"text": self.text, "source": self.source, "tokens": self.tokens}


def _text_record(d) -> BlendRecord:
    if isinstance(d, QualityScoredDoc):
        return BlendRecord(d.body, "text", d.token_count)
    if isinstance(d, BlendRecord):
        return d
    if isinstance(d, str):
        return BlendRecord(d, "text", count_tokens(d))
    body = d.get("text", d.get("body"))
    tokens = d.get("tokens") or d.get("token_count") or count_tokens(body)
    return BlendRecord(body, "text", int(tokens))


def _qa_record(d, qa_format: str) -> BlendRecord:
    if isinstance(d, BlendRecord):
        return d
    if isinstance(d, Mapping):
        if "item" in d:
            d = SynthesizedQA.from_dict(d)
        else:  # already formatted
            text = d["text"]
            return BlendRecord(text, "qa", int(d.get("tokens") or count_tokens(text)))
    text = format_qa(d, qa_format)
    return BlendRecord(text, "qa", count_tokens(text))


def _load(source) -> list:
    if isinstance(source, (str, Path)):
        return list(read_jsonl(source))
    return list(source)


def ratio_drift(text_tokens: int, qa_tokens: int, ratio: tuple[float, float]) -> float:
    """Relative deviation of the cumulative text:qa token ratio from the target."""
    a, b = ratio
    if qa_tokens == 0:
        return 0.0 if text_tokens == 0 else float("inf")
    return abs((text_tokens * b) / (qa_tokens * a) - 1.0)


@dataclass
class ShardStat:
    name: str
    records: int
    text_tokens: int
    qa_tokens: int
    cumulative_drift: float
    capped: bool = False


@dataclass
class BlendResult:
    shards: list[list[BlendRecord]]
    shard_stats: list[ShardStat]
    text_tokens: int
    qa_tokens: int
    achieved_ratio: Optional[float]
    final_drift: float
    unconsumed: dict = field(default_factory=dict)
    stop_reason: str = ""

    @property
    def total_tokens(self) -> int:
        return self.text_tokens + self.qa_tokens


def interleave(text: Sequence[BlendRecord], qa: Sequence[BlendRecord], manifest: BlendManifest) -> BlendResult:
    """Deficit scheduling of two shuffled record streams into shards.

    The source that is behind its token share goes next.  A shard is closed
    at the first record boundary past ``shard_size_tokens`` where the
    cumulative drift is within ``min(drift_bound, final_tolerance)``.  When a
    needed source runs out, the open shard is trimmed back to its last
    in-tolerance boundary and the trimmed records are reported as unconsumed.
    """
    if not text:
        raise EmptySource("text source is empty")
    if not qa:
        raise EmptySource("qa source is empty")
    ratio = manifest.ratio_text_to_qa
    rng = np.random.default_rng(manifest.rng_seed)
    t_order = rng.permutation(len(text))
    q_order = rng.permutation(len(qa))
    cut_bound = min(manifest.drift_bound, manifest.final_tolerance)
    cap = HARD_CAP_FACTOR * manifest.shard_size_tokens

    shards: list[list[BlendRecord]] = []
    stats: list[ShardStat] = []
    ti = qi = 0
    T = Q = 0  # tokens committed in closed shards
    buf: list[BlendRecord] = []
    bt = bq = 0  # tokens in the open shard
    last_ok = 0  # buffer length at the last in-tolerance boundary
    stop = "sources_exhausted"

    def close(n: int, capped: bool = False) -> None:
        nonlocal buf, bt, bq, T, Q, last_ok
        kept = buf[:n]
        kt = sum(r.tokens for r in kept if r.source == "text")
        kq = sum(r.tokens for r in kept if r.source == "qa")
        T, Q = T + kt, Q + kq
        shards.append(kept)
        stats.append(ShardStat(f"shard-{len(shards) - 1:05d}.jsonl", len(kept), kt, kq,
                               ratio_drift(T, Q, ratio), capped))
        buf, bt, bq, last_ok = buf[n:], bt - kt, bq - kq, 0

    while True:
        ct, cq = T + bt, Q + bq
        if manifest.target_total_tokens is not None and ct + cq >= manifest.target_total_tokens \
                and ratio_drift(ct, cq, ratio) <= manifest.final_tolerance:
            stop = "target_reached"
            break
        want_text = ct * ratio[1] <= cq * ratio[0]
        if want_text and ti >= len(text):
            stop = "text_exhausted"
            break
        if not want_text and qi >= len(qa):
            stop = "qa_exhausted"
            break
        if want_text:
            rec = text[t_order[ti]]
            ti += 1
            bt += rec.tokens
        else:
            rec = qa[q_order[qi]]
            qi += 1
            bq += rec.tokens
        buf.append(rec)
        d = ratio_drift(T + bt, Q + bq, ratio)
        if d <= cut_bound:
            last_ok = len(buf)
            if bt + bq >= manifest.shard_size_tokens:
                close(len(buf))
        elif bt + bq >= cap:
            close(len(buf), capped=True)

    # trim the open shard back to its last in-tolerance boundary
    trimmed = buf[last_ok:]
    if last_ok:
        close(last_ok)
    unconsumed = {
        "text_records": len(text) - ti + sum(r.source == "text" for r in trimmed),
        "qa_records": len(qa) - qi + sum(r.source == "qa" for r in trimmed),
        "trimmed_records": len(trimmed),
    }
    unconsumed["text_tokens"] = sum(text[i].tokens for i in t_order[ti:]) + \
        sum(r.tokens for r in trimmed if r.source == "text")
    unconsumed["qa_tokens"] = sum(qa[i].tokens for i in q_order[qi:]) + \
        sum(r.tokens for r in trimmed if r.source == "qa")
    achieved = T / Q if Q else None
    return BlendResult(shards, stats, T, Q, achieved, ratio_drift(T, Q, ratio), unconsumed, stop)


def load_sources(manifest: BlendManifest) -> tuple[list[BlendRecord], list[BlendRecord]]:
    text = [_text_record(d) for d in _load(manifest.text_source)]
    qa = [_qa_record(d, manifest.qa_format) for d in _load(manifest.qa_source)]
    return text, qa


def _source_ref(src) -> str:
    return Path(src).name if isinstance(src, (str, Path)) else f"<{len(src)} in-memory records>"


def blend_corpora(manifest: BlendManifest, out_dir: str | Path) -> BlendResult:
    """Write ``shard-NNNNN.jsonl`` files plus ``blend_report.json`` into ``out_dir``.

    Raises :class:`RatioUnachievable` (after writing what was produced) when the
    final ratio misses the tolerance or no shard could be formed.
    """
    text, qa = load_sources(manifest)
    result = interleave(text, qa, manifest)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for old in out_dir.glob("shard-*.jsonl"):
        old.unlink()
    for st, rows in zip(result.shard_stats, result.shards):
        with open(out_dir / st.name, "w", encoding="utf-8", newline="\n") as fh:
            for r in rows:
                fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")
    a, b = manifest.ratio_text_to_qa
    ok = result.total_tokens > 0 and result.final_drift <= manifest.final_tolerance
    report = {
        "text_source": _source_ref(manifest.text_source),
        "qa_source": _source_ref(manifest.qa_source),
        "ratio_text_to_qa": [a, b],
        "qa_format": manifest.qa_format,
        "shard_size_tokens": manifest.shard_size_tokens,
        "rng_seed": manifest.rng_seed,
        "drift_bound": manifest.drift_bound,
        "final_tolerance": manifest.final_tolerance,
        "text_tokens": result.text_tokens,
        "qa_tokens": result.qa_tokens,
        "achieved_ratio": result.achieved_ratio,
        "final_drift": result.final_drift,
        "status": "ok" if ok else "ratio_unachievable",
        "stop_reason": result.stop_reason,
        "unconsumed": result.unconsumed,
        "shards": [asdict(s) for s in result.shard_stats],
    }
    (out_dir / "blend_report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    if not ok:
        raise RatioUnachievable(
            f"achieved drift {result.final_drift:.4f} exceeds tolerance {manifest.final_tolerance}", result)
    return result


def read_shards(out_dir: str | Path) -> list[list[dict]]:
    return [list(read_jsonl(p)) for p in sorted(Path(out_dir).glob("shard-*.jsonl"))]
