"""Benchmark decontamination by exact normalized n-gram matching and embedding similarity."""

from __future__ import annotations

import hashlib
import json
import re
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

DEFAULT_N = 10
DEFAULT_EMBED_THRESHOLD = 0.95
NORMALIZATION = "lower+strip_punct+collapse_ws/v1"

_STRIP = str.maketrans({c: " " for c in string.punctuation + "“”‘’，。！？；：、（）《》【】"})
_WS = re.compile(r"\s+")


class EmptyBenchmark(ValueError):
    pass


class IndexMismatch(ValueError):
    pass


class EmbedderUnavailable(RuntimeError):
    pass


def normalize_tokens(text: str) -> list[str]:
    return _WS.sub(" ", text.lower().translate(_STRIP)).split()


def hash_ngram(tokens: Sequence[str]) -> int:
    digest = hashlib.blake2b(" ".join(tokens).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def iter_ngram_hashes(tokens: Sequence[str], n: int) -> Iterator[tuple[int, int]]:
    """Yield ``(start_offset, hash)`` for every n-gram window."""
    for i in range(len(tokens) - n + 1):
        yield i, hash_ngram(tokens[i:i + n])


@dataclass(frozen=True)
class NgramIndex:
    n: int
    hashes: frozenset
    doc_count: int
    normalization: str = NORMALIZATION

    def __contains__(self, h: int) -> bool:
        return h in self.hashes

    def __len__(self) -> int:
        return len(self.hashes)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arr = np.array(sorted(self.hashes), dtype=np.uint64)
        np.save(path.with_suffix(".npy"), arr)
        header = {"n": self.n, "doc_count": self.doc_count, "normalization": self.normalization}
        path.with_suffix(".json").write_text(json.dumps(header, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "NgramIndex":
        path = Path(path)
        header = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        if header["normalization"] != NORMALIZATION:
            raise IndexMismatch(f"index normalization {header['normalization']!r} != {NORMALIZATION!r}")
        arr = np.load(path.with_suffix(".npy"))
        return cls(header["n"], frozenset(int(x) for x in arr), header["doc_count"], header["normalization"])


def build_ngram_index(benchmark_docs: Iterable[str], n: int = DEFAULT_N) -> NgramIndex:
    if n < 2:
        raise ValueError("n must be >= 2")
    hashes: set[int] = set()
    docs = 0
    for doc in benchmark_docs:
        docs += 1
        toks = normalize_tokens(doc)
        hashes.update(h for _, h in iter_ngram_hashes(toks, n))
    if docs == 0:
        raise EmptyBenchmark("no benchmark documents")
    return NgramIndex(n, frozenset(hashes), docs)


def load_benchmark_texts(paths: Iterable[str | Path]) -> Iterator[str]:
    """Line-delimited benchmark files; a directory contributes every ``*.txt``/``*.jsonl`` inside."""
    for p in paths:
        p = Path(p)
        files = sorted(p.glob("*.txt")) + sorted(p.glob("*.jsonl")) if p.is_dir() else [p]
        for f in files:
            with open(f, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    if f.suffix == ".jsonl":
                        obj = json.loads(line)
                        line = " ".join(str(v) for v in obj.values() if isinstance(v, (str, int, float)))
                    yield line


def record_id(record) -> str:
    for attr in ("qa_id", "seed_id", "doc_id"):
        if hasattr(record, attr):
            return getattr(record, attr)
        if isinstance(record, dict) and attr in record:
            return record[attr]
    if isinstance(record, dict) and "id" in record:
        return str(record["id"])
    raise TypeError(f"cannot find an id on {type(record).__name__}")


def record_text(record) -> str:
    """The text checked for contamination: question+answer (plus options/solution) or body."""
    if hasattr(record, "contam_text"):
        return record.contam_text()
    if hasattr(record, "content"):
        return record.content
    if isinstance(record, dict):
        parts = [record.get(k) for k in ("question", "answer", "text", "body")]
        return "\n".join(p for p in parts if isinstance(p, str))
    if isinstance(record, str):
        return record
    raise TypeError(f"cannot extract text from {type(record).__name__}")


@dataclass(frozen=True)
class ContaminationReport:
    record_id: str
    verdict: str  # clean | ngram_hit | embedding_hit
    matched_span: Optional[tuple[int, int]] = None
    similarity: Optional[float] = None

    @property
    def clean(self) -> bool:
        return self.verdict == "clean"

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["matched_span"] is not None:
            d["matched_span"] = list(d["matched_span"])
        return d


def check_exact(record, index: NgramIndex) -> ContaminationReport:
    if index.normalization != NORMALIZATION:
        raise IndexMismatch(f"index built with {index.normalization!r}")
    toks = normalize_tokens(record_text(record))
    rid = record_id(record)
    for start, h in iter_ngram_hashes(toks, index.n):
        if h in index.hashes:
            return ContaminationReport(rid, "ngram_hit", matched_span=(start, start + index.n))
    return ContaminationReport(rid, "clean")


class HashingEmbedder:
    """Deterministic bag-of-words feature-hash embedder producing unit vectors."""

    def __init__(self, dim: int = 1024):
        self.dim = dim

    def __call__(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim, dtype=np.float64)
        for tok in normalize_tokens(text):
            h = hash_ngram([tok])
            v[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        norm = np.linalg.norm(v)
        return v / norm if norm > 0 else v


def embed_benchmarks(texts: Iterable[str], embedder: Callable[[str], np.ndarray]) -> np.ndarray:
    rows = [np.asarray(embedder(t), dtype=np.float64) for t in texts]
    return np.vstack(rows) if rows else np.zeros((0, 0))


def check_embedding(record, benchmark_vectors: np.ndarray, embedder: Optional[Callable[[str], np.ndarray]],
                    threshold: float = DEFAULT_EMBED_THRESHOLD) -> ContaminationReport:
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    if embedder is None:
        raise EmbedderUnavailable("no embedder configured")
    try:
        vec = np.asarray(embedder(record_text(record)), dtype=np.float64)
    except Exception as exc:
        raise EmbedderUnavailable(str(exc)) from exc
    rid = record_id(record)
    if benchmark_vectors.size == 0 or not np.any(vec):
        return ContaminationReport(rid, "clean", similarity=0.0)
    sim = float(np.clip(np.max(benchmark_vectors @ vec), -1.0, 1.0))
    verdict = "embedding_hit" if sim >= threshold else "clean"
    return ContaminationReport(rid, verdict, similarity=sim)


@dataclass
class EmbeddingConfig:
    benchmark_vectors: np.ndarray
    embedder: Callable[[str], np.ndarray]
    threshold: float = DEFAULT_EMBED_THRESHOLD


@dataclass
class FilterResult:
    clean: list
    flagged: list
    reports: list[ContaminationReport] = field(default_factory=list)
    header: dict = field(default_factory=dict)

    def write_report(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"header": self.header}) + "\n")
            for r in self.reports:
                fh.write(json.dumps(r.to_dict()) + "\n")


def filter_corpus(records: Iterable, index: NgramIndex,
                  embed_cfg: Optional[EmbeddingConfig] = None) -> FilterResult:
    """Split records into clean and flagged; ``len(clean) + len(flagged) == len(input)``."""
    header = {"ngram_size": index.n, "normalization": index.normalization,
              "embed_threshold": embed_cfg.threshold if embed_cfg else None}
    out = FilterResult([], [], [], header)
    for rec in records:
        rep = check_exact(rec, index)
        if rep.clean and embed_cfg is not None:
            rep = check_embedding(rec, embed_cfg.benchmark_vectors, embed_cfg.embedder, embed_cfg.threshold)
        out.reports.append(rep)
        (out.clean if rep.clean else out.flagged).append(rec)
    return out
