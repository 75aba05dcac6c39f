"""Read heterogeneous seed files into normalized :class:`SeedRecord` streams."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

SOURCE_KINDS = ("qa_pair", "book", "web_page")
DEFAULT_CHUNK_TOKENS = 1024

_TOKEN = re.compile(r"\w+|[^\w\s]")
_HAN = re.compile(r"[㐀-䶿一-鿿豈-﫿]")
_LATIN = re.compile(r"[A-Za-z]")
_PARA = re.compile(r"\n\s*\n")


class FileUnreadable(OSError):
    pass


@dataclass(frozen=True)
class TokenCounter:
    mode: str = "whitespace_proxy"  # or "pluggable_external"
    name: str = "whitespace_proxy"
    fn: Optional[Callable[[str], int]] = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.mode not in ("whitespace_proxy", "pluggable_external"):
            raise ValueError(f"unknown token counter mode {self.mode!r}")
        if self.mode == "pluggable_external" and self.fn is None:
            raise ValueError("pluggable_external counter needs fn")


DEFAULT_COUNTER = TokenCounter()


def count_tokens(text: str, counter: TokenCounter = DEFAULT_COUNTER) -> int:
    """Proxy token count: runs of word characters plus each punctuation mark."""
    if counter.mode == "pluggable_external":
        return int(counter.fn(text))
    return len(_TOKEN.findall(text))


def detect_language(text: str) -> str:
    han = len(_HAN.findall(text))
    latin = len(_LATIN.findall(text))
    if han == 0 and latin == 0:
        return "other"
    if han / (han + latin) >= 0.3:
        return "zh"
    return "en" if latin > 0 else "other"


@dataclass(frozen=True)
class SeedRecord:
    seed_id: str
    source_kind: str
    token_count: int
    origin: str
    question: Optional[str] = None
    answer: Optional[str] = None
    body: Optional[str] = None
    language: str = "en"

    def __post_init__(self) -> None:
        if self.source_kind not in SOURCE_KINDS:
            raise ValueError(f"unknown source_kind {self.source_kind!r}")
        if self.source_kind == "qa_pair":
            if not (self.question and self.question.strip()) or not (self.answer and self.answer.strip()):
                raise ValueError("qa_pair seeds need non-empty question and answer")
        elif not (self.body and self.body.strip()):
            raise ValueError(f"{self.source_kind} seeds need a non-empty body")
        if self.token_count < 0 or (self.token_count == 0 and self.content.strip()):
            raise ValueError("token_count must be positive for non-empty content")

    @property
    def content(self) -> str:
        if self.source_kind == "qa_pair":
            return f"{self.question}\n{self.answer}"
        return self.body or ""

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "SeedRecord":
        return cls(**d)


@dataclass(frozen=True)
class Reject:
    line_no: int
    reason: str
    raw: str


def _validate_line(obj, kind: str) -> Optional[str]:
    if not isinstance(obj, dict):
        return "not a JSON object"
    required = ("question", "answer") if kind == "qa_pair" else ("text",)
    for name in required + ("source",):
        if name not in obj or obj[name] is None:
            return f"missing field {name}"
        if not isinstance(obj[name], str):
            return f"field {name} must be a string"
        if not obj[name].strip():
            return f"empty field {name}"
    if "id" in obj and not isinstance(obj["id"], (str, int)):
        return "field id must be a string or integer"
    return None


def read_seeds(
    path: str | Path,
    source_kind: str,
    *,
    rejects: Optional[list] = None,
    reject_path: str | Path | None = None,
    counter: TokenCounter = DEFAULT_COUNTER,
) -> Iterator[SeedRecord]:
    """Stream validated seeds from a JSONL file.

    Malformed lines never abort the read.  Each one becomes a :class:`Reject`,
    appended to ``rejects`` and/or written to ``reject_path``, so that
    ``records + rejects == input lines``.
    """
    if source_kind not in SOURCE_KINDS:
        raise ValueError(f"unknown source_kind {source_kind!r}")
    path = Path(path)
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise FileUnreadable(f"cannot read {path}: {exc}") from exc
    rej_fh = None
    if reject_path is not None:
        Path(reject_path).parent.mkdir(parents=True, exist_ok=True)
        rej_fh = open(reject_path, "w", encoding="utf-8")

    def reject(line_no: int, reason: str, raw: str) -> None:
        r = Reject(line_no, reason, raw)
        if rejects is not None:
            rejects.append(r)
        if rej_fh is not None:
            rej_fh.write(json.dumps(asdict(r), ensure_ascii=False) + "\n")

    try:
        for line_no, raw in enumerate(fh, start=1):
            raw = raw.rstrip("\n")
            if not raw.strip():
                reject(line_no, "empty line", raw)
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError:
                reject(line_no, "invalid json", raw)
                continue
            problem = _validate_line(obj, source_kind)
            if problem:
                reject(line_no, problem, raw)
                continue
            seed_id = str(obj.get("id", f"{path.stem}:{line_no}"))
            if source_kind == "qa_pair":
                q, a = obj["question"].strip(), obj["answer"].strip()
                text = f"{q}\n{a}"
                yield SeedRecord(seed_id, source_kind, count_tokens(text, counter), obj["source"],
                                 question=q, answer=a, language=detect_language(text))
            else:
                body = obj["text"].strip()
                yield SeedRecord(seed_id, source_kind, count_tokens(body, counter), obj["source"],
                                 body=body, language=detect_language(body))
    finally:
        fh.close()
        if rej_fh is not None:
            rej_fh.close()


def _token_spans(text: str) -> list[tuple[int, int]]:
    return [m.span() for m in _TOKEN.finditer(text)]


def _split_paragraph(body: str, start: int, end: int, max_tokens: int,
                     counter: TokenCounter) -> list[tuple[int, int]]:
    """Cut an oversized paragraph at token boundaries into pieces of <= max_tokens."""
    spans = [(s + start, e + start) for s, e in _token_spans(body[start:end])]
    pieces = []
    i = 0
    while i < len(spans):
        j = min(i + max_tokens, len(spans))
        # an external counter may disagree with the proxy; shrink until it fits
        while j > i + 1 and count_tokens(body[spans[i][0]:spans[j - 1][1]], counter) > max_tokens:
            j -= 1
        pieces.append((spans[i][0], spans[j - 1][1]))
        i = j
    return pieces


def chunk_document(
    body: str,
    max_tokens: int = DEFAULT_CHUNK_TOKENS,
    *,
    seed_id: str = "doc",
    source_kind: str = "book",
    origin: str = "",
    counter: TokenCounter = DEFAULT_COUNTER,
) -> list[SeedRecord]:
    """Split a long body into paragraph-aligned chunks of at most ``max_tokens``.

    Chunks are contiguous slices of ``body`` with boundary whitespace trimmed,
    so joining them reproduces the body up to whitespace.  A paragraph larger
    than ``max_tokens`` is cut at token boundaries.
    """
    if max_tokens < 64:
        raise ValueError("max_tokens must be >= 64")
    if source_kind == "qa_pair":
        raise ValueError("qa_pair seeds are not chunked")

    # paragraph spans over the original string
    paras: list[tuple[int, int]] = []
    pos = 0
    for m in _PARA.finditer(body):
        paras.append((pos, m.start()))
        pos = m.end()
    paras.append((pos, len(body)))
    paras = [(s, e) for s, e in paras if body[s:e].strip()]

    pieces: list[tuple[int, int]] = []
    for s, e in paras:
        if count_tokens(body[s:e], counter) > max_tokens:
            pieces.extend(_split_paragraph(body, s, e, max_tokens, counter))
        else:
            pieces.append((s, e))

    chunks: list[tuple[int, int]] = []
    cur: Optional[tuple[int, int]] = None
    for s, e in pieces:
        if cur is None:
            cur = (s, e)
        elif count_tokens(body[cur[0]:e], counter) <= max_tokens:
            cur = (cur[0], e)
        else:
            chunks.append(cur)
            cur = (s, e)
    if cur is not None:
        chunks.append(cur)

    out = []
    for k, (s, e) in enumerate(chunks):
        text = body[s:e].strip()
        cid = seed_id if len(chunks) == 1 else f"{seed_id}#c{k}"
        out.append(SeedRecord(cid, source_kind, count_tokens(text, counter), origin,
                              body=text, language=detect_language(text)))
    return out


def expand_seed(record: SeedRecord, max_tokens: int = DEFAULT_CHUNK_TOKENS,
                counter: TokenCounter = DEFAULT_COUNTER) -> list[SeedRecord]:
    """Chunk book/web seeds that exceed ``max_tokens``; QA seeds pass through."""
    if record.source_kind == "qa_pair" or record.token_count <= max_tokens:
        return [record]
    return chunk_document(record.body, max_tokens, seed_id=record.seed_id,
                          source_kind=record.source_kind, origin=record.origin, counter=counter)
