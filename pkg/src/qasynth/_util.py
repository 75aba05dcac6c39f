"""Small helpers shared across stages: JSONL I/O, stable hashing, text folding, JSON extraction."""

from __future__ import annotations

import hashlib
import json
import re
import string
from pathlib import Path
from typing import Any, Iterable, Iterator

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})
_WS = re.compile(r"\s+")
_FENCE = re.compile(r"```(?:json|JSON)?")


def stable_hash(*parts: Any, digest_size: int = 8) -> int:
    """Process-independent integer hash (``hash()`` is salted per interpreter)."""
    h = hashlib.blake2b(digest_size=digest_size)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "big")


def sha_hex(text: str, n: int = 16) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:n]


def fold_text(text: str) -> str:
    """Case, punctuation and whitespace folding used for equality checks."""
    text = text.lower().translate(_PUNCT_TABLE)
    return _WS.sub(" ", text).strip()


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=False))
            fh.write("\n")
            n += 1
    return n


def _scan_json(text: str, opener: str) -> Any:
    decoder = json.JSONDecoder()
    cleaned = _FENCE.sub("", text)
    pos = cleaned.find(opener)
    while pos != -1:
        try:
            value, _ = decoder.raw_decode(cleaned, pos)
        except json.JSONDecodeError:
            pos = cleaned.find(opener, pos + 1)
            continue
        return value
    raise ValueError(f"no parsable JSON value starting with {opener!r}")


def extract_json_object(text: str) -> dict:
    """First decodable JSON object in ``text``; fences and surrounding prose are ignored."""
    value = _scan_json(text, "{")
    if not isinstance(value, dict):  # pragma: no cover - raw_decode at "{" always yields a dict
        raise ValueError("not an object")
    return value


def extract_json_array(text: str) -> list:
    return _scan_json(text, "[")
