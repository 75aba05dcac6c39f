"""Synthetic corpora shared by the test modules (deterministic, seeded)."""

from __future__ import annotations

import json

from pathlib import Path

import numpy as np

from qasynth.templates import discipline_list

WORDS = ("energy matrix vector protein market court theory signal cell force river policy network "
         "integral lattice enzyme circuit contract poem climate orbit molecule algorithm ledger").split()


def sentence(rng: np.random.Generator, n: int) -> str:
    return " ".join(WORDS[i] for i in rng.integers(0, len(WORDS), n))


def write_jsonl(path: Path, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    return path


def seed_fixture(root: Path, n_qa: int = 160, n_books: int = 40, seed: int = 7) -> dict:
    """QA seeds naming a discipline and a level, book chunks, a benchmark and a text corpus."""
    rng = np.random.default_rng(seed)
    disciplines = discipline_list()
    qa = []
    for i in range(n_qa):
        d = disciplines[i % len(disciplines)]
        lvl = 1 + i % 5
        qa.append({"id": f"q{i:04d}", "source": "fixture",
                   "question": f"In {d}, level H{lvl}: what follows from {sentence(rng, 12)}?",
                   "answer": sentence(rng, 4)})
    books = [{"id": f"b{i:03d}", "source": "fixture",
              "text": f"Mathematics notes. {sentence(rng, 120)}\n\n{sentence(rng, 80)}"} for i in range(n_books)]
    bench_lines = [sentence(rng, 30) for _ in range(20)]
    # two seeds copy a benchmark passage verbatim and must be removed
    qa[3]["question"] = f"Physics, level H2: {bench_lines[0]}?"
    qa[11]["answer"] = bench_lines[5]
    text = [{"id": f"t{i:04d}", "text": sentence(rng, int(rng.integers(40, 160)))} for i in range(400)]
    paths = {
        "qa": write_jsonl(root / "seeds_qa.jsonl", qa),
        "books": write_jsonl(root / "seeds_books.jsonl", books),
        "text": write_jsonl(root / "text.jsonl", text),
    }
    bench = root / "benchmarks"
    bench.mkdir(parents=True, exist_ok=True)
    (bench / "bench.txt").write_text("\n".join(bench_lines) + "\n", encoding="utf-8")
    paths["benchmarks"] = bench
    return paths


def pipeline_config(root: Path, **overrides) -> Path:
    paths = seed_fixture(root)
    cfg = {
        "run_id": "fixture",
        "rng_seed": 11,
        "workdir": "work",
        "backend": {"mock_seed": 3},
        "ingest": {"sources": [{"path": "seeds_qa.jsonl", "kind": "qa_pair"},
                               {"path": "seeds_books.jsonl", "kind": "book"}],
                   "chunk_max_tokens": 128},
        "decontam": {"benchmarks": ["benchmarks"]},
        "synth": {"n": 4},
        "blend": {"text_source": "text.jsonl", "shard_size_tokens": 4096},
    }
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k] = {**cfg[k], **v}
        else:
            cfg[k] = v
    p = root / "config.json"
    p.write_text(json.dumps(cfg, indent=2), encoding="utf-8")
    return p


def naive_ngram_hits(docs: list[str], benchmarks: list[str], n: int = 10) -> set[int]:
    """O(docs x benchmark) scan over tuples of folded tokens, no hashing."""
    import re as _re
    import string as _string

    def toks(t: str) -> list[str]:
        t = t.lower()
        t = "".join(" " if c in _string.punctuation + "“”‘’，。！？；：、（）《》【】" else c for c in t)
        return _re.sub(r"\s+", " ", t).split()

    bench_grams = []
    for b in benchmarks:
        bt = toks(b)
        bench_grams.append([tuple(bt[i:i + n]) for i in range(len(bt) - n + 1)])
    hits = set()
    for k, d in enumerate(docs):
        dt = toks(d)
        grams = [tuple(dt[i:i + n]) for i in range(len(dt) - n + 1)]
        if any(g == bg for g in grams for bgs in bench_grams for bg in bgs):
            hits.add(k)
    return hits


def contamination_corpus(n_docs: int = 1000, n_planted: int = 25, seed: int = 0):
    """Docs over a vocabulary disjoint from the benchmark's, with planted >= 10-token benchmark spans.

    A further set of docs carries 9-token near misses that must stay clean.
    """
    rng = np.random.default_rng(seed)
    doc_vocab = [f"d{i}" for i in range(3000)]
    bench_vocab = [f"b{i}" for i in range(3000)]
    benchmarks = [" ".join(bench_vocab[j] for j in rng.integers(0, 3000, 40)) for _ in range(50)]
    docs = [" ".join(doc_vocab[j] for j in rng.integers(0, 3000, int(rng.integers(60, 200))))
            for _ in range(n_docs)]
    planted = rng.choice(n_docs, n_planted + 25, replace=False)
    hit_ids, miss_ids = planted[:n_planted], planted[n_planted:]
    for k in hit_ids:
        b = benchmarks[int(rng.integers(0, len(benchmarks)))].split()
        length = int(rng.integers(10, 20))
        s = int(rng.integers(0, len(b) - length + 1))
        span = " ".join(b[s:s + length])
        # vary case/punctuation: normalization must still match
        span = span.upper() if k % 2 else span.replace(" ", ", ")
        words = docs[k].split()
        cut = int(rng.integers(0, len(words)))
        docs[k] = " ".join(words[:cut] + [span] + words[cut:])
    for k in miss_ids:
        b = benchmarks[int(rng.integers(0, len(benchmarks)))].split()
        s = int(rng.integers(0, len(b) - 9 + 1))
        words = docs[k].split()
        docs[k] = " ".join(words[:5] + b[s:s + 9] + words[5:])
    return docs, benchmarks, set(int(k) for k in hit_ids)


def probe_pool(per_level: int = 12, disciplines=("Physics", "Chemistry"), mcq: bool = True):
    """Labeled probe items across H1..H5 plus the answer key the scripted grader needs."""
    from qasynth.probe import ProbeItem

    items, key = [], {}
    for lvl in range(1, 6):
        for d in disciplines:
            for k in range(per_level):
                q = f"{d} question {k} at level H{lvl}: which value is right?"
                if mcq:
                    opts = tuple(f"{v} {d.lower()} units" for v in (k, k + 1, k + 2, k + 3))
                    idx = (k + lvl) % 4
                    it = ProbeItem(f"{d[:3]}-{lvl}-{k}", q, f"{'ABCD'[idx]}. {opts[idx]}", d, f"H{lvl}", opts, idx)
                    key[q] = (it.gold_text(), it.h_level, opts)
                else:
                    it = ProbeItem(f"{d[:3]}-{lvl}-{k}", q, f"{k * lvl}", d, f"H{lvl}")
                    key[q] = (it.answer, it.h_level)
                items.append(it)
    return items, key


def _valid_mcq(rng, k):
    base = int(rng.integers(0, 1000))
    return {"question": f"Compute quantity {base}-{k} for the given system.",
            "options": [f"{base + j} units" for j in range(4)], "answer_index": int(rng.integers(0, 4))}


def _valid_essay(rng, k):
    base = int(rng.integers(0, 1000))
    return {"question": f"Find the value of expression {base}-{k}.", "solution": f"Step 1. Reduce {base}.",
            "answer": str(base * 3)}


_JUNK = [None, "", "   ", 0, 3.5, True, [], {}, "A. ", "(b) ", -1, 4, "2", "x" * 3]


def mutate_completion(rng: np.random.Generator, question_type: str, n: int = 5) -> str:
    """A scripted-style completion with random structural mutations applied."""
    make = _valid_mcq if question_type == "multiple_choice" else _valid_essay
    items = [make(rng, k) for k in range(n)]
    for it in items:
        for _ in range(int(rng.integers(0, 3))):
            op = int(rng.integers(0, 9))
            keys = list(it)
            if op == 0 and keys:
                it.pop(keys[int(rng.integers(0, len(keys)))])
            elif op == 1 and keys:
                it[keys[int(rng.integers(0, len(keys)))]] = _JUNK[int(rng.integers(0, len(_JUNK)))]
            elif op == 2 and isinstance(it.get("options"), list):
                opts = it["options"]
                if opts and rng.random() < 0.5:
                    opts.pop(int(rng.integers(0, len(opts))))
                else:
                    opts.append(opts[0] if opts and rng.random() < 0.5 else "extra option")
            elif op == 3 and isinstance(it.get("options"), list) and len(it["options"]) > 1:
                j = int(rng.integers(1, len(it["options"])))
                it["options"][j] = str(it["options"][0]).upper() + rng.choice(["", " ", ".", "!"])
            elif op == 4 and isinstance(it.get("options"), list):
                it["options"] = [f"{'ABCD'[j % 4]}. {o}" if isinstance(o, str) else o
                                 for j, o in enumerate(it["options"])]
            elif op == 5:
                openers = ["Discuss the causes of inflation.", "Describe a cell.", "In your opinion, why?",
                           it.get("question", "")]
                it["question"] = openers[int(rng.integers(0, len(openers)))]
            elif op == 6 and "answer" in it:
                it["answer"] = " ".join(["word"] * int(rng.integers(1, 300)))
            elif op == 7:
                it["answer_index"] = _JUNK[int(rng.integers(0, len(_JUNK)))]
            elif op == 8 and isinstance(it.get("options"), list) and it["options"]:
                it["options"][int(rng.integers(0, len(it["options"])))] = _JUNK[int(rng.integers(0, len(_JUNK)))]
    if rng.random() < 0.2 and items:
        items.append(dict(items[0]))
    if rng.random() < 0.1:
        items.append("not an object")
    body = json.dumps(items, ensure_ascii=False)
    wrap = int(rng.integers(0, 5))
    if wrap == 1:
        body = f"Here you go:\n```json\n{body}\n```\nHope this helps."
    elif wrap == 2:
        body = f"Sure! {body} Done."
    elif wrap == 3 and rng.random() < 0.3:
        body = body[: int(rng.integers(1, max(2, len(body))))]  # truncated output
    return body


def invariant_violation(item) -> "str | None":
    """Independent re-check of an accepted item's structural invariants."""
    import re as _re

    from qasynth.ingest import count_tokens
    from qasynth.synthesize import EssayItem, McqItem

    fold = lambda s: _re.sub(r"\s+", " ", s.lower()).strip()
    if isinstance(item, McqItem):
        if not (isinstance(item.question, str) and item.question.strip()):
            return "empty question"
        if not isinstance(item.options, tuple) or len(item.options) != 4:
            return "option count"
        if not all(isinstance(o, str) and o.strip() for o in item.options):
            return "empty option"
        if len({fold(o) for o in item.options}) != 4:
            return "duplicate options"
        if type(item.answer_index) is not int or not 0 <= item.answer_index <= 3:
            return "answer index"
        return None
    if isinstance(item, EssayItem):
        for f in (item.question, item.solution, item.answer):
            if not (isinstance(f, str) and f.strip()):
                return "empty essay field"
        if item.question.strip().lower().startswith(("discuss", "describe", "in your opinion")):
            return "open-ended question"
        if count_tokens(item.answer) > 128:
            return "open-ended answer"
        return None
    return f"unexpected type {type(item).__name__}"


def stage_items(targeted: str, actual_counts: dict, meets: int, start: int = 0):
    """MCQ items targeted at one stage plus stage-judge scripts with exact label counts.

    The first ``meets`` items (in generation order) are judged to meet the target.
    Returns ``(items, stage_labels)`` for ``MockBackend(stage_labels=...)``.
    """
    from qasynth.synthesize import Lineage, McqItem, SynthesizedQA

    items, labels = [], {}
    k = start
    for actual, count in actual_counts.items():
        for _ in range(count):
            item = McqItem(f"Stage probe {targeted} #{k}: pick the value.", ("1", "2", "3", "4"), k % 4)
            qa = SynthesizedQA(f"{targeted}-{k}", item, Lineage(f"s{k}", "multi_grade", targeted, "00000000"))
            labels[qa.prompt_text()] = (actual, len(items) < meets)
            items.append(qa)
            k += 1
    return items, labels


def tier_dataset(counts_by_tier: dict, counts_by_discipline: dict):
    """Label tuples whose marginals equal the given counts (totals must agree)."""
    tiers = [t for t, c in counts_by_tier.items() for _ in range(c)]
    discs = [d for d, c in counts_by_discipline.items() for _ in range(c)]
    assert len(tiers) == len(discs)
    return list(zip(discs, tiers))


def token_records(total_tokens: int, seed: int, prefix: str, lo: int = 5, hi: int = 60) -> list[dict]:
    """Records of ``lo..hi`` whitespace tokens summing to exactly ``total_tokens``."""
    rng = np.random.default_rng(seed)
    out, left, k = [], total_tokens, 0
    while left > 0:
        n = min(left, int(rng.integers(lo, hi + 1)))
        words = [WORDS[int(i)] for i in rng.integers(0, len(WORDS), n)]
        words[0] = f"{prefix}{k}"
        out.append({"text": " ".join(words), "tokens": n})
        left -= n
        k += 1
    return out
