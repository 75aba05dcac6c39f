"""
End-to-end run with resumable stages
====================================

Builds a small seed set, runs every stage against the offline backend, then
reruns to show that completed stages are skipped.
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from qasynth.pipeline import run_pipeline

root = Path(tempfile.mkdtemp())
rng = np.random.default_rng(0)
words = "energy matrix vector protein market court theory signal cell force river policy".split()


def sentence(n):
    return " ".join(rng.choice(words, n))


with open(root / "seeds.jsonl", "w") as fh:
    for i in range(60):
        disc = ["Mathematics", "Physics", "History"][i % 3]
        fh.write(json.dumps({"id": f"q{i}", "source": "demo", "question": f"{disc}, level H{1 + i % 5}: {sentence(12)}?",
                             "answer": sentence(3)}) + "\n")
with open(root / "text.jsonl", "w") as fh:
    for i in range(300):
        fh.write(json.dumps({"text": sentence(int(rng.integers(30, 120)))}) + "\n")
(root / "bench").mkdir()
(root / "bench" / "eval.txt").write_text(sentence(40) + "\n")

config = {
    "run_id": "demo", "rng_seed": 3, "backend": {"mock_seed": 0},
    "ingest": {"sources": [{"path": "seeds.jsonl", "kind": "qa_pair"}]},
    "decontam": {"benchmarks": ["bench"]},
    "synth": {"n": 3},
    "blend": {"text_source": "text.jsonl", "shard_size_tokens": 2000},
}
(root / "config.json").write_text(json.dumps(config, indent=2))

first = run_pipeline(root / "config.json")
print("executed:", first.executed)
print(json.dumps(first.manifest.counters["analyze"], indent=2))
second = run_pipeline(root / "config.json")
print("second run executed:", second.executed, "skipped:", len(second.skipped))
print(sorted(p.name for p in (root / "work" / "blend").iterdir())[:5])
