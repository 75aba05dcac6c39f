"""
Removing benchmark overlap from seed data
=========================================

Ten-gram matching over normalized tokens, then an optional embedding pass.
"""

from qasynth.decontam import (
    EmbeddingConfig,
    HashingEmbedder,
    build_ngram_index,
    check_exact,
    embed_benchmarks,
    filter_corpus,
)

benchmark = ["A train leaves the station at noon travelling at sixty miles per hour toward the coast."]
index = build_ngram_index(benchmark)  # 64-bit hashes of every 10-gram
print("benchmark 10-grams:", len(index))

seeds = [
    {"id": "clean", "text": "Photosynthesis converts light into chemical energy inside chloroplasts."},
    # case and punctuation differ, the tokens still line up
    {"id": "leaked", "text": "Q: a TRAIN leaves the station, at noon; travelling at sixty miles per hour!"},
    # only nine tokens in common, so it stays
    {"id": "nine", "text": "leaves the station at noon travelling at sixty miles"},
]
for s in seeds:
    rep = check_exact(s, index)
    print(f"{s['id']:>7}: {rep.verdict}", rep.matched_span or "")

emb = HashingEmbedder()
cfg = EmbeddingConfig(embed_benchmarks(benchmark, emb), emb, threshold=0.95)
result = filter_corpus(seeds, index, cfg)
print("kept:", [r["id"] for r in result.clean])
print("flagged:", [r["id"] for r in result.flagged])
