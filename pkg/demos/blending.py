"""
Token-ratio blending into shards
================================

Text and QA records are shuffled, then interleaved so the running
text:QA token ratio stays near the target at every shard cut.
"""

import tempfile

import numpy as np

from qasynth.blend import BlendManifest, QualityScoredDoc, blend_corpora, select_knowedu

rng = np.random.default_rng(0)
docs = [QualityScoredDoc(f"d{i}", " ".join(["token"] * int(n)), float(kd), float(edu), int(n))
        for i, (n, kd, edu) in enumerate(zip(rng.integers(20, 200, 2000), rng.random(2000), rng.random(2000)))]
kept, report = select_knowedu(docs, top_fraction=0.5)  # both scores in the top half
print(report.pass_rates)

qa = [{"text": f"Question {i}?\nAnswer {i}", "tokens": 4} for i in range(20_000)]
for ratio in ((1, 1), (9, 1)):
    out = tempfile.mkdtemp()
    res = blend_corpora(BlendManifest(kept, qa, ratio, shard_size_tokens=5000, rng_seed=1), out)
    print(ratio, f"shards={len(res.shards)} achieved={res.achieved_ratio:.4f} drift={res.final_drift:.2e}",
          "worst shard drift", f"{max(s.cumulative_drift for s in res.shard_stats):.4f}", res.stop_reason)
