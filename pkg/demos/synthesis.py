"""
Multi-grade and high-difficulty synthesis against the offline backend
=====================================================================

The mock backend echoes a difficulty level hinted in the seed, shifts it by
the requested role, and lifts it further when the booster prompt is used.
"""

from qasynth import analyze
from qasynth.annotate import score_difficulty_batch
from qasynth.gateway import Gateway
from qasynth.ingest import SeedRecord
from qasynth.mock import make_mock_backend
from qasynth.synthesize import SynthesisJob, parse_items, post_verify_difficulty, render_prompt, run_synthesis

seeds = {f"s{i}": SeedRecord(f"s{i}", "qa_pair", 12, "demo",
                             question=f"Kinematics drill {i}, level H{1 + i % 3}: find the stopping distance.",
                             answer=f"{10 + i} m")
         for i in range(12)}
gw = Gateway(make_mock_backend(seed=1))

req = render_prompt(SynthesisJob("s0", "high_difficulty", "graduate"), seeds["s0"])
print(req.user_text[:600], "...\n")

multi = run_synthesis([SynthesisJob(s, "multi_grade", r) for s in seeds
                       for r in ("high_school", "college", "graduate")], seeds, gw)
hard = run_synthesis([SynthesisJob(s, "high_difficulty", "graduate") for s in seeds], seeds, gw)
print("items:", len(multi.items), len(hard.items), "failures:", len(multi.failures) + len(hard.failures))

# re-score the boosted items; anything below H4 moves to the general pool
ver = post_verify_difficulty(hard.items, gw)
print("kept as high-difficulty:", len(ver.kept), "demoted:", len(ver.demoted))

labels = score_difficulty_batch(multi.items, gw)
a = analyze.distribution([("Physics", lab.h_level) for lab in labels], "multi_grade")
b = analyze.distribution([("Physics", it.difficulty.h_level) for it in ver.kept + ver.demoted], "high_difficulty")
print(analyze.markdown_tier_table([a, b]))
print("H4/H5 ratio:", round(analyze.compare_difficulty(a, b).h4h5_ratio, 2))

# the rule enforcer on a messy completion
messy = ('Sure:\n[{"question": "2+2?", "options": ["3", "4", "5"], "answer_index": 1},'
         ' {"question": "3+3?", "options": ["A. 5", "B. 6", "C. 7", "D. 8"], "answer_index": "1"}]')
res = parse_items(messy, "multiple_choice", expected_n=2)
print(res.accepted, res.rejected, sep="\n")
