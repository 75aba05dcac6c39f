"""
Few-shot mastery probe
======================

Each item is asked ``trials`` times with a different set of five exemplars
drawn from the same discipline and level.
"""

from qasynth.gateway import Gateway
from qasynth.mock import make_mock_backend
from qasynth.probe import ProbeConfig, ProbeItem, build_fewshot_prompt, by_level, run_probe

items, key = [], {}
for lvl in range(1, 6):
    for k in range(8):
        q = f"Optics item {k} at H{lvl}: which focal length fits?"
        opts = tuple(f"{k + j} cm" for j in range(4))
        it = ProbeItem(f"o{lvl}{k}", q, f"A. {opts[0]}", "Physics", f"H{lvl}", opts, 0)
        items.append(it)
        key[q] = (it.gold_text(), it.h_level, opts)

cfg = ProbeConfig(items, trials=10, shots=5)
print(build_fewshot_prompt(items[0], cfg, trial_index=0, rng_seed=0).user_text[-300:])

# a scripted checkpoint that only masters the two easiest levels
gw = Gateway(make_mock_backend(0, "scripted_grader", answer_key=key, correct_levels=("H1", "H2")))
results = run_probe(items, cfg, gw, checkpoint_tag="demo")
print({lvl: round(acc, 2) for lvl, acc in by_level(results).items()})
