"""
Pass rates, tiers and H-levels
==============================
"""

import numpy as np

from qasynth.annotate import TIER_TO_H, tier_from_pass_rate

# band edges are left-closed: 0.10 is already "challenge"
for p in (0.0, 0.0999, 0.10, 0.29, 0.30, 0.5, 0.79, 0.80, 1.0):
    t = tier_from_pass_rate(p)
    print(f"p={p:<6} {t:<12} {TIER_TO_H[t]}")

rates = np.random.default_rng(0).beta(2, 2, size=10_000)
tiers, counts = np.unique([TIER_TO_H[tier_from_pass_rate(float(r))] for r in rates], return_counts=True)
print(dict(zip(tiers.tolist(), (counts / counts.sum()).round(3).tolist())))
