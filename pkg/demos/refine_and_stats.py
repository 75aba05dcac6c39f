"""
Answer refinement and distribution reports
==========================================
"""

import tempfile
from pathlib import Path

from qasynth import analyze
from qasynth.annotate import score_difficulty_batch
from qasynth.gateway import Gateway
from qasynth.ingest import SeedRecord
from qasynth.mock import make_mock_backend
from qasynth.refine import apply_refinements, assess_and_refine_batch, inconsistency_rate
from qasynth.synthesize import SynthesisJob, run_synthesis

seeds = {f"s{i}": SeedRecord(f"s{i}", "qa_pair", 9, "demo", question=f"Stoichiometry {i}: moles of water?",
                             answer=str(i)) for i in range(30)}
gw = Gateway(make_mock_backend(2, unsolvable_rate=0.1, changed_rate=0.16))
items = run_synthesis([SynthesisJob(s) for s in seeds], seeds, gw).items

outcomes = assess_and_refine_batch(items, gw)
res = apply_refinements(items, {o.qa_id: o for o in outcomes})
print(f"kept {len(res.kept)}, dropped {len(res.dropped)}, answers changed {inconsistency_rate(outcomes):.2%}")
print(res.audit[0])

labels = score_difficulty_batch(res.kept, gw)
rep = analyze.distribution([("Chemistry", lab.h_level) for lab in labels], "refined")
out = Path(tempfile.mkdtemp())
for fmt in ("csv", "json", "markdown"):
    analyze.emit_report([rep], fmt, out)
print(sorted(p.name for p in out.iterdir()))
print((out / "distribution.md").read_text())
