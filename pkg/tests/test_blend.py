import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixtures import token_records
from qasynth.blend import (
    BlendManifest,
    BlendRecord,
    EmptySource,
    MissingCot,
    QualityScoredDoc,
    RatioUnachievable,
    blend_corpora,
    format_qa,
    interleave,
    load_sources,
    percentile_threshold,
    ratio_drift,
    read_shards,
    select_knowedu,
)
from qasynth.ingest import count_tokens
from qasynth.synthesize import EssayItem, Lineage, McqItem, SynthesizedQA

LIN = Lineage("s1", "multi_grade", "college", "deadbeef")


def doc(i, kd, edu, tokens=10):
    return QualityScoredDoc(f"d{i}", f"body {i}", kd, edu, tokens)


# --- selection -------------------------------------------------------------

def test_and_semantics():
    docs = [doc(0, 0.9, 0.9), doc(1, 0.9, 0.1), doc(2, 0.1, 0.9), doc(3, 0.1, 0.1)]
    kept, rep = select_knowedu(docs, kd_threshold=0.5, edu_threshold=0.5)
    assert [d.doc_id for d in kept] == ["d0"]
    assert (rep.kd_pass, rep.edu_pass, rep.both_pass) == (2, 2, 1)
    assert rep.pass_rates == {"knowledge_density": 0.5, "educational": 0.5, "both": 0.25}


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), max_size=80), st.floats(0, 1), st.floats(0, 1))
def test_pass_counts_match_bruteforce(scores, kt, et):
    docs = [doc(i, a, b) for i, (a, b) in enumerate(scores)]
    kept, rep = select_knowedu(docs, kt, et)
    assert rep.kd_pass == sum(a >= kt for a, _ in scores)
    assert rep.edu_pass == sum(b >= et for _, b in scores)
    assert [d.doc_id for d in kept] == [f"d{i}" for i, (a, b) in enumerate(scores) if a >= kt and b >= et]


def test_percentile_default_keeps_top_fraction():
    rng = np.random.default_rng(0)
    docs = [doc(i, float(a), float(b)) for i, (a, b) in enumerate(rng.random((1000, 2)))]
    kept, rep = select_knowedu(docs)
    assert rep.kd_pass == 200 and rep.edu_pass == 200
    assert 0 < len(kept) < 200
    assert percentile_threshold([1, 2, 3, 4, 5], 0.2) == pytest.approx(4.2)
    with pytest.raises(ValueError):
        percentile_threshold([1.0], 0)


def test_scored_doc_validation_and_aliases():
    with pytest.raises(ValueError):
        doc(0, 0.5, 0.5, tokens=0)
    with pytest.raises(ValueError):
        doc(0, float("nan"), 0.5)
    d = QualityScoredDoc.from_dict({"id": 7, "text": "a b c", "knowledge_density_score": 1, "educational_score": 2})
    assert d.doc_id == "7" and d.token_count == 3


# --- formats ---------------------------------------------------------------

def test_mcq_plain_record():
    item = McqItem("How long does it take?", ("1.25 minutes", "2 minutes", "3 minutes", "4 minutes"), 0)
    qa = SynthesizedQA("x", item, LIN, cot="Think.")
    assert format_qa(qa, "plain") == ("How long does it take?\nA. 1.25 minutes\nB. 2 minutes\nC. 3 minutes\n"
                                      "D. 4 minutes\nA. 1.25 minutes")


def test_essay_cot_three_blocks_and_plain_ignores_cot():
    qa = SynthesizedQA("e", EssayItem("Find x if 2x=4.", "Divide.", "2"), LIN, cot="Divide both sides by 2.")
    assert format_qa(qa, "cot") == "Find x if 2x=4.\nDivide both sides by 2.\n2"
    assert format_qa(qa, "plain") == "Find x if 2x=4.\n2"


def test_missing_cot():
    qa = SynthesizedQA("e", EssayItem("Find x.", "s", "2"), LIN)
    with pytest.raises(MissingCot):
        format_qa(qa, "cot")
    with pytest.raises(ValueError):
        format_qa(qa, "fancy")


# --- blending --------------------------------------------------------------

def manifest(text, qa, ratio=(1, 1), shard=1000, **kw):
    return BlendManifest(text, qa, ratio_text_to_qa=ratio, shard_size_tokens=shard, **kw)


def consumed_check(result, text, qa):
    """Independent accounting: shard contents are a sub-multiset of the sources, tokens add up."""
    rows = [r for s in result.shards for r in s]
    pool = Counter((r["text"], "text", r["tokens"]) for r in text) + \
        Counter((r["text"], "qa", r["tokens"]) for r in qa)
    used = Counter((r.text, r.source, r.tokens) for r in rows)
    assert not (used - pool)
    text_total = sum(r["tokens"] for r in text)
    qa_total = sum(r["tokens"] for r in qa)
    assert result.text_tokens == sum(r.tokens for r in rows if r.source == "text")
    assert result.qa_tokens == sum(r.tokens for r in rows if r.source == "qa")
    assert result.text_tokens + result.unconsumed["text_tokens"] == text_total
    assert result.qa_tokens + result.unconsumed["qa_tokens"] == qa_total


@pytest.mark.parametrize("ratio, tt, qt", [((1, 1), 10_000, 10_000), ((9, 1), 10_000, 1_500)])
def test_ratio_reached_and_tracked(tmp_path, ratio, tt, qt):
    text, qa = token_records(tt, 1, "t"), token_records(qt, 2, "q")
    res = blend_corpora(manifest(text, qa, ratio), tmp_path)
    a, b = ratio
    assert abs(res.achieved_ratio / (a / b) - 1) <= 0.01
    assert all(s.cumulative_drift <= 0.02 for s in res.shard_stats)
    consumed_check(res, text, qa)
    on_disk = read_shards(tmp_path)
    assert sum(r["tokens"] for s in on_disk for r in s) == res.total_tokens
    report = json.loads((tmp_path / "blend_report.json").read_text())
    assert report["status"] == "ok" and len(report["shards"]) == len(on_disk)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**16), st.integers(1, 9), st.integers(1, 9), st.integers(100, 3000))
def test_drift_and_conservation_property(seed, a, b, shard):
    text, qa = token_records(6000, seed, "t"), token_records(6000, seed + 1, "q")
    res = interleave(*load_sources(manifest(text, qa)), manifest(text, qa, (a, b), shard, rng_seed=seed))
    consumed_check(res, text, qa)
    # a shard may only exceed the drift bound when it hit the hard size cap, and is flagged
    for s in res.shard_stats:
        assert s.capped or s.cumulative_drift <= 0.02
    if res.shards and not res.shard_stats[-1].capped:
        assert res.final_drift <= 0.01
    for s, st_ in zip(res.shards, res.shard_stats):
        assert sum(r.tokens for r in s) == st_.text_tokens + st_.qa_tokens


def test_deterministic_bytes(tmp_path):
    text, qa = token_records(5000, 3, "t"), token_records(5000, 4, "q")
    blend_corpora(manifest(text, qa, rng_seed=5), tmp_path / "a")
    blend_corpora(manifest(text, qa, rng_seed=5), tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    assert all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names)
    blend_corpora(manifest(text, qa, rng_seed=6), tmp_path / "c")
    assert (tmp_path / "a" / "shard-00000.jsonl").read_bytes() != (tmp_path / "c" / "shard-00000.jsonl").read_bytes()


def test_records_are_atomic_across_shards(tmp_path):
    text, qa = token_records(4000, 5, "t"), token_records(4000, 6, "q")
    blend_corpora(manifest(text, qa, shard=300), tmp_path)
    src = {r["text"] for r in text + qa}
    seen = [r["text"] for s in read_shards(tmp_path) for r in s]
    assert all(t in src for t in seen) and len(seen) == len(set(seen))


def test_empty_sources():
    with pytest.raises(EmptySource):
        interleave([], [BlendRecord("q", "qa", 1)], manifest([], []))
    with pytest.raises(EmptySource):
        interleave([BlendRecord("t", "text", 1)], [], manifest([], []))


def test_unachievable_ratio_keeps_partial_output(tmp_path):
    text = [{"text": "t " * 500, "tokens": 500}]
    qa = [{"text": "q", "tokens": 1}]
    with pytest.raises(RatioUnachievable) as exc:
        blend_corpora(manifest(text, qa), tmp_path)
    assert exc.value.result.unconsumed["trimmed_records"] >= 0
    assert json.loads((tmp_path / "blend_report.json").read_text())["status"] == "ratio_unachievable"


def test_capped_final_shard_is_reported_unachievable(tmp_path):
    text, qa = token_records(6000, 100, "t"), token_records(6000, 101, "q")
    m = manifest(text, qa, (1, 8), 100, rng_seed=100)
    with pytest.raises(RatioUnachievable) as exc:
        blend_corpora(m, tmp_path)
    assert exc.value.result.shard_stats[-1].capped


def test_shortfall_is_reported():
    text, qa = token_records(10_000, 7, "t"), token_records(2_000, 8, "q")
    res = interleave(*load_sources(manifest(text, qa)), manifest(text, qa))
    assert res.stop_reason == "qa_exhausted" and res.unconsumed["text_tokens"] >= 7_000


def test_target_total_stops_early():
    text, qa = token_records(10_000, 9, "t"), token_records(10_000, 10, "q")
    res = interleave(*load_sources(manifest(text, qa)), manifest(text, qa, target_total_tokens=4000))
    assert res.stop_reason == "target_reached" and res.total_tokens <= 4000 + 60


def test_qa_items_formatted_from_dicts():
    qa = [SynthesizedQA(f"x{i}", EssayItem(f"Find {i}.", "s", str(i)), LIN, cot="c").to_dict() for i in range(3)]
    _, recs = load_sources(manifest([{"text": "a"}], qa, qa_format="cot"))
    assert recs[0].text == "Find 0.\nc\n0" and recs[0].tokens == count_tokens(recs[0].text)


def test_manifest_validation_and_drift_helper():
    with pytest.raises(ValueError):
        manifest([], [], ratio=(0, 1))
    with pytest.raises(ValueError):
        manifest([], [], qa_format="html")
    assert ratio_drift(900, 100, (9, 1)) == 0.0
    assert ratio_drift(0, 0, (1, 1)) == 0.0 and ratio_drift(5, 0, (1, 1)) == float("inf")
    assert ratio_drift(110, 100, (1, 1)) == pytest.approx(0.1)


def test_defaults():
    m = BlendManifest("a", "b")
    assert m.ratio_text_to_qa == (1.0, 1.0) and m.shard_size_tokens == 4_194_304 and m.qa_format == "plain"
