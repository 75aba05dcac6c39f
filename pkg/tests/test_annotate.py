import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qasynth.annotate import (
    DISCIPLINES,
    VOCABULARY,
    AnnotatedSeed,
    DifficultyLabel,
    DisciplineLabel,
    DomainError,
    KeyMismatch,
    StratumQuota,
    annotate_records,
    classify_discipline,
    classify_discipline_batch,
    in_band,
    is_question,
    label_consistency,
    parse_difficulty,
    parse_discipline,
    score_difficulty,
    stratified_sample,
    tier_from_pass_rate,
)
from qasynth.gateway import BackendProfile, Gateway
from qasynth.ingest import SeedRecord
from qasynth.mock import SequenceTransport, make_mock_backend
from qasynth.templates import vocabulary_version

# pass-rate cut points and tiers in ascending-p order, as printed in the scorer prompt
CUTS = [0.10, 0.30, 0.50, 0.80]
ASCENDING = ["extreme", "challenge", "improvement", "standard", "basic"]


def oracle_tier(p: float) -> str:
    return ASCENDING[int(np.digitize(p, CUTS, right=False))]


def _seed(i=0, q="What is 2+2?", a="4"):
    return SeedRecord(f"s{i}", "qa_pair", 5, "t", question=q, answer=a)


def _gw(responses):
    return Gateway(BackendProfile("mock://", "m", transport=SequenceTransport(responses), max_in_flight=1))


def test_vocabulary_is_closed_and_versioned():
    assert len(DISCIPLINES) == 62 and len(set(DISCIPLINES)) == 62
    assert {"cross-discipline", "Other", "Invalid"} <= VOCABULARY and len(VOCABULARY) == 65
    assert vocabulary_version()


@pytest.mark.parametrize("p,tier", [(0.85, "basic"), (0.05, "extreme"), (0.30, "improvement"),
                                    (0.10, "challenge"), (0.50, "standard"), (0.80, "basic"),
                                    (0.0, "extreme"), (1.0, "basic"), (0.7999999, "standard")])
def test_tier_examples(p, tier):
    assert tier_from_pass_rate(p) == tier == oracle_tier(p)


@pytest.mark.parametrize("p", [-0.01, 1.01, float("nan")])
def test_tier_domain(p):
    with pytest.raises(DomainError):
        tier_from_pass_rate(p)


@given(st.floats(0, 1), st.floats(0, 1))
def test_tier_monotone(p, q):
    lo, hi = sorted((p, q))
    assert ASCENDING.index(tier_from_pass_rate(lo)) <= ASCENDING.index(tier_from_pass_rate(hi))


@given(st.floats(0, 1))
def test_bands_partition_unit_interval(p):
    assert sum(in_band(t, p) for t in ASCENDING) == 1
    assert in_band(tier_from_pass_rate(p), p)


def test_parse_discipline_valid_and_case_folded():
    lab = parse_discipline('{"primary_discipline":"mathematics","secondary_discipline":"Algebra",'
                           '"confidence":0.9,"rejection_reason":null}')
    assert lab.primary_discipline == "Mathematics" and lab.secondary_discipline == "Algebra"


def test_off_vocabulary_becomes_invalid():
    lab = classify_discipline(_seed(), _gw(['{"primary_discipline":"Astrology","confidence":0.99}']))
    assert lab.primary_discipline == "Invalid" and lab.rejection_reason == "unknown discipline"


def test_low_confidence_becomes_other():
    assert parse_discipline('{"primary_discipline":"Physics","confidence":0.59}').primary_discipline == "Other"
    assert parse_discipline('{"primary_discipline":"Physics","confidence":0.6}').primary_discipline == "Physics"


def test_malformed_once_then_valid_records_retry():
    gw = _gw(["not json at all", '{"primary_discipline":"Physics","confidence":0.8}'])
    lab = classify_discipline(_seed(), gw)
    assert lab.primary_discipline == "Physics" and lab.parse_retries == 1


def test_malformed_twice_degrades_to_invalid():
    lab = classify_discipline(_seed(), _gw(["nope", "still nope"]))
    assert lab.primary_discipline == "Invalid" and "unparsable" in lab.rejection_reason


def test_backend_error_degrades_without_abort():
    prof = make_mock_backend(0, permanent_failures={"disc-s1"})
    labs = classify_discipline_batch([_seed(0), _seed(1), _seed(2)], Gateway(prof))
    assert [l.primary_discipline == "Invalid" for l in labs] == [False, True, False]


def test_invalid_label_needs_reason():
    with pytest.raises(ValueError):
        DisciplineLabel("Invalid")
    with pytest.raises(ValueError):
        DisciplineLabel("Astrology")


def _diff(tier, rate=None):
    rationale = ["Involves 2 core knowledge points", "Cognitive level: analysis"]
    if rate is not None:
        rationale.append(f"Estimated pass rate: approximately {rate}%")
    return json.dumps({"difficulty_tier": tier, "rationale": rationale})


def test_extreme_maps_to_h5():
    assert score_difficulty(_seed(), _gw([_diff("extreme", 4)])).h_level == "H5"


def test_other_maps_to_none_and_non_question_bucket():
    lab = score_difficulty(_seed(), _gw([_diff("other")]))
    assert lab.h_level == "none"
    ann = AnnotatedSeed(_seed(), DisciplineLabel("Physics", confidence=0.9), lab)
    assert not is_question(ann)


def test_challenge_band_check():
    lab = parse_difficulty(_diff("challenge", 20))
    assert lab.h_level == "H4" and lab.pass_rate_estimate == pytest.approx(0.2) and lab.band_consistent
    bad = parse_difficulty(_diff("challenge", 45))
    assert bad.band_consistent is False


def test_difficulty_label_roundtrip():
    lab = parse_difficulty(_diff("standard", 60))
    assert DifficultyLabel.from_dict(json.loads(json.dumps(lab.to_dict()))) == lab


def test_annotation_replay_is_byte_identical():
    recs = [_seed(i, f"In Chemistry, level H{1 + i % 5}: what is compound {i}?") for i in range(30)]
    runs = [json.dumps([a.to_dict() for a in annotate_records(recs, Gateway(make_mock_backend(4)))])
            for _ in range(2)]
    assert runs[0] == runs[1]
    back = [AnnotatedSeed.from_dict(d) for d in json.loads(runs[0])]
    assert back[0].discipline.primary_discipline == "Chemistry" and back[0].h_level == "H1"


def _labeled(per_stratum=10):
    out = []
    for d in DISCIPLINES:
        for k in range(per_stratum):
            out.append(AnnotatedSeed(_seed(len(out)), DisciplineLabel(d, confidence=0.9), DifficultyLabel("basic")))
    return out


def test_stratified_quota_per_stratum():
    res = stratified_sample(_labeled(), [StratumQuota(d, 5) for d in DISCIPLINES], rng_seed=1)
    assert len(res.items) == 310 and not res.shortfall
    counts = {}
    for a in res.items:
        counts[a.discipline.primary_discipline] = counts.get(a.discipline.primary_discipline, 0) + 1
    assert set(counts.values()) == {5}


def test_stratified_shortfall_and_determinism():
    labeled = _labeled(3)
    q = [StratumQuota("Physics", 5)]
    a = stratified_sample(labeled, q, rng_seed=3)
    assert len(a.items) == 3 and a.shortfall == {"Physics": 2}
    q = [StratumQuota(d, 2) for d in DISCIPLINES]
    ids = lambda r: [x.record_id for x in r.items]
    assert ids(stratified_sample(labeled, q, 9)) == ids(stratified_sample(labeled, q, 9))


def test_stratified_by_discipline_and_tier():
    labeled = _labeled(4)
    res = stratified_sample(labeled, [StratumQuota(("Physics", "H1"), 2)], 0,
                            key=lambda a: (a.discipline.primary_discipline, a.h_level))
    assert len(res.items) == 2


def test_label_consistency():
    ids = [f"r{i}" for i in range(100)]
    a = {i: "Physics" for i in ids}
    b = {i: ("Physics" if k < 82 else "Chemistry") for k, i in enumerate(ids)}
    assert label_consistency(a, a) == 1.0
    assert label_consistency(a, b) == pytest.approx(0.82)
    assert label_consistency(a, {i: "Law" for i in ids}) == 0.0
    with pytest.raises(KeyMismatch):
        label_consistency(a, {"other": "Physics"})
