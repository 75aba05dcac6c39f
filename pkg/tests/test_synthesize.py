import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from fixtures import invariant_violation, mutate_completion
from qasynth.annotate import AnnotatedSeed, DifficultyLabel, DisciplineLabel, score_difficulty_batch
from qasynth.gateway import Gateway
from qasynth.ingest import SeedRecord
from qasynth.mock import SequenceTransport, make_mock_backend
from qasynth.gateway import BackendProfile
from qasynth.synthesize import (
    EmptyPool,
    EssayItem,
    McqItem,
    NoParsableArray,
    SamplerWeights,
    SynthesisJob,
    SynthesizedQA,
    default_weights,
    mcq_problem,
    parse_items,
    plan_jobs,
    post_verify_difficulty,
    render_prompt,
    role_for_stage,
    run_synthesis,
    sample_seeds_weighted,
)

TIER_OF = {"H1": "basic", "H2": "standard", "H3": "improvement", "H4": "challenge", "H5": "extreme"}


def _ann(i, disc="Physics", h="H3"):
    rec = SeedRecord(f"s{i:04d}", "qa_pair", 12, "t",
                     question=f"Seed problem {i} about {disc} at level {h}: find x.", answer=str(i))
    return AnnotatedSeed(rec, DisciplineLabel(disc, confidence=0.9), DifficultyLabel(TIER_OF[h]))


def _mcqs(n, start=0):
    return [{"question": f"What is {k} + {k}?", "options": [str(2 * k), str(2 * k + 1), str(2 * k + 2), str(2 * k + 3)],
             "answer_index": 0} for k in range(start, start + n)]


def _gw(seed=0, **opts):
    return Gateway(make_mock_backend(seed, **opts))


# --- sampler ---------------------------------------------------------------

def test_uniform_weights_give_uniform_strata():
    pool = [_ann(i, d) for i, d in enumerate(["Physics", "History", "Law", "Linguistics"] * 50)]
    draws = sample_seeds_weighted(pool, SamplerWeights(), 20_000, rng_seed=1)
    counts = np.array([sum(a.discipline.primary_discipline == d for a in draws)
                       for d in ["Physics", "History", "Law", "Linguistics"]])
    sigma = np.sqrt(20_000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - 5000) < 3 * sigma)


def test_stem_triple_weight_share():
    pool = [_ann(i, "Mathematics") for i in range(100)] + [_ann(100 + i, "History") for i in range(100)]
    n = 20_000
    draws = sample_seeds_weighted(pool, default_weights("multi_grade"), n, rng_seed=5)
    stem = sum(a.discipline.primary_discipline == "Mathematics" for a in draws)
    sigma = np.sqrt(n * 0.75 * 0.25)
    assert abs(stem - 0.75 * n) < 3 * sigma
    assert chisquare([stem, n - stem], [0.75 * n, 0.25 * n]).pvalue > 0.01


def test_high_difficulty_weights_favour_hard_levels():
    w = default_weights("high_difficulty")
    assert w.weight("Physics", "H5") == 9.0 and w.weight("History", "H4") == 2.0 and w.weight("History", "H1") == 1.0


def test_single_stratum_and_empty_pool():
    pool = [_ann(i, "Law") for i in range(3)]
    draws = sample_seeds_weighted(pool, default_weights("multi_grade"), 50, rng_seed=0)
    assert {a.discipline.primary_discipline for a in draws} == {"Law"}
    with pytest.raises(EmptyPool):
        sample_seeds_weighted([], SamplerWeights(), 1, rng_seed=0)


def test_sampler_rejects_nonpositive_and_is_seeded():
    with pytest.raises(ValueError):
        SamplerWeights({"Physics": 0.0})
    pool = [_ann(i, d) for i, d in enumerate(["Physics", "Law"] * 10)]
    a = sample_seeds_weighted(pool, SamplerWeights(), 30, rng_seed=9)
    b = sample_seeds_weighted(pool, SamplerWeights(), 30, rng_seed=9)
    assert [x.record_id for x in a] == [x.record_id for x in b]
    with pytest.raises(ValueError):
        sample_seeds_weighted(pool, SamplerWeights(), 21, rng_seed=0, replace=False)


def test_weights_round_trip():
    w = default_weights("high_difficulty")
    assert SamplerWeights.from_dict(json.loads(json.dumps(w.to_dict()))) == w


# --- jobs and prompts ------------------------------------------------------

def test_job_validation():
    with pytest.raises(ValueError):
        SynthesisJob("s", "high_difficulty", "college")
    with pytest.raises(ValueError):
        SynthesisJob("s", "sideways")
    with pytest.raises(ValueError):
        SynthesisJob("s", n=0)
    assert SynthesisJob("s", "high_difficulty", "graduate").n == 10


def test_role_uplift():
    assert [role_for_stage(s) for s in ("high_school", "college", "graduate")] == ["college", "graduate", "graduate"]
    assert role_for_stage("college", uplift=False) == "college"


def test_prompt_constraints_per_type_and_path():
    seed = _ann(0).record
    mcq = render_prompt(SynthesisJob("s0000", "multi_grade", "college", "multiple_choice"), seed).user_text
    assert "four alternative options must be generated" in mcq
    assert "Generate 10 novel questions" in mcq and seed.question in mcq
    essay = render_prompt(SynthesisJob("s0000", "multi_grade", "college", "essay"), seed).user_text
    assert "cannot be open-ended questions" in essay
    hard = render_prompt(SynthesisJob("s0000", "high_difficulty", "graduate"), seed).user_text
    assert "REJECT if not challenge/extreme" in hard
    assert "REJECT" not in mcq


def test_prompt_ids_stable_and_distinct():
    seed = _ann(0).record
    a = render_prompt(SynthesisJob("s0000", role="college"), seed)
    assert a == render_prompt(SynthesisJob("s0000", role="college"), seed)
    assert a.request_id != render_prompt(SynthesisJob("s0000", role="graduate"), seed).request_id


def test_plan_jobs_dedups_and_restricts_roles():
    seeds = [_ann(i) for i in range(6)] + [_ann(0)]
    jobs = plan_jobs(seeds, "high_difficulty", ["multiple_choice"])
    assert {j.role for j in jobs} == {"graduate"} and len(jobs) == 6
    jobs = plan_jobs(seeds[:6], "multi_grade", ["multiple_choice", "essay"])
    assert {j.role for j in jobs} == {"high_school", "college", "graduate"}
    assert {j.question_type for j in jobs} == {"multiple_choice", "essay"}


# --- rule enforcer ---------------------------------------------------------

def test_parse_accepts_well_formed_batch():
    res = parse_items(json.dumps(_mcqs(10)), "multiple_choice", 10)
    assert len(res.accepted) == 10 and not res.rejected and not res.warnings


def test_three_option_mcq_rejected():
    bad = _mcqs(2)
    bad[1]["options"] = bad[1]["options"][:3]
    res = parse_items(json.dumps(bad), "multiple_choice", 2)
    assert len(res.accepted) == 1 and res.rejected[0][1] == "option count 3 ≠ 4"


def test_duplicate_options_after_normalisation_rejected():
    bad = _mcqs(1)
    bad[0]["options"] = ["A. Paris", "b) paris!", "London", "Rome"]
    res = parse_items(json.dumps(bad), "multiple_choice", 1)
    assert res.rejected[0][1] == "duplicate options"


def test_labelled_options_are_stripped():
    el = {"question": "Capital of France?", "options": ["A. Paris", "B. London", "C. Rome", "D. Madrid"],
          "answer_index": "0"}
    item = parse_items(json.dumps([el]), "multiple_choice", 1).accepted[0]
    assert item.options == ("Paris", "London", "Rome", "Madrid") and item.answer_index == 0
    assert item.answer_text == "A. Paris"


@pytest.mark.parametrize("idx", [4, -1, True, "B", 1.5, None])
def test_bad_answer_index_rejected(idx):
    el = _mcqs(1)[0]
    el["answer_index"] = idx
    assert not parse_items(json.dumps([el]), "multiple_choice", 1).accepted


def test_essay_rules():
    good = {"question": "Find x if 2x = 6.", "solution": "Divide by 2.", "answer": "3"}
    empty = {"question": "Find y if y + 1 = 2.", "solution": "Subtract.", "answer": ""}
    open_q = {"question": "Discuss the role of trade.", "solution": "...", "answer": "Many."}
    long_a = {"question": "Find z.", "solution": "...", "answer": " ".join(["w"] * 200)}
    res = parse_items(json.dumps([good, empty, open_q, long_a]), "essay", 4)
    assert len(res.accepted) == 1 and isinstance(res.accepted[0], EssayItem)
    reasons = [r for _, r in res.rejected]
    assert reasons[0] == "empty answer" and reasons[1] == "open-ended question"
    assert reasons[2].startswith("answer longer than")


def test_duplicates_dropped_and_count_mismatch_warns():
    items = _mcqs(3) + [_mcqs(1)[0]]
    res = parse_items(json.dumps(items), "multiple_choice", 5)
    assert len(res.accepted) == 3 and res.rejected[0][1] == "duplicate question"
    assert res.warnings == ["expected 5 items, got 4"]


def test_array_inside_prose_is_found():
    res = parse_items("Sure!\n```json\n" + json.dumps(_mcqs(2)) + "\n```\nThanks", "multiple_choice", 2)
    assert len(res.accepted) == 2


def test_no_array_raises():
    with pytest.raises(NoParsableArray):
        parse_items("I could not think of any questions.", "multiple_choice", 10)


def test_item_constructors_enforce_invariants():
    with pytest.raises(ValueError):
        McqItem("q", ("a", "a", "b", "c"), 0)
    with pytest.raises(ValueError):
        EssayItem("q", "s", " ")
    assert mcq_problem("q", ["a", "b", "c", "d"], 3) is None


@settings(max_examples=300, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), qtype=st.sampled_from(["multiple_choice", "essay"]))
def test_fuzzed_completions_never_yield_invalid_items(seed, qtype):
    text = mutate_completion(np.random.default_rng(seed), qtype)
    try:
        res = parse_items(text, qtype, 5)
    except NoParsableArray:
        return
    for item in res.accepted:
        assert invariant_violation(item) is None
    assert len(res.accepted) + len(res.rejected) >= len(res.accepted)


# --- orchestration ---------------------------------------------------------

@pytest.fixture(scope="module")
def seeds():
    return {a.record_id: a.record for a in (_ann(i, h=f"H{1 + i % 3}") for i in range(50))}


def test_run_synthesis_counts_and_lineage(seeds):
    jobs = [SynthesisJob(sid, "multi_grade", role, "multiple_choice")
            for sid in seeds for role in ("high_school", "college")]
    run = run_synthesis(jobs, seeds, _gw())
    assert len(jobs) == 100 and len(run.items) == 1000 and not run.failures
    assert all(it.lineage.seed_id in seeds for it in run.items)
    assert len({it.qa_id for it in run.items}) == 1000


def test_run_synthesis_is_deterministic(seeds):
    jobs = [SynthesisJob(sid, "multi_grade", "college", qt) for sid in list(seeds)[:10]
            for qt in ("multiple_choice", "essay")]
    a = [json.dumps(i.to_dict(), sort_keys=True) for i in run_synthesis(jobs, seeds, _gw(4)).items]
    b = [json.dumps(i.to_dict(), sort_keys=True) for i in run_synthesis(jobs, seeds, _gw(4)).items]
    assert a == b


def test_unparsable_job_is_logged_not_fatal(seeds):
    profile = BackendProfile("mock://seq", "seq", retry_budget=0, transport=SequenceTransport(["no array here"]))
    run = run_synthesis([SynthesisJob("s0000")], seeds, Gateway(profile))
    assert run.items == [] and len(run.failures) == 1
    assert run.failures[0]["reason"].startswith("no parsable array")


def test_backend_failure_is_recorded(seeds):
    job = SynthesisJob("s0001")
    rid = render_prompt(job, seeds["s0001"]).request_id
    run = run_synthesis([job, SynthesisJob("s0002")], seeds, _gw(permanent_failures=[rid]))
    assert len(run.failures) == 1 and len(run.items) == 10


def test_unknown_seed_reference_raises(seeds):
    with pytest.raises(KeyError):
        run_synthesis([SynthesisJob("nope")], seeds, _gw())


def test_items_round_trip(seeds):
    run = run_synthesis([SynthesisJob("s0000", question_type="essay"), SynthesisJob("s0001")], seeds, _gw())
    for it in run.items:
        assert SynthesizedQA.from_dict(json.loads(json.dumps(it.to_dict()))) == it


def test_booster_raises_difficulty_on_identical_seeds(seeds):
    ids = list(seeds)[:30]
    gw = _gw(2)
    plain = run_synthesis([SynthesisJob(s, "multi_grade", "graduate") for s in ids], seeds, gw).items
    boosted = run_synthesis([SynthesisJob(s, "high_difficulty", "graduate") for s in ids], seeds, gw).items

    def share(items):
        labs = score_difficulty_batch(items, gw)
        return sum(l.h_level in ("H4", "H5") for l in labs) / len(labs)

    assert share(boosted) > share(plain)


def test_post_verify_all_hard_kept(seeds):
    hard = {k: v for k, v in seeds.items()}
    run = run_synthesis([SynthesisJob(s, "high_difficulty", "graduate") for s in list(hard)[:5]], hard,
                        _gw(booster_lift=4))
    v = post_verify_difficulty(run.items, _gw())
    assert len(v.kept) == len(run.items) and not v.demoted
    assert all(i.pool == "high_difficulty" for i in v.kept)


def test_post_verify_conserves_items(seeds):
    run = run_synthesis([SynthesisJob(s, "high_difficulty", "graduate") for s in list(seeds)[:10]], seeds,
                        _gw(booster_lift=0))
    v = post_verify_difficulty(run.items, _gw())
    assert len(v.kept) + len(v.demoted) == len(run.items)
    assert v.demoted and all(i.pool == "general" and i.difficulty.h_level not in ("H4", "H5") for i in v.demoted)
    assert {i.qa_id for i in v.kept + v.demoted} == {i.qa_id for i in run.items}
