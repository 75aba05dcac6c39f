"""Two-way QA synthesis: role-conditioned multi-grade generation and boosted high-difficulty generation.

Prompts come from the shipped templates; the rule enforcer lives in
:func:`parse_items`, which only lets structurally sound items through.
"""

from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from . import templates
from ._util import extract_json_array, fold_text, sha_hex
from .annotate import STEM_DISCIPLINES, AnnotatedSeed, score_difficulty_batch
from .gateway import BatchError, Gateway, PromptRequest
from .ingest import count_tokens

log = logging.getLogger(__name__)

PATHS = ("multi_grade", "high_difficulty")
ROLES = ("high_school", "college", "graduate")
QUESTION_TYPES = ("multiple_choice", "essay")
DEFAULT_N = 10
DEFAULT_MAX_ANSWER_TOKENS = 128
OPTION_LETTERS = "ABCD"

ROLE_TEXT = {"high_school": "high school", "college": "college", "graduate": "graduate"}
SEED_FORMAT_TEXT = {"qa_pair": "question", "book": "book excerpt", "web_page": "web page"}
# requested role -> role to ask for so the output lands on the requested stage
UPLIFT = {"high_school": "college", "college": "graduate", "graduate": "graduate"}

_OPEN_ENDED = re.compile(
    r"^\s*(discuss|describe|explain why|explain how|list|outline|reflect|compare and contrast|"
    r"what are (some|the (main|various|different))|how would you|in your opinion|what do you think|"
    r"brainstorm|summari[sz]e|write an essay|elaborate)\b",
    re.I,
)
_OPTION_LABEL = re.compile(r"^\s*\(?[A-Da-d][\.\):]\s+")


class NoParsableArray(ValueError):
    pass


class EmptyPool(ValueError):
    pass


@dataclass(frozen=True)
class SynthesisJob:
    seed_ref: str
    path: str = "multi_grade"
    role: str = "college"
    question_type: str = "multiple_choice"
    n: int = DEFAULT_N

    def __post_init__(self) -> None:
        if self.path not in PATHS:
            raise ValueError(f"unknown path {self.path!r}")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.question_type not in QUESTION_TYPES:
            raise ValueError(f"unknown question_type {self.question_type!r}")
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.path == "high_difficulty" and self.role != "graduate":
            raise ValueError("high_difficulty jobs are restricted to the graduate role")


@dataclass(frozen=True)
class McqItem:
    question: str
    options: tuple[str, str, str, str]
    answer_index: int

    def __post_init__(self) -> None:
        problem = mcq_problem(self.question, list(self.options), self.answer_index)
        if problem:
            raise ValueError(problem)

    @property
    def answer_text(self) -> str:
        return f"{OPTION_LETTERS[self.answer_index]}. {self.options[self.answer_index]}"

    def to_dict(self) -> dict:
        return {"question": self.question, "options": list(self.options), "answer_index": self.answer_index}


@dataclass(frozen=True)
class EssayItem:
    question: str
    solution: str
    answer: str

    def __post_init__(self) -> None:
        for name in ("question", "solution", "answer"):
            if not getattr(self, name).strip():
                raise ValueError(f"empty {name}")

    @property
    def answer_text(self) -> str:
        return self.answer

    def to_dict(self) -> dict:
        return {"question": self.question, "solution": self.solution, "answer": self.answer}


Item = Union[McqItem, EssayItem]


@dataclass(frozen=True)
class Lineage:
    seed_id: str
    path: str
    role: str
    prompt_hash: str
    question_type: str = "multiple_choice"


@dataclass(frozen=True)
class SynthesizedQA:
    qa_id: str
    item: Item
    lineage: Lineage
    discipline: Optional[object] = None  # DisciplineLabel
    difficulty: Optional[object] = None  # DifficultyLabel
    cot: Optional[str] = None
    pool: str = ""  # "high_difficulty" or "general" after verification
    refinement: Optional[dict] = None

    @property
    def question_type(self) -> str:
        return "multiple_choice" if isinstance(self.item, McqItem) else "essay"

    def prompt_text(self) -> str:
        """Text shown to annotators: the question, plus options for MCQs."""
        if isinstance(self.item, McqItem):
            opts = "\n".join(f"{OPTION_LETTERS[i]}. {o}" for i, o in enumerate(self.item.options))
            return f"{self.item.question}\n{opts}"
        return self.item.question

    def contam_text(self) -> str:
        if isinstance(self.item, McqItem):
            return f"{self.prompt_text()}\n{self.item.answer_text}"
        return f"{self.item.question}\n{self.item.solution}\n{self.item.answer}"

    def to_dict(self) -> dict:
        d = {
            "qa_id": self.qa_id,
            "question_type": self.question_type,
            "item": self.item.to_dict(),
            "lineage": asdict(self.lineage),
        }
        if self.discipline is not None:
            d["discipline"] = self.discipline.to_dict()
        if self.difficulty is not None:
            d["difficulty"] = self.difficulty.to_dict()
        if self.cot is not None:
            d["cot"] = self.cot
        if self.pool:
            d["pool"] = self.pool
        if self.refinement is not None:
            d["refinement"] = self.refinement
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthesizedQA":
        from .annotate import DifficultyLabel, DisciplineLabel

        it = d["item"]
        if d.get("question_type", "multiple_choice") == "multiple_choice":
            item: Item = McqItem(it["question"], tuple(it["options"]), int(it["answer_index"]))
        else:
            item = EssayItem(it["question"], it["solution"], it["answer"])
        disc = DisciplineLabel(**d["discipline"]) if "discipline" in d else None
        diff = DifficultyLabel.from_dict(d["difficulty"]) if "difficulty" in d else None
        return cls(d["qa_id"], item, Lineage(**d["lineage"]), disc, diff, d.get("cot"),
                   d.get("pool", ""), d.get("refinement"))


@dataclass(frozen=True)
class SamplerWeights:
    discipline_multipliers: Mapping[str, float] = field(default_factory=dict)
    difficulty_multipliers: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for m in (self.discipline_multipliers, self.difficulty_multipliers):
            for k, v in m.items():
                if not v > 0:
                    raise ValueError(f"multiplier for {k!r} must be > 0, got {v}")

    def weight(self, discipline: str, h_level: str) -> float:
        return self.discipline_multipliers.get(discipline, 1.0) * self.difficulty_multipliers.get(h_level, 1.0)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SamplerWeights":
        return cls(dict(d.get("discipline_multipliers", {})), dict(d.get("difficulty_multipliers", {})))

    def to_dict(self) -> dict:
        return {"discipline_multipliers": dict(self.discipline_multipliers),
                "difficulty_multipliers": dict(self.difficulty_multipliers)}


def default_weights(path: str) -> SamplerWeights:
    """STEM x3 for both paths; high-difficulty additionally H4 x2, H5 x3."""
    stem = {d: 3.0 for d in sorted(STEM_DISCIPLINES)}
    if path == "high_difficulty":
        return SamplerWeights(stem, {"H4": 2.0, "H5": 3.0})
    return SamplerWeights(stem, {})


def role_for_stage(target_stage: str, uplift: bool = True) -> str:
    """Role to request for a desired output stage; generated items tend to land one tier lower."""
    return UPLIFT[target_stage] if uplift else target_stage


# --- sampling --------------------------------------------------------------

def sample_seeds_weighted(annotated: Sequence[AnnotatedSeed], weights: SamplerWeights, count: int,
                          rng_seed: int, replace: bool = True) -> list[AnnotatedSeed]:
    """Draw seeds with probability proportional to discipline x difficulty multipliers."""
    pool = list(annotated)
    if not pool:
        raise EmptyPool("no seeds to sample from")
    w = np.array([weights.weight(a.discipline.primary_discipline, a.h_level) for a in pool], dtype=float)
    p = w / w.sum()
    if not replace and count > len(pool):
        raise ValueError(f"cannot draw {count} without replacement from {len(pool)} seeds")
    rng = np.random.default_rng(rng_seed)
    idx = rng.choice(len(pool), size=count, replace=replace, p=p)
    return [pool[i] for i in idx]


# --- prompt rendering ------------------------------------------------------

def _seed_data(seed) -> str:
    if getattr(seed, "source_kind", None) == "qa_pair":
        return f"Question: {seed.question}\nAnswer: {seed.answer}"
    return seed.body


def render_prompt(job: SynthesisJob, seed) -> PromptRequest:
    rules = templates.load_json("synth_rules.json")
    name = "synth_high_difficulty.txt" if job.path == "high_difficulty" else "synth_multi_grade.txt"
    text = templates.fill(templates.load_text(name), {
        "Role Assigner": ROLE_TEXT[job.role],
        "Seed Format": SEED_FORMAT_TEXT.get(getattr(seed, "source_kind", "qa_pair"), "text"),
        "Number": str(job.n),
        "Format-specific Constraints": rules["constraints"][job.question_type],
        "Format-specified JSON": rules["schema"][job.question_type],
        "Seed Data": _seed_data(seed),
        "Seed data": _seed_data(seed),
    })
    h = sha_hex(text, 16)
    rid = f"synth-{job.seed_ref}-{job.path}-{job.role}-{job.question_type}-{h[:12]}"
    return PromptRequest(rid, text)


# --- rule enforcer ---------------------------------------------------------

def _strip_label(option: str) -> str:
    return _OPTION_LABEL.sub("", option, count=1).strip()


def mcq_problem(question, options, answer_index) -> Optional[str]:
    if not isinstance(question, str) or not question.strip():
        return "empty question"
    if not isinstance(options, (list, tuple)):
        return "options must be a list"
    if len(options) != 4:
        return f"option count {len(options)} ≠ 4"
    if not all(isinstance(o, str) and o.strip() for o in options):
        return "empty or non-text option"
    folded = [fold_text(_strip_label(o)) for o in options]
    if any(not f for f in folded):
        return "empty or non-text option"
    if len(set(folded)) != 4:
        return "duplicate options"
    if isinstance(answer_index, bool) or not isinstance(answer_index, int):
        return "answer_index must be an integer"
    if not 0 <= answer_index <= 3:
        return f"answer_index {answer_index} out of range"
    return None


def is_open_ended(question: str, answer: str, max_answer_tokens: int = DEFAULT_MAX_ANSWER_TOKENS) -> Optional[str]:
    if _OPEN_ENDED.search(question):
        return "open-ended question"
    if count_tokens(answer) > max_answer_tokens:
        return f"answer longer than {max_answer_tokens} tokens"
    return None


def _coerce_index(raw):
    if isinstance(raw, str) and raw.strip().isdigit():
        return int(raw.strip())
    if isinstance(raw, float) and raw.is_integer():
        return int(raw)
    return raw


@dataclass
class ParseResult:
    accepted: list
    rejected: list  # (element, reason)
    warnings: list = field(default_factory=list)


def parse_items(response: str, question_type: str, expected_n: int,
                max_answer_tokens: int = DEFAULT_MAX_ANSWER_TOKENS) -> ParseResult:
    """Extract and validate items; invalid elements are rejected with a reason.

    Raises :class:`NoParsableArray` when no JSON array can be found at all.
    """
    try:
        arr = extract_json_array(response)
    except ValueError as exc:
        raise NoParsableArray(str(exc)) from exc
    res = ParseResult([], [])
    seen: set[str] = set()
    for el in arr:
        if not isinstance(el, dict):
            res.rejected.append((el, "element is not an object"))
            continue
        item, reason = _validate_element(el, question_type, max_answer_tokens)
        if item is None:
            res.rejected.append((el, reason))
            continue
        key = fold_text(item.question)
        if key in seen:
            res.rejected.append((el, "duplicate question"))
            continue
        seen.add(key)
        res.accepted.append(item)
    if len(arr) != expected_n:
        res.warnings.append(f"expected {expected_n} items, got {len(arr)}")
    return res


def _validate_element(el: dict, question_type: str, max_answer_tokens: int):
    question = el.get("question")
    if question_type == "multiple_choice":
        options = el.get("options")
        idx = _coerce_index(el.get("answer_index"))
        problem = mcq_problem(question, options, idx)
        if problem:
            return None, problem
        return McqItem(question.strip(), tuple(_strip_label(o) for o in options), idx), None
    for name in ("question", "solution", "answer"):
        val = el.get(name)
        if isinstance(val, (int, float)) and not isinstance(val, bool) and name == "answer":
            el = {**el, "answer": str(val)}
            continue
        if not isinstance(val, str):
            return None, f"missing {name}" if val is None else f"{name} must be text"
        if not val.strip():
            return None, f"empty {name}"
    problem = is_open_ended(el["question"], el["answer"], max_answer_tokens)
    if problem:
        return None, problem
    return EssayItem(el["question"].strip(), el["solution"].strip(), el["answer"].strip()), None


# --- orchestration ---------------------------------------------------------

@dataclass
class SynthesisRun:
    items: list[SynthesizedQA]
    failures: list[dict]
    rejected: int = 0


def run_synthesis(jobs: Iterable[SynthesisJob], seeds: Mapping[str, object], gateway: Gateway) -> SynthesisRun:
    """render -> complete -> parse for each job; a failed job is logged and skipped."""
    jobs = list(jobs)
    reqs = []
    for job in jobs:
        if job.seed_ref not in seeds:
            raise KeyError(f"job references unknown seed {job.seed_ref!r}")
        reqs.append(render_prompt(job, seeds[job.seed_ref]))
    responses = gateway.complete_batch(reqs)
    run = SynthesisRun([], [])
    for job, req, resp in zip(jobs, reqs, responses):
        h = req.request_id.rsplit("-", 1)[-1]
        if isinstance(resp, BatchError):
            run.failures.append({"request_id": req.request_id, "reason": f"backend: {resp.error}"})
            continue
        try:
            parsed = parse_items(resp.text, job.question_type, job.n)
        except NoParsableArray as exc:
            log.warning("job %s produced no parsable array", req.request_id)
            run.failures.append({"request_id": req.request_id, "reason": f"no parsable array: {exc}"})
            continue
        run.rejected += len(parsed.rejected)
        lineage = Lineage(job.seed_ref, job.path, job.role, h, job.question_type)
        for k, item in enumerate(parsed.accepted):
            qa_id = f"{job.seed_ref}:{job.path}:{job.role}:{job.question_type}:{h[:8]}:{k}"
            run.items.append(SynthesizedQA(qa_id, item, lineage, pool=job.path))
    return run


@dataclass
class Verification:
    kept: list[SynthesizedQA]
    demoted: list[SynthesizedQA]


def post_verify_difficulty(items: Sequence[SynthesizedQA], gateway: Gateway,
                           keep: Iterable[str] = ("H4", "H5")) -> Verification:
    """Re-score items; those outside ``keep`` move to the general pool (never deleted)."""
    keep = set(keep)
    labels = score_difficulty_batch(list(items), gateway)
    out = Verification([], [])
    for item, lab in zip(items, labels):
        if lab.h_level in keep:
            out.kept.append(replace(item, difficulty=lab, pool="high_difficulty"))
        else:
            out.demoted.append(replace(item, difficulty=lab, pool="general"))
    return out


def plan_jobs(seeds: Sequence[AnnotatedSeed], path: str, question_types: Sequence[str],
              roles: Sequence[str] = ROLES, n: int = DEFAULT_N) -> list[SynthesisJob]:
    """Cycle roles/question types deterministically over the sampled seeds."""
    roles = ["graduate"] if path == "high_difficulty" else list(roles)
    jobs = []
    seen = set()
    for i, a in enumerate(seeds):
        job = SynthesisJob(a.record_id, path, roles[i % len(roles)],
                           question_types[(i // len(roles)) % len(question_types)], n)
        if job in seen:  # with-replacement draws repeat seeds; identical jobs are idempotent
            continue
        seen.add(job)
        jobs.append(job)
    return jobs
