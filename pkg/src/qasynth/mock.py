"""Deterministic offline backends.

Every response is a pure function of ``(seed, prompt text)``, so results do not
depend on call order or concurrency.  The scripted backends recognise each
prompt family by its template marker and answer in the schema that stage
expects.
"""

from __future__ import annotations

import json
import re
import threading
import time
from typing import Callable, Iterable, Mapping, Optional, Sequence

from . import templates
from ._util import stable_hash
from .gateway import (
    BackendProfile,
    BackendTimeout,
    PermanentBackendError,
    PromptRequest,
    TransientBackendError,
)

BEHAVIORS = ("echo", "scripted_json", "scripted_grader")
STAGES = ("primary", "junior_high", "high_school", "college", "graduate", "other")

_LEVEL = re.compile(r"\blevel H([1-5])\b|\[H([1-5])\]")
_NUMBER = re.compile(r"Generate (\d+) novel questions")
_ROLE = re.compile(r"Act as an? (.+?) educator")
_TARGET = re.compile(r"Targeted stage: (\S+)")
# level midpoint pass rates inside each tier's band
_LEVEL_PASS = {1: 90, 2: 65, 3: 40, 4: 20, 5: 5}
_LEVEL_TIER = {1: "basic", 2: "standard", 3: "improvement", 4: "challenge", 5: "extreme"}
_ROLE_BUMP = {"high school": -1, "college": 0, "graduate": 1}


def _payload(text: str) -> str:
    """The seed/item section of a prompt (after the last ``Input:``)."""
    idx = text.rfind("Input:")
    return text[idx + len("Input:"):].strip() if idx >= 0 else text


def _level_hint(text: str) -> Optional[int]:
    m = _LEVEL.search(text)
    if not m:
        return None
    return int(m.group(1) or m.group(2))


class MockBackend:
    """Transport callable with in-flight instrumentation and failure injection.

    Options:
      transient_failures: fail the first k attempts of every request.
      permanent_failures: request ids that always fail permanently.
      timeouts: request ids that always time out.
      delay: seconds to sleep inside each call (exercises concurrency).
      answer_key: probe question text -> (gold answer text, h_level, options or None).
      correct_levels: h_levels the scripted grader answers correctly.
      grader_rule: optional ``(question, h_level, prompt) -> bool`` override.
      stage_labels: question text -> (actual_stage, meets_target) for the stage judge.
      unsolvable_rate / changed_rate: refinement behaviour, drawn by hash.
      booster_lift: levels the difficulty booster adds to generated items.
    """

    def __init__(self, seed: int = 0, behavior: str = "scripted_json", *,
                 transient_failures: int = 0,
                 permanent_failures: Iterable[str] = (),
                 timeouts: Iterable[str] = (),
                 delay: float = 0.0,
                 answer_key: Optional[Mapping[str, tuple]] = None,
                 correct_levels: Iterable[str] = ("H1", "H2"),
                 grader_rule: Optional[Callable[[str, str, str], bool]] = None,
                 stage_labels: Optional[Mapping[str, tuple]] = None,
                 unsolvable_rate: float = 0.05,
                 changed_rate: float = 0.15,
                 booster_lift: int = 2):
        if behavior not in BEHAVIORS:
            raise ValueError(f"unknown mock behavior {behavior!r}")
        self.seed = seed
        self.behavior = behavior
        self.transient_failures = transient_failures
        self.permanent_failures = set(permanent_failures)
        self.timeouts = set(timeouts)
        self.delay = delay
        self.answer_key = dict(answer_key or {})
        self.correct_levels = set(correct_levels)
        self.grader_rule = grader_rule
        self.stage_labels = dict(stage_labels or {})
        self.unsolvable_rate = unsolvable_rate
        self.changed_rate = changed_rate
        self.booster_lift = booster_lift
        self._lock = threading.Lock()
        self._attempts: dict[str, int] = {}
        self.in_flight = 0
        self.peak_in_flight = 0
        self.calls = 0

    # -- transport protocol --
    def __call__(self, request: PromptRequest, profile: BackendProfile) -> str:
        with self._lock:
            self.calls += 1
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
            n = self._attempts.get(request.request_id, 0) + 1
            self._attempts[request.request_id] = n
        try:
            if self.delay:
                time.sleep(self.delay)
            if request.request_id in self.permanent_failures:
                raise PermanentBackendError(f"scripted permanent failure for {request.request_id}")
            if request.request_id in self.timeouts:
                raise BackendTimeout(f"scripted timeout for {request.request_id}")
            if n <= self.transient_failures:
                raise TransientBackendError(f"scripted transient failure {n}")
            return self.respond(request)
        finally:
            with self._lock:
                self.in_flight -= 1

    def _h(self, *parts) -> int:
        return stable_hash(self.seed, *parts)

    def respond(self, request: PromptRequest) -> str:
        text = request.user_text
        if self.behavior == "echo":
            return text
        if templates.PROBE_MARKER in text:
            return self._probe(text)
        if templates.DISCIPLINE_MARKER in text:
            return self._discipline(text)
        if templates.DIFFICULTY_MARKER in text:
            return self._difficulty(text)
        if templates.SYNTHESIS_MARKER in text:
            return self._synthesis(text)
        if templates.REFINE_MARKER in text:
            return self._refine(text)
        if templates.STAGE_MARKER in text:
            return self._stage(text)
        return text

    # -- prompt families --
    def _discipline(self, text: str) -> str:
        data = _payload(text)
        low = data.lower()
        choice = None
        for d in sorted(templates.discipline_list(), key=len, reverse=True):
            if d.lower() in low:
                choice = d
                break
        if choice is None:
            vocab = templates.discipline_list()
            choice = vocab[self._h("disc", data) % len(vocab)]
        return json.dumps({"primary_discipline": choice, "secondary_discipline": "General",
                           "confidence": 0.9, "rejection_reason": None})

    def _difficulty(self, text: str) -> str:
        data = _payload(text)
        level = _level_hint(data) or (1 + self._h("diff", data) % 5)
        return json.dumps({
            "difficulty_tier": _LEVEL_TIER[level],
            "rationale": [
                f"Involves {1 + self._h('concepts', data) % 3} core knowledge points",
                "Cognitive level: application",
                f"Estimated pass rate: approximately {_LEVEL_PASS[level]}%",
            ],
        })

    def _synthesis(self, text: str) -> str:
        n = int(_NUMBER.search(text).group(1))
        mcq = "The generated question type is multiple-choice" in text
        role_m = _ROLE.search(text)
        role = role_m.group(1) if role_m else "college"
        boosted = templates.BOOSTER_MARKER in text
        data = _payload(text)
        base = _level_hint(data) or (1 + self._h("seedlvl", data) % 3)
        topic = " ".join(re.findall(r"[A-Za-z]+", data)[:4]) or "the topic"
        items = []
        for k in range(n):
            jitter = self._h("jit", data, role, boosted, k) % 3 - 1  # -1, 0, +1
            level = base + _ROLE_BUMP.get(role, 0) + (self.booster_lift if boosted else 0) + jitter
            level = min(5, max(1, level))
            tag = self._h("q", data, role, boosted, mcq, k) % 100000
            q = f"Regarding {topic}, variant {tag}-{k + 1} ({role}, level H{level}): compute the required quantity."
            if mcq:
                items.append({
                    "question": q,
                    "options": [f"{v} units (case {tag}-{k + 1})" for v in (tag % 97 + 1, tag % 97 + 2,
                                                                           tag % 97 + 3, tag % 97 + 4)],
                    "answer_index": self._h("ans", tag, k) % 4,
                })
            else:
                items.append({
                    "question": q,
                    "solution": f"Step 1: identify the knowledge point. Step 2: apply it to case {tag}.",
                    "answer": str(tag % 997),
                })
        return "Here are the questions:\n```json\n" + json.dumps(items, ensure_ascii=False) + "\n```"

    def _refine(self, text: str) -> str:
        q = re.search(r"^Question: (.*)$", text, re.M)
        question = q.group(1) if q else text
        proposed = re.search(r"^Proposed answer: (.*)$", text, re.M)
        proposed = proposed.group(1).strip() if proposed else ""
        is_mcq = "Question type: multiple_choice" in text
        u = (self._h("solv", question) % 10000) / 10000
        if u < self.unsolvable_rate:
            return json.dumps({"solvable": False, "reason": "missing critical information",
                               "solution": "", "final_answer": ""})
        c = (self._h("chg", question) % 10000) / 10000
        answer = proposed
        if c < self.changed_rate:
            if is_mcq and proposed[:1] in "ABCD" and proposed[:1]:
                answer = "ABCD"[("ABCD".index(proposed[0]) + 1) % 4]
            else:
                answer = f"{proposed} (revised)"
        elif is_mcq and proposed[:1]:
            answer = proposed[0]
        return json.dumps({"solvable": True, "reason": None,
                           "solution": f"Step 1: restate. Step 2: derive. Final: {answer}",
                           "final_answer": answer})

    def _stage(self, text: str) -> str:
        q = re.search(r"^Question: (.*)$", text, re.M | re.S)
        question = q.group(1).strip() if q else ""
        if question in self.stage_labels:
            actual, meets = self.stage_labels[question]
        else:
            target = _TARGET.search(text).group(1) if _TARGET.search(text) else "college"
            i = STAGES.index(target) if target in STAGES else 3
            actual = STAGES[max(0, i - 1)] if self._h("stage", question) % 10 < 6 else target
            meets = self._h("meets", question) % 10 < 4
        return json.dumps({"actual_stage": actual, "meets_target": bool(meets)})

    def _probe(self, text: str) -> str:
        block = text.rsplit("Question:", 1)[-1]
        question = block.split("\n", 1)[0].strip()
        entry = self.answer_key.get(question)
        if entry is None:
            return "ABCD"[self._h("guess", question) % 4]
        gold, h_level = entry[0], entry[1]
        options = entry[2] if len(entry) > 2 else None
        if self.grader_rule is not None:
            right = self.grader_rule(question, h_level, text)
        else:
            right = h_level in self.correct_levels
        if right:
            return gold
        if options:
            letter = gold.strip()[:1].upper()
            wrong = "ABCD"[("ABCD".index(letter) + 1) % 4] if letter in "ABCD" else "A"
            return f"{wrong}. {options['ABCD'.index(wrong)]}"
        return "I am not sure."


class SequenceTransport:
    """Replays a fixed list of responses in call order (single-threaded tests)."""

    def __init__(self, responses: Sequence[str]):
        self.responses = list(responses)
        self.calls = 0

    def __call__(self, request: PromptRequest, profile: BackendProfile) -> str:
        text = self.responses[min(self.calls, len(self.responses) - 1)]
        self.calls += 1
        return text


def make_mock_backend(seed: int = 0, behavior: str = "scripted_json", *,
                      max_in_flight: int = 8, retry_budget: int = 2, **options) -> BackendProfile:
    """A :class:`BackendProfile` whose transport is a seeded :class:`MockBackend`."""
    mock = MockBackend(seed, behavior, **options)
    return BackendProfile(endpoint_url=f"mock://{behavior}?seed={seed}", model_id=f"mock-{behavior}",
                          max_in_flight=max_in_flight, retry_budget=retry_budget, backoff_base=0.0,
                          transport=mock)
