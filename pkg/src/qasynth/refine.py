"""Answer refinement: drop unsolvable questions, re-derive answers for the rest."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from . import templates
from ._util import extract_json_object, fold_text
from .gateway import BatchError, Gateway, PromptRequest
from .synthesize import OPTION_LETTERS, EssayItem, McqItem, SynthesizedQA, _strip_label


class OrphanOutcome(KeyError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class RefinementOutcome:
    qa_id: str
    solvable: bool
    reason: Optional[str] = None
    refined_answer: Optional[str] = None
    refined_solution: Optional[str] = None
    changed: bool = False
    deferred: bool = False  # backend failure: item kept unrefined unless strict
    refined_index: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.solvable and not self.deferred:
            if self.refined_answer is not None or not self.reason:
                raise ValueError("unsolvable outcomes carry a reason and no refined answer")

    def to_dict(self) -> dict:
        return asdict(self)


def normalize_answer(text: str) -> str:
    """Case/punctuation/whitespace folding; numbers are compared as literal strings."""
    return fold_text(text.strip())


def refine_request(item: SynthesizedQA) -> PromptRequest:
    if isinstance(item.item, McqItem):
        opts = "".join(f"{OPTION_LETTERS[i]}. {o}\n" for i, o in enumerate(item.item.options))
        opts = "Options:\n" + opts
    else:
        opts = ""
    text = templates.fill(templates.load_text("refine.txt"), {
        "Question Type": item.question_type,
        "Question": item.item.question,
        "Options": opts,
        "Answer": item.item.answer_text,
    })
    return PromptRequest(f"refine-{item.qa_id}", text)


def resolve_option(answer: str, options: Sequence[str]) -> Optional[int]:
    """Map a refined MCQ answer ("B", "B. text", or the option text) to an index."""
    a = answer.strip()
    if not a:
        return None
    head = a.lstrip("(").strip()
    if head[:1].upper() in OPTION_LETTERS and (len(head) == 1 or head[1] in ".):： "):
        return OPTION_LETTERS.index(head[0].upper())
    folded = fold_text(_strip_label(a))
    for i, o in enumerate(options):
        if fold_text(o) == folded:
            return i
    return None


def parse_refinement(item: SynthesizedQA, text: str) -> RefinementOutcome:
    try:
        obj = extract_json_object(text)
    except ValueError:
        return RefinementOutcome(item.qa_id, False, reason="unparsable refinement response", deferred=True)
    solvable = obj.get("solvable")
    if isinstance(solvable, str):
        solvable = solvable.strip().lower() in ("true", "yes")
    if not solvable:
        return RefinementOutcome(item.qa_id, False, reason=str(obj.get("reason") or "other"))
    final = obj.get("final_answer")
    final = "" if final is None else str(final).strip()
    solution = obj.get("solution")
    solution = str(solution).strip() if solution else None
    if isinstance(item.item, McqItem):
        idx = resolve_option(final, item.item.options)
        if idx is None:
            return RefinementOutcome(item.qa_id, False, reason="final answer does not name one of the options")
        return RefinementOutcome(item.qa_id, True, None, f"{OPTION_LETTERS[idx]}. {item.item.options[idx]}",
                                 solution, idx != item.item.answer_index, refined_index=idx)
    if not final:
        return RefinementOutcome(item.qa_id, False, reason="no final answer produced")
    changed = normalize_answer(final) != normalize_answer(item.item.answer)
    return RefinementOutcome(item.qa_id, True, None, final, solution, changed)


def assess_and_refine_batch(items: Sequence[SynthesizedQA], gateway: Gateway) -> list[RefinementOutcome]:
    responses = gateway.complete_batch([refine_request(it) for it in items])
    out = []
    for it, resp in zip(items, responses):
        if isinstance(resp, BatchError):
            out.append(RefinementOutcome(it.qa_id, False, reason=f"backend error: {resp.error}", deferred=True))
        else:
            out.append(parse_refinement(it, resp.text))
    return out


def assess_and_refine(item: SynthesizedQA, gateway: Gateway) -> RefinementOutcome:
    return assess_and_refine_batch([item], gateway)[0]


def apply_outcome(item: SynthesizedQA, outcome: RefinementOutcome) -> SynthesizedQA:
    """Only answer/solution fields change; question, options and lineage stay untouched."""
    meta = {"changed": outcome.changed, "deferred": outcome.deferred}
    if outcome.deferred or not outcome.solvable:
        return replace(item, refinement={**meta, "reason": outcome.reason})
    if isinstance(item.item, McqItem):
        new_item = replace(item.item, answer_index=outcome.refined_index)
        meta["solution"] = outcome.refined_solution
    else:
        new_item = EssayItem(item.item.question, outcome.refined_solution or item.item.solution,
                             outcome.refined_answer)
    return replace(item, item=new_item, refinement=meta)


@dataclass
class RefinementResult:
    kept: list[SynthesizedQA]
    dropped: list[SynthesizedQA]
    audit: list[dict] = field(default_factory=list)

    @property
    def deferred(self) -> int:
        return sum(1 for a in self.audit if a["deferred"])


def apply_refinements(items: Iterable[SynthesizedQA], outcomes: Mapping[str, RefinementOutcome],
                      strict: bool = False) -> RefinementResult:
    """Drop unsolvable items and install refined answers on the rest.

    Items without an outcome, or with a deferred one, are kept unrefined
    (dropped when ``strict``).  ``kept + dropped == input`` always.
    """
    items = list(items)
    ids = {it.qa_id for it in items}
    orphans = set(outcomes) - ids
    if orphans:
        raise OrphanOutcome(f"{len(orphans)} outcomes reference unknown items, e.g. {sorted(orphans)[0]!r}")
    res = RefinementResult([], [])
    for it in items:
        oc = outcomes.get(it.qa_id) or RefinementOutcome(it.qa_id, False, reason="no outcome", deferred=True)
        if oc.deferred:
            action = "dropped" if strict else "kept_unrefined"
        elif not oc.solvable:
            action = "dropped"
        else:
            action = "refined"
        res.audit.append({"qa_id": it.qa_id, "action": action, "reason": oc.reason,
                          "changed": oc.changed, "deferred": oc.deferred})
        (res.dropped if action == "dropped" else res.kept).append(apply_outcome(it, oc))
    return res


def inconsistency_rate(outcomes: Iterable[RefinementOutcome]) -> float:
    """Share of solvable, non-deferred outcomes whose answer changed."""
    solvable = [o for o in outcomes if o.solvable and not o.deferred]
    if not solvable:
        raise EmptyInput("no solvable outcomes")
    return sum(o.changed for o in solvable) / len(solvable)


def write_audit(result: RefinementResult, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in result.audit:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
