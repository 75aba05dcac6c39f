"""Resumable end-to-end runner: ingest -> decontam -> annotate -> probe? -> synth -> refine
-> decontam_post -> analyze -> blend.

Each stage writes its artifacts under ``workdir/<stage>/`` and a completion
marker plus config hash into ``workdir/manifest.json``.  Rerunning skips
completed stages; a completed stage whose config hash no longer matches is a
hard error.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

from . import analyze, blend, decontam, ingest, probe, refine, synthesize
from ._util import canonical_json, read_jsonl, stable_hash, write_jsonl
from .annotate import AnnotatedSeed, annotate_records, score_difficulty_batch
from .gateway import BackendProfile, Gateway
from .mock import make_mock_backend

log = logging.getLogger(__name__)

STAGES = ("ingest", "decontam", "annotate", "probe", "synth", "refine", "decontam_post", "analyze", "blend")
REPORT_FORMATS = ("csv", "json", "markdown")

DEFAULTS: dict = {
    "run_id": "run",
    "rng_seed": 0,
    "workdir": "work",
    "backend": {"mock_seed": None, "endpoint_url": None, "model_id": None, "max_in_flight": 8,
                "timeout": 60.0, "retry_budget": 3},
    "ingest": {"sources": [], "chunk_max_tokens": ingest.DEFAULT_CHUNK_TOKENS},
    "decontam": {"benchmarks": [], "ngram_size": decontam.DEFAULT_N, "embedding": False,
                 "embed_threshold": decontam.DEFAULT_EMBED_THRESHOLD},
    "annotate": {"drop_invalid": True},
    "probe": {"enabled": False, "trials": 10, "shots": 5, "checkpoint_tag": "base"},
    "synth": {"n": synthesize.DEFAULT_N, "paths": list(synthesize.PATHS),
              "question_types": list(synthesize.QUESTION_TYPES), "roles": list(synthesize.ROLES),
              "seeds_per_path": None, "weights_file": None, "post_verify": True},
    "refine": {"strict": False},
    "analyze": {"formats": list(REPORT_FORMATS), "stage_alignment": False,
                "stage_per_stage": analyze.DEFAULT_PER_STAGE},
    "blend": {"text_source": None, "ratio": [1, 1], "shard_size_tokens": blend.DEFAULT_SHARD_TOKENS,
              "qa_format": "plain", "knowedu_top_fraction": blend.DEFAULT_TOP_FRACTION,
              "drift_bound": blend.DEFAULT_DRIFT_BOUND, "final_tolerance": blend.DEFAULT_FINAL_TOLERANCE},
}

# keys whose values are file paths (resolved against the config's directory, digested into stage hashes)
_PATH_KEYS = {("ingest", "sources"), ("decontam", "benchmarks"), ("synth", "weights_file"),
              ("blend", "text_source")}
_NULLABLE = {("backend", "mock_seed"), ("backend", "endpoint_url"), ("backend", "model_id"),
             ("synth", "seeds_per_path"), ("synth", "weights_file"), ("blend", "text_source"),
             ("analyze", "stage_per_stage")}


class ConfigError(ValueError):
    def __init__(self, errors: Sequence[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


class ConfigDrift(RuntimeError):
    pass


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


# --- configuration ---------------------------------------------------------

def _type_ok(default: Any, value: Any) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def _check_enums(cfg: dict, errors: list[str]) -> None:
    for i, src in enumerate(cfg["ingest"]["sources"]):
        if not isinstance(src, dict) or set(src) - {"path", "kind"} or "path" not in src:
            errors.append(f"ingest.sources[{i}]: expected {{path, kind}}")
        elif src.get("kind", "qa_pair") not in ingest.SOURCE_KINDS:
            errors.append(f"ingest.sources[{i}].kind: unknown source kind {src.get('kind')!r}")
    for p in cfg["synth"]["paths"]:
        if p not in synthesize.PATHS:
            errors.append(f"synth.paths: unknown path {p!r}")
    for q in cfg["synth"]["question_types"]:
        if q not in synthesize.QUESTION_TYPES:
            errors.append(f"synth.question_types: unknown question type {q!r}")
    for r in cfg["synth"]["roles"]:
        if r not in synthesize.ROLES:
            errors.append(f"synth.roles: unknown role {r!r}")
    if cfg["synth"]["n"] < 1:
        errors.append("synth.n: must be positive")
    for f in cfg["analyze"]["formats"]:
        if f not in REPORT_FORMATS:
            errors.append(f"analyze.formats: unknown format {f!r}")
    ratio = cfg["blend"]["ratio"]
    if len(ratio) != 2 or not all(isinstance(x, (int, float)) and x > 0 for x in ratio):
        errors.append("blend.ratio: expected two positive numbers")
    if cfg["blend"]["qa_format"] not in blend.QA_FORMATS:
        errors.append(f"blend.qa_format: unknown format {cfg['blend']['qa_format']!r}")
    if not 0 < cfg["blend"]["knowedu_top_fraction"] <= 1:
        errors.append("blend.knowedu_top_fraction: must be in (0, 1]")
    if cfg["probe"]["trials"] < 1 or cfg["probe"]["shots"] < 0:
        errors.append("probe: trials must be >= 1 and shots >= 0")


def validate_config(source: "str | Path | Mapping") -> dict:
    """Fill every default and reject unknown keys; returns the normalized config.

    Errors are collected and raised together as :class:`ConfigError`, each
    naming its dotted key path.  Normalizing an already-normalized config is
    the identity.
    """
    if isinstance(source, (str, Path)):
        try:
            raw = json.loads(Path(source).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([f"cannot read config {source}: {exc}"]) from exc
    else:
        raw = source
    if not isinstance(raw, Mapping):
        raise ConfigError(["config must be a JSON object"])
    errors: list[str] = []
    cfg = copy.deepcopy(DEFAULTS)
    for key, val in raw.items():
        if key not in DEFAULTS:
            errors.append(f"{key}: unknown key")
            continue
        default = DEFAULTS[key]
        if isinstance(default, dict):
            if not isinstance(val, Mapping):
                errors.append(f"{key}: expected an object")
                continue
            for sub, sval in val.items():
                if sub not in default:
                    errors.append(f"{key}.{sub}: unknown key")
                elif sval is None and (key, sub) in _NULLABLE:
                    cfg[key][sub] = None
                elif default[sub] is not None and not _type_ok(default[sub], sval):
                    errors.append(f"{key}.{sub}: expected {type(default[sub]).__name__}, got {sval!r}")
                else:
                    cfg[key][sub] = float(sval) if isinstance(default[sub], float) else copy.deepcopy(sval)
        elif not _type_ok(default, val):
            errors.append(f"{key}: expected {type(default).__name__}, got {val!r}")
        else:
            cfg[key] = val
    if not errors:
        _check_enums(cfg, errors)
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path: str | Path) -> tuple[dict, Path]:
    """Validated config plus the directory its relative paths resolve against."""
    return validate_config(path), Path(path).resolve().parent


# --- manifest --------------------------------------------------------------

@dataclass
class PipelineManifest:
    run_id: str
    rng_seed: int
    stages: list[str]
    config_hashes: dict[str, str] = field(default_factory=dict)
    completed: dict[str, bool] = field(default_factory=dict)
    counters: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, "rng_seed": self.rng_seed, "stages": self.stages,
                "config_hashes": self.config_hashes, "completed": self.completed, "counters": self.counters}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineManifest":
        return cls(d["run_id"], d["rng_seed"], list(d["stages"]), dict(d["config_hashes"]),
                   dict(d["completed"]), dict(d.get("counters", {})))

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        tmp.replace(path)

    def may_run(self, stage: str) -> bool:
        i = self.stages.index(stage)
        return all(self.completed.get(s) for s in self.stages[:i])


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(f.relative_to(path)).encode())
            h.update(f.read_bytes())
    elif path.exists():
        h.update(path.read_bytes())
    else:
        return "missing"
    return h.hexdigest()[:16]


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def stage_hash(cfg: Mapping, stage: str, base: Path) -> str:
    """Hash of the stage's config section, the global seed, and digests of referenced files."""
    section_name = "decontam" if stage == "decontam_post" else stage
    section = cfg.get(section_name, {})
    digests = {}
    for (sec, key) in _PATH_KEYS:
        if sec != section_name or section.get(key) is None:
            continue
        val = section[key]
        paths = [v["path"] if isinstance(v, dict) else v for v in val] if isinstance(val, list) else [val]
        digests[key] = [_file_digest(_resolve(base, p)) for p in paths]
    payload = {"stage": stage, "section": section, "rng_seed": cfg["rng_seed"], "files": digests}
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()[:16]


def stage_seed(rng_seed: int, stage: str) -> int:
    return stable_hash(rng_seed, stage) & 0xFFFFFFFF


def active_stages(cfg: Mapping) -> list[str]:
    return [s for s in STAGES if s != "probe" or cfg["probe"]["enabled"]]


def make_gateway(cfg: Mapping, mock_seed: Optional[int] = None) -> Gateway:
    b = cfg["backend"]
    seed = mock_seed if mock_seed is not None else b["mock_seed"]
    if seed is not None:
        return Gateway(make_mock_backend(int(seed), max_in_flight=b["max_in_flight"]))
    overrides = {k: b[k] for k in ("endpoint_url", "model_id") if b[k]}
    profile = BackendProfile.from_env(max_in_flight=b["max_in_flight"], timeout=b["timeout"],
                                      retry_budget=b["retry_budget"], **overrides)
    return Gateway(profile)


# --- stage bodies ----------------------------------------------------------

@dataclass
class _Ctx:
    cfg: dict
    base: Path
    work: Path
    gateway_factory: Callable[[], Gateway]
    _gw: Optional[Gateway] = None

    @property
    def gateway(self) -> Gateway:
        if self._gw is None:
            self._gw = self.gateway_factory()
        return self._gw

    def dir(self, stage: str) -> Path:
        d = self.work / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def seed(self, stage: str) -> int:
        return stage_seed(self.cfg["rng_seed"], stage)


def _seed_rows(path: Path) -> list[ingest.SeedRecord]:
    return [ingest.SeedRecord.from_dict(d) for d in read_jsonl(path)]


def _qa_rows(path: Path) -> list[synthesize.SynthesizedQA]:
    return [synthesize.SynthesizedQA.from_dict(d) for d in read_jsonl(path)]


def _annotated_rows(path: Path) -> list[AnnotatedSeed]:
    return [AnnotatedSeed.from_dict(d) for d in read_jsonl(path)]


def _stage_ingest(ctx: _Ctx) -> dict:
    sec = ctx.cfg["ingest"]
    if not sec["sources"]:
        raise ValueError("ingest.sources is empty")
    out = ctx.dir("ingest")
    records: list[ingest.SeedRecord] = []
    rejects: list[ingest.Reject] = []
    seen: set[str] = set()
    for src in sec["sources"]:
        path = _resolve(ctx.base, src["path"])
        for rec in ingest.read_seeds(path, src.get("kind", "qa_pair"), rejects=rejects):
            for r in ingest.expand_seed(rec, sec["chunk_max_tokens"]):
                if r.seed_id in seen:
                    raise ValueError(f"duplicate seed id {r.seed_id!r}")
                seen.add(r.seed_id)
                records.append(r)
    write_jsonl(out / "seeds.jsonl", (r.to_dict() for r in records))
    write_jsonl(out / "rejects.jsonl", ({"line_no": r.line_no, "reason": r.reason, "raw": r.raw} for r in rejects))
    if not records:
        first = f"; first reject: {rejects[0].reason}" if rejects else ""
        raise ValueError(f"no valid seeds ingested ({len(rejects)} rejected{first})")
    return {"records": len(records), "rejects": len(rejects)}


def _benchmark_index(ctx: _Ctx):
    sec = ctx.cfg["decontam"]
    paths = [_resolve(ctx.base, p) for p in sec["benchmarks"]]
    texts = list(decontam.load_benchmark_texts(paths))
    index = decontam.build_ngram_index(texts, sec["ngram_size"])
    embed = None
    if sec["embedding"]:
        emb = decontam.HashingEmbedder()
        embed = decontam.EmbeddingConfig(decontam.embed_benchmarks(texts, emb), emb, sec["embed_threshold"])
    return index, embed


def _decontaminate(ctx: _Ctx, stage: str, records: list, to_dict: Callable) -> dict:
    out = ctx.dir(stage)
    if not ctx.cfg["decontam"]["benchmarks"]:
        raise ValueError("decontam.benchmarks is empty; decontamination cannot be skipped")
    index, embed = _benchmark_index(ctx)
    res = decontam.filter_corpus(records, index, embed)
    write_jsonl(out / "clean.jsonl", (to_dict(r) for r in res.clean))
    res.write_report(out / "report.jsonl")
    return {"input": len(records), "clean": len(res.clean), "flagged": len(res.flagged)}


def _stage_decontam(ctx: _Ctx) -> dict:
    recs = _seed_rows(ctx.work / "ingest" / "seeds.jsonl")
    return _decontaminate(ctx, "decontam", recs, lambda r: r.to_dict())


def _stage_annotate(ctx: _Ctx) -> dict:
    recs = _seed_rows(ctx.work / "decontam" / "clean.jsonl")
    labeled = annotate_records(recs, ctx.gateway)
    kept = [a for a in labeled if not (ctx.cfg["annotate"]["drop_invalid"]
                                       and a.discipline.primary_discipline == "Invalid")]
    write_jsonl(ctx.dir("annotate") / "annotated.jsonl", (a.to_dict() for a in kept))
    return {"input": len(recs), "annotated": len(kept), "invalid": len(labeled) - len(kept)}


def _stage_probe(ctx: _Ctx) -> dict:
    sec = ctx.cfg["probe"]
    anns = _annotated_rows(ctx.work / "annotate" / "annotated.jsonl")
    items = [probe.ProbeItem.from_annotated(a) for a in anns
             if a.record.source_kind == "qa_pair" and a.h_level != "none"]
    config = probe.ProbeConfig(items, sec["trials"], sec["shots"])
    results = probe.run_probe(items, config, ctx.gateway, sec["checkpoint_tag"], ctx.seed("probe"))
    probe.write_results(results, ctx.dir("probe"))
    return {"items": len(items), "cells": len(results)}


def _load_weights(ctx: _Ctx, path: str) -> Optional[synthesize.SamplerWeights]:
    wf = ctx.cfg["synth"]["weights_file"]
    if wf is None:
        return None
    data = json.loads(_resolve(ctx.base, wf).read_text(encoding="utf-8"))
    return synthesize.SamplerWeights.from_dict(data.get(path, data))


def _stage_synth(ctx: _Ctx) -> dict:
    sec = ctx.cfg["synth"]
    anns = [a for a in _annotated_rows(ctx.work / "annotate" / "annotated.jsonl")
            if a.discipline.primary_discipline != "Invalid"]
    if not anns:
        raise synthesize.EmptyPool("no annotated seeds available for synthesis")
    by_id = {a.record_id: a for a in anns}
    items: list[synthesize.SynthesizedQA] = []
    failures: list[dict] = []
    counters: dict = {}
    for k, path in enumerate(sec["paths"]):
        weights = _load_weights(ctx, path) or synthesize.default_weights(path)
        count = sec["seeds_per_path"] or len(anns)
        drawn = synthesize.sample_seeds_weighted(anns, weights, count, ctx.seed(f"synth/{path}"))
        jobs = synthesize.plan_jobs(drawn, path, sec["question_types"], sec["roles"], sec["n"])
        run = synthesize.run_synthesis(jobs, {a.record_id: a.record for a in anns}, ctx.gateway)
        produced = [replace(it, discipline=by_id[it.lineage.seed_id].discipline)
                    for it in run.items]
        if path == "high_difficulty" and sec["post_verify"]:
            ver = synthesize.post_verify_difficulty(produced, ctx.gateway)
            produced = ver.kept + ver.demoted
            counters[f"{path}.demoted"] = len(ver.demoted)
        else:
            labels = score_difficulty_batch(produced, ctx.gateway)
            produced = [replace(it, difficulty=lab) for it, lab in zip(produced, labels)]
        produced.sort(key=lambda it: it.qa_id)
        items.extend(produced)
        failures.extend(run.failures)
        counters[f"{path}.jobs"] = len(jobs)
        counters[f"{path}.items"] = len(produced)
        counters[f"{path}.rejected"] = run.rejected
    out = ctx.dir("synth")
    write_jsonl(out / "items.jsonl", (it.to_dict() for it in items))
    write_jsonl(out / "failures.jsonl", failures)
    return counters


def _stage_refine(ctx: _Ctx) -> dict:
    items = _qa_rows(ctx.work / "synth" / "items.jsonl")
    outcomes = refine.assess_and_refine_batch(items, ctx.gateway)
    res = refine.apply_refinements(items, {o.qa_id: o for o in outcomes}, ctx.cfg["refine"]["strict"])
    out = ctx.dir("refine")
    write_jsonl(out / "kept.jsonl", (it.to_dict() for it in res.kept))
    write_jsonl(out / "dropped.jsonl", (it.to_dict() for it in res.dropped))
    refine.write_audit(res, out / "audit.jsonl")
    counters = {"kept": len(res.kept), "dropped": len(res.dropped), "deferred": res.deferred}
    try:
        counters["inconsistency_rate"] = refine.inconsistency_rate(outcomes)
    except refine.EmptyInput:
        pass
    return counters


def _stage_decontam_post(ctx: _Ctx) -> dict:
    items = _qa_rows(ctx.work / "refine" / "kept.jsonl")
    return _decontaminate(ctx, "decontam_post", items, lambda it: it.to_dict())


def _stage_analyze(ctx: _Ctx) -> dict:
    sec = ctx.cfg["analyze"]
    anns = _annotated_rows(ctx.work / "annotate" / "annotated.jsonl")
    items = _qa_rows(ctx.work / "decontam_post" / "clean.jsonl")
    reports = [analyze.distribution(anns, "seeds")]
    by_path = {p: [it for it in items if it.lineage.path == p] for p in synthesize.PATHS}
    for p in synthesize.PATHS:
        if by_path[p]:
            reports.append(analyze.distribution(by_path[p], p))
    tags = [r.dataset_tag for r in reports]
    comparisons = []
    if "multi_grade" in tags and "high_difficulty" in tags:
        comparisons.append(analyze.compare_difficulty(reports[tags.index("multi_grade")],
                                                      reports[tags.index("high_difficulty")]))
    tables = []
    if sec["stage_alignment"] and by_path["multi_grade"]:
        tables = analyze.validate_stage_alignment(by_path["multi_grade"], ctx.gateway, sec["stage_per_stage"],
                                                  ctx.seed("analyze"))
    out = ctx.dir("analyze")
    for fmt in sec["formats"]:
        analyze.emit_report(reports, fmt, out, comparisons, tables)
    counters = {f"{r.dataset_tag}.h4h5_share": r.h4h5_share for r in reports}
    if comparisons:
        counters["h4h5_ratio"] = comparisons[0].h4h5_ratio
    return counters


def _text_docs(ctx: _Ctx) -> list:
    sec = ctx.cfg["blend"]
    if sec["text_source"] is not None:
        rows = list(read_jsonl(_resolve(ctx.base, sec["text_source"])))
        if rows and "knowledge_density_score" in rows[0]:
            docs = [blend.QualityScoredDoc.from_dict(r) for r in rows]
            kept, report = blend.select_knowedu(docs, top_fraction=sec["knowedu_top_fraction"])
            (ctx.dir("blend") / "knowedu_selection.json").write_text(
                json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
            return kept
        return rows
    # fall back to the decontaminated book/web seeds
    return [{"text": r.body, "tokens": r.token_count}
            for r in _seed_rows(ctx.work / "decontam" / "clean.jsonl") if r.source_kind != "qa_pair"]


def _stage_blend(ctx: _Ctx) -> dict:
    sec = ctx.cfg["blend"]
    qa = list(read_jsonl(ctx.work / "decontam_post" / "clean.jsonl"))
    manifest = blend.BlendManifest(_text_docs(ctx), qa, tuple(float(x) for x in sec["ratio"]),
                                   sec["shard_size_tokens"], ctx.seed("blend"), sec["qa_format"],
                                   sec["drift_bound"], sec["final_tolerance"])
    res = blend.blend_corpora(manifest, ctx.dir("blend"))
    return {"shards": len(res.shards), "text_tokens": res.text_tokens, "qa_tokens": res.qa_tokens,
            "final_drift": res.final_drift}


_BODIES: dict[str, Callable[[_Ctx], dict]] = {
    "ingest": _stage_ingest, "decontam": _stage_decontam, "annotate": _stage_annotate, "probe": _stage_probe,
    "synth": _stage_synth, "refine": _stage_refine, "decontam_post": _stage_decontam_post,
    "analyze": _stage_analyze, "blend": _stage_blend,
}


# --- runner ----------------------------------------------------------------

@dataclass
class RunResult:
    manifest: PipelineManifest
    executed: list[str]
    skipped: list[str]
    workdir: Path

    @property
    def complete(self) -> bool:
        return all(self.manifest.completed.get(s) for s in self.manifest.stages)


def plan(cfg: Mapping, base: Path, workdir: Optional[Path] = None) -> dict:
    """The resolved plan ``--dry-run`` prints: stages, hashes and what a run would skip."""
    work = workdir or _resolve(base, cfg["workdir"])
    manifest = _load_manifest(work)
    stages = active_stages(cfg)
    rows = []
    for s in stages:
        h = stage_hash(cfg, s, base)
        done = bool(manifest and manifest.completed.get(s))
        drift = done and manifest.config_hashes.get(s) != h
        rows.append({"stage": s, "config_hash": h, "action": "drift" if drift else ("skip" if done else "run")})
    return {"run_id": cfg["run_id"], "rng_seed": cfg["rng_seed"], "workdir": str(work), "stages": rows,
            "config": cfg}


def _load_manifest(work: Path) -> Optional[PipelineManifest]:
    p = work / "manifest.json"
    if not p.exists():
        return None
    return PipelineManifest.from_dict(json.loads(p.read_text(encoding="utf-8")))


def run_pipeline(config: "str | Path | Mapping", *, base_dir: str | Path | None = None,
                 workdir: str | Path | None = None, gateway: Optional[Gateway] = None,
                 mock_seed: Optional[int] = None, stop_after: Optional[str] = None) -> RunResult:
    """Run (or resume) every active stage in order.

    ``base_dir`` anchors relative paths (defaults to the config file's
    directory, or the cwd for an in-memory config).  ``stop_after`` ends the
    run once that stage is marked complete.
    """
    if isinstance(config, (str, Path)):
        cfg, base = load_config(config)
    else:
        cfg, base = validate_config(config), Path.cwd()
    if base_dir is not None:
        base = Path(base_dir)
    work = Path(workdir) if workdir is not None else _resolve(base, cfg["workdir"])
    stages = active_stages(cfg)
    if stop_after is not None and stop_after not in stages:
        raise ValueError(f"stop_after {stop_after!r} is not an active stage")
    hashes = {s: stage_hash(cfg, s, base) for s in stages}

    manifest = _load_manifest(work)
    if manifest is None:
        manifest = PipelineManifest(cfg["run_id"], cfg["rng_seed"], stages)
    else:
        drifted = [s for s in manifest.stages if manifest.completed.get(s)
                   and manifest.config_hashes.get(s) != hashes.get(s)]
        if drifted or manifest.stages != stages:
            raise ConfigDrift(f"config changed for completed stage(s) {drifted or manifest.stages}; "
                              f"use a fresh workdir")
    manifest_path = work / "manifest.json"
    ctx = _Ctx(cfg, base, work, (lambda: gateway) if gateway is not None else (lambda: make_gateway(cfg, mock_seed)))

    executed, skipped = [], []
    for s in stages:
        if manifest.completed.get(s):
            skipped.append(s)
            log.info(json.dumps({"event": "stage_skipped", "stage": s}))
        else:
            if not manifest.may_run(s):
                raise StageFailure(s, RuntimeError("a predecessor stage is incomplete"))
            log.info(json.dumps({"event": "stage_start", "stage": s}))
            try:
                counters = _BODIES[s](ctx)
            except Exception as exc:
                manifest.save(manifest_path)
                log.error(json.dumps({"event": "stage_failed", "stage": s, "error": str(exc)}))
                raise StageFailure(s, exc) from exc
            manifest.config_hashes[s] = hashes[s]
            manifest.completed[s] = True
            manifest.counters[s] = counters
            manifest.save(manifest_path)
            executed.append(s)
            log.info(json.dumps({"event": "stage_complete", "stage": s, "counters": counters}))
        if s == stop_after:
            break
    return RunResult(manifest, executed, skipped, work)
