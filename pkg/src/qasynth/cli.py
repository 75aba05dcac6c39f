"""Command-line entry point: one subcommand per stage plus ``run`` for the full pipeline."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import analyze, blend, decontam, ingest, pipeline, probe, refine, synthesize
from ._util import read_jsonl, write_jsonl
from .annotate import AnnotatedSeed, annotate_records, score_difficulty_batch

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DRIFT = 0, 1, 2, 3


def _ratio(text: str) -> tuple[float, float]:
    try:
        a, b = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A:B, got {text!r}")
    if a <= 0 or b <= 0:
        raise argparse.ArgumentTypeError("ratio components must be positive")
    return a, b


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qasynth", description="Seed-to-shard QA synthesis toolkit.")
    p.add_argument("--config", type=Path, help="JSON config file (backend settings, pipeline sections)")
    p.add_argument("--mock-backend", type=int, metavar="SEED", help="use the deterministic offline backend")
    p.add_argument("--dry-run", action="store_true", help="print the resolved plan and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="validate and chunk seed files")
    s.add_argument("input", type=Path)
    s.add_argument("--kind", choices=ingest.SOURCE_KINDS, default="qa_pair")
    s.add_argument("--chunk-tokens", type=int, default=ingest.DEFAULT_CHUNK_TOKENS)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--rejects", type=Path)

    s = sub.add_parser("decontam", help="drop records overlapping benchmark sets")
    s.add_argument("input", type=Path)
    s.add_argument("--benchmarks", type=Path, nargs="+", required=True, metavar="DIR")
    s.add_argument("--ngram-size", type=int, default=decontam.DEFAULT_N)
    s.add_argument("--embed-threshold", type=float, help="also run the embedding check at this cosine threshold")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--report", type=Path)

    s = sub.add_parser("annotate", help="discipline and difficulty labels for seeds")
    s.add_argument("input", type=Path)
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("probe", help="few-shot mastery probe over annotated QA seeds")
    s.add_argument("input", type=Path)
    s.add_argument("--checkpoint-tag", required=True)
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--shots", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True, help="output directory")

    s = sub.add_parser("synth", help="synthesize QA items from annotated seeds")
    s.add_argument("input", type=Path)
    s.add_argument("--path", choices=("multi-grade", "high-difficulty"), default="multi-grade")
    s.add_argument("--role", choices=synthesize.ROLES)
    s.add_argument("--qtype", choices=("mcq", "essay"), default="mcq")
    s.add_argument("--n", type=int, default=synthesize.DEFAULT_N)
    s.add_argument("--weights", type=Path, help="JSON sampler weights file")
    s.add_argument("--count", type=int, help="seeds to draw (default: pool size)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-verify", action="store_true", help="skip high-difficulty post-verification")
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("refine", help="drop unsolvable items and re-derive answers")
    s.add_argument("input", type=Path)
    s.add_argument("--strict", action="store_true", help="also drop items whose refinement failed")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--audit", type=Path)

    s = sub.add_parser("stats", help="discipline/difficulty distribution reports")
    s.add_argument("--dataset", type=Path, required=True, metavar="SHARDS")
    s.add_argument("--compare", type=Path, metavar="OTHER")
    s.add_argument("--format", dest="formats", choices=pipeline.REPORT_FORMATS, action="append")
    s.add_argument("--out", type=Path, required=True, help="output directory")

    s = sub.add_parser("blend", help="mix text and QA records into token-ratio shards")
    s.add_argument("--text", type=Path, required=True)
    s.add_argument("--qa", type=Path, required=True)
    s.add_argument("--ratio", type=_ratio, default=(1.0, 1.0))
    s.add_argument("--shard-tokens", type=int, default=blend.DEFAULT_SHARD_TOKENS)
    s.add_argument("--format", choices=blend.QA_FORMATS, default="plain")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True, help="output directory")

    s = sub.add_parser("run", help="run or resume the full pipeline from --config")
    s.add_argument("--workdir", type=Path)
    s.add_argument("--stop-after", choices=pipeline.STAGES)
    return p


def _config(args) -> dict:
    return pipeline.validate_config(args.config) if args.config else pipeline.validate_config({})


def _gateway(args):
    return pipeline.make_gateway(_config(args), args.mock_backend)


def _dataset_rows(path: Path) -> list:
    files = sorted(path.glob("*.jsonl")) if path.is_dir() else [path]
    out = []
    for f in files:
        for d in read_jsonl(f):
            if "item" in d:
                out.append(synthesize.SynthesizedQA.from_dict(d))
            elif "record" in d:
                out.append(AnnotatedSeed.from_dict(d))
            else:
                out.append(d)
    return out


def _cmd_ingest(args) -> dict:
    rejects: list = []
    recs = [r for rec in ingest.read_seeds(args.input, args.kind, rejects=rejects, reject_path=args.rejects)
            for r in ingest.expand_seed(rec, args.chunk_tokens)]
    write_jsonl(args.out, (r.to_dict() for r in recs))
    return {"records": len(recs), "rejects": len(rejects)}


def _cmd_decontam(args) -> dict:
    texts = list(decontam.load_benchmark_texts(args.benchmarks))
    index = decontam.build_ngram_index(texts, args.ngram_size)
    embed = None
    if args.embed_threshold is not None:
        emb = decontam.HashingEmbedder()
        embed = decontam.EmbeddingConfig(decontam.embed_benchmarks(texts, emb), emb, args.embed_threshold)
    rows = list(read_jsonl(args.input))
    res = decontam.filter_corpus(rows, index, embed)
    write_jsonl(args.out, res.clean)
    if args.report:
        res.write_report(args.report)
    return {"input": len(rows), "clean": len(res.clean), "flagged": len(res.flagged)}


def _cmd_annotate(args) -> dict:
    recs = [ingest.SeedRecord.from_dict(d) for d in read_jsonl(args.input)]
    labeled = annotate_records(recs, _gateway(args))
    write_jsonl(args.out, (a.to_dict() for a in labeled))
    return {"annotated": len(labeled)}


def _cmd_probe(args) -> dict:
    anns = [AnnotatedSeed.from_dict(d) for d in read_jsonl(args.input)]
    items = [probe.ProbeItem.from_annotated(a) for a in anns
             if a.record.source_kind == "qa_pair" and a.h_level != "none"]
    cfg = probe.ProbeConfig(items, args.trials, args.shots)
    results = probe.run_probe(items, cfg, _gateway(args), args.checkpoint_tag, args.seed)
    probe.write_results(results, args.out)
    return {"items": len(items), "by_level": probe.by_level(results)}


def _cmd_synth(args) -> dict:
    path = args.path.replace("-", "_")
    qtype = "multiple_choice" if args.qtype == "mcq" else "essay"
    anns = [a for a in (AnnotatedSeed.from_dict(d) for d in read_jsonl(args.input))
            if a.discipline.primary_discipline != "Invalid"]
    if args.weights:
        weights = synthesize.SamplerWeights.from_dict(json.loads(args.weights.read_text(encoding="utf-8")))
    else:
        weights = synthesize.default_weights(path)
    drawn = synthesize.sample_seeds_weighted(anns, weights, args.count or len(anns), args.seed)
    roles = [args.role] if args.role else list(synthesize.ROLES)
    jobs = synthesize.plan_jobs(drawn, path, [qtype], roles, args.n)
    gw = _gateway(args)
    run = synthesize.run_synthesis(jobs, {a.record_id: a.record for a in anns}, gw)
    by_id = {a.record_id: a for a in anns}
    items = [replace(it, discipline=by_id[it.lineage.seed_id].discipline) for it in run.items]
    demoted = 0
    if path == "high_difficulty" and not args.no_verify:
        ver = synthesize.post_verify_difficulty(items, gw)
        items, demoted = ver.kept + ver.demoted, len(ver.demoted)
    else:
        items = [replace(it, difficulty=lab) for it, lab in zip(items, score_difficulty_batch(items, gw))]
    write_jsonl(args.out, (it.to_dict() for it in items))
    return {"jobs": len(jobs), "items": len(items), "rejected": run.rejected,
            "failures": len(run.failures), "demoted": demoted}


def _cmd_refine(args) -> dict:
    items = [synthesize.SynthesizedQA.from_dict(d) for d in read_jsonl(args.input)]
    outcomes = refine.assess_and_refine_batch(items, _gateway(args))
    res = refine.apply_refinements(items, {o.qa_id: o for o in outcomes}, strict=args.strict)
    write_jsonl(args.out, (it.to_dict() for it in res.kept))
    if args.audit:
        refine.write_audit(res, args.audit)
    return {"kept": len(res.kept), "dropped": len(res.dropped), "deferred": res.deferred}


def _cmd_stats(args) -> dict:
    reports = [analyze.distribution(_dataset_rows(args.dataset), args.dataset.stem)]
    comparisons = []
    if args.compare:
        other = analyze.distribution(_dataset_rows(args.compare), args.compare.stem)
        comparisons.append(analyze.compare_difficulty(reports[0], other))
        reports.append(other)
    files = []
    for fmt in args.formats or list(pipeline.REPORT_FORMATS):
        files += [str(p) for p in analyze.emit_report(reports, fmt, args.out, comparisons)]
    return {"files": files, "h4h5": {r.dataset_tag: r.h4h5_share for r in reports}}


def _cmd_blend(args) -> dict:
    m = blend.BlendManifest(args.text, args.qa, args.ratio, args.shard_tokens, args.seed, args.format)
    res = blend.blend_corpora(m, args.out)
    return {"shards": len(res.shards), "text_tokens": res.text_tokens, "qa_tokens": res.qa_tokens,
            "achieved_ratio": res.achieved_ratio}


def _cmd_run(args) -> dict:
    if not args.config:
        raise pipeline.ConfigError(["run requires --config"])
    res = pipeline.run_pipeline(args.config, workdir=args.workdir, mock_seed=args.mock_backend,
                                stop_after=args.stop_after)
    return {"executed": res.executed, "skipped": res.skipped, "complete": res.complete}


_COMMANDS = {"ingest": _cmd_ingest, "decontam": _cmd_decontam, "annotate": _cmd_annotate, "probe": _cmd_probe,
             "synth": _cmd_synth, "refine": _cmd_refine, "stats": _cmd_stats, "blend": _cmd_blend,
             "run": _cmd_run}


def _dry_run(args) -> dict:
    if args.command == "run":
        if not args.config:
            raise pipeline.ConfigError(["run requires --config"])
        cfg, base = pipeline.load_config(args.config)
        return pipeline.plan(cfg, base, args.workdir)
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    resolved["backend"] = "mock" if args.mock_backend is not None else _config(args)["backend"]
    return {"command": args.command, "resolved": resolved}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        out = _dry_run(args) if args.dry_run else _COMMANDS[args.command](args)
    except pipeline.ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except pipeline.ConfigDrift as exc:
        print(f"config drift: {exc}", file=sys.stderr)
        return EXIT_DRIFT
    except (pipeline.StageFailure, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(json.dumps(out, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
