"""Seed curation, two-way QA synthesis, refinement, auditing and token-ratio blending."""

from .analyze import DistributionReport, StageAlignmentTable, compare_difficulty, distribution, emit_report
from .annotate import AnnotatedSeed, DifficultyLabel, DisciplineLabel, tier_from_pass_rate
from .blend import BlendManifest, blend_corpora, format_qa, select_knowedu
from .decontam import build_ngram_index, check_exact, filter_corpus
from .gateway import BackendProfile, Gateway, PromptRequest
from .ingest import SeedRecord, chunk_document, read_seeds
from .mock import MockBackend, make_mock_backend
from .pipeline import run_pipeline, validate_config
from .probe import ProbeConfig, ProbeItem, run_probe
from .refine import RefinementOutcome, apply_refinements, assess_and_refine
from .synthesize import SynthesisJob, SynthesizedQA, parse_items, run_synthesis, sample_seeds_weighted

__version__ = "0.1.0"
