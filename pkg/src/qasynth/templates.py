"""Versioned prompt and vocabulary assets shipped with the package."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from typing import Mapping

# Markers the mock backend uses to recognise which stage a prompt belongs to.
DISCIPLINE_MARKER = "Act as an educational taxonomist"
DIFFICULTY_MARKER = "Act as an educational assessment expert"
SYNTHESIS_MARKER = "novel questions adhering to these requirements"
BOOSTER_MARKER = "[Difficulty Booster]"
REFINE_MARKER = "Assess whether the question below is solvable"
STAGE_MARKER = "Identify the educational stage"
PROBE_MARKER = "The following are questions with answers"


@lru_cache(maxsize=None)
def load_text(name: str) -> str:
    raw = resources.files("qasynth.assets").joinpath(name).read_text(encoding="utf-8")
    lines = raw.splitlines(keepends=True)
    while lines and lines[0].startswith("#"):
        lines.pop(0)
    return "".join(lines).rstrip("\n")


@lru_cache(maxsize=None)
def load_json(name: str) -> dict:
    return json.loads(resources.files("qasynth.assets").joinpath(name).read_text(encoding="utf-8"))


def fill(template: str, values: Mapping[str, str]) -> str:
    """Substitute ``{Name}`` placeholders; literal JSON braces are left alone."""
    out = template
    for key, val in values.items():
        out = out.replace("{" + key + "}", val)
    return out


def discipline_list() -> list[str]:
    return list(load_json("disciplines.json")["disciplines"])


def vocabulary_version() -> str:
    return load_json("disciplines.json")["version"]
