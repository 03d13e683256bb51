"""Prompt text assets, loaded verbatim from packaged files.

Prompts live as .txt files next to this module so they can be audited and
versioned without touching code. Names map 1:1 to files; see ASSETS.
"""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

ASSETS = (
    "cot_system",
    "speech_friendly_system",
    "verbalizer_system",
    "solve",
    "summarize_base",
    "summarize_stage1",
    "summarize_stage2",
    "summarize_stage3",
    "summarize_stage4",
    "summarize_user",
    "scatter_system",
    "scatter_user",
    "judge_system",
    "judge_user",
)

SUMMARIZE_STAGES = (
    "summarize_stage1",
    "summarize_stage2",
    "summarize_stage3",
    "summarize_stage4",
)


@lru_cache(maxsize=None)
def load(name: str) -> str:
    """Return the named prompt text, without the file's trailing newline."""
    if name not in ASSETS:
        raise KeyError(f"unknown prompt asset: {name!r}")
    text = (
        resources.files(__package__).joinpath(f"{name}.txt").read_text("utf-8")
    )
    return text.rstrip("\n")


def load_scatter_fewshot(directory: str | Path | None = None) -> list[dict]:
    """Load interleaving demonstrations: {analysis, summary, output} dicts.

    The packaged defaults are synthetic placeholders; point ``directory`` at
    a folder of .json files to swap in hand-labeled examples.
    """
    out: list[dict] = []
    if directory is not None:
        paths = sorted(Path(directory).glob("*.json"))
        for p in paths:
            out.append(json.loads(p.read_text("utf-8")))
        return out
    root = resources.files(__package__).joinpath("scatter_fewshot")
    for entry in sorted(root.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".json"):
            out.append(json.loads(entry.read_text("utf-8")))
    return out
