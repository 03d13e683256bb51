"""Recorded scripted sessions: a query plus think/verbalizer scripts.

A session file pins everything a run needs to be reproduced exactly:
the query, the strategy, the clock mode, and the scripted emissions with
their tick delays. Replaying one with a virtual clock yields byte-identical
transcripts and latency reports on every invocation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .backends import Script, ScriptTurn


class SessionError(ValueError):
    pass


@dataclass(frozen=True)
class Session:
    query: str
    strategy: str
    clock: str
    think: Script
    verbalizer: Script
    # optional variant consumed by the one-shot strategy, which makes a
    # single verbalizer call instead of per-segment decisions
    verbalizer_seq: Script | None = None

    def verbalizer_for(self, strategy: str) -> Script:
        if strategy == "seq" and self.verbalizer_seq is not None:
            return self.verbalizer_seq
        return self.verbalizer


def script_from_json(data: dict) -> Script:
    try:
        turns = []
        for turn in data["turns"]:
            emissions = tuple((str(t), int(d)) for t, d in turn["emissions"])
            turns.append(ScriptTurn(emissions))
        return Script(tuple(turns))
    except (KeyError, TypeError, ValueError) as exc:
        raise SessionError(f"malformed script: {exc}") from exc


def script_to_json(script: Script) -> dict:
    return {
        "turns": [
            {"emissions": [[t, d] for t, d in turn.emissions]}
            for turn in script.turns
        ]
    }


def load_session(path: str | Path) -> Session:
    p = Path(path)
    if not p.exists():
        raise SessionError(f"session file not found: {p}")
    try:
        data = json.loads(p.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise SessionError(f"session file is not valid JSON: {exc}") from exc
    for key in ("query", "think", "verbalizer"):
        if key not in data:
            raise SessionError(f"session file missing {key!r}")
    seq_variant = data.get("verbalizer_seq")
    return Session(
        query=data["query"],
        strategy=data.get("strategy", "revert"),
        clock=data.get("clock", "virtual"),
        think=script_from_json(data["think"]),
        verbalizer=script_from_json(data["verbalizer"]),
        verbalizer_seq=None if seq_variant is None else script_from_json(seq_variant),
    )


def dump_session(session: Session) -> str:
    data = {
        "query": session.query,
        "strategy": session.strategy,
        "clock": session.clock,
        "think": script_to_json(session.think),
        "verbalizer": script_to_json(session.verbalizer),
    }
    if session.verbalizer_seq is not None:
        data["verbalizer_seq"] = script_to_json(session.verbalizer_seq)
    return json.dumps(data, indent=2, ensure_ascii=False)
