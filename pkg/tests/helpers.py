"""Shared test machinery: generators, oracles and a runtime scenario driver."""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass, field

from tvs.backends import Script, ScriptedBackend, ScriptTurn, turn
from tvs.clock import VirtualClock
from tvs.interleave import Block, ControlTokens, InterleavedSequence
from tvs.metrics import ParseTree
from tvs.runtime import EventKind, RuntimeConfig, VerbalizerRuntime
from tvs.segmenter import Segment

WORDS = (
    "sum", "step", "value", "total", "ten", "seven", "first", "then",
    "count", "answer", "price", "speed", "twice", "half", "share", "left",
)

EVENT_LETTER = {
    EventKind.SEGMENT_INGESTED: "S",
    EventKind.DECISION_CONTINUE: "C",
    EventKind.DECISION_VERBALIZE: "V",
    EventKind.FORCED_BOV: "F",
    EventKind.VERBAL_CHUNK: "K",
    EventKind.VERBAL_END: "E",
}

# mode-alternation shape of a full finished stream
EVENT_PATTERN = re.compile(r"^(S(C|[VF]K+E)?)*(SFK+E|FK+E)?$")


def letters(events) -> str:
    return "".join(EVENT_LETTER[e.kind] for e in events)


def words(rng, lo=1, hi=4) -> str:
    return " ".join(rng.choice(WORDS) for _ in range(rng.randint(lo, hi)))


# ---------------------------------------------------------------- interleave

def gen_valid_sequence(rng, tokens: ControlTokens | None = None) -> InterleavedSequence:
    """Random strictly-valid sequence: non-empty reasons, ends verbal."""
    tokens = tokens or ControlTokens()
    blocks = []
    for _ in range(rng.randint(1, 5)):
        blocks.append(Block.reason(words(rng) + rng.choice(["\n", " ", ".\n"])))
        blocks.append(Block.verbal(words(rng) + "."))
    return InterleavedSequence(tuple(blocks), tokens)


# ------------------------------------------------------------------- runtime

@dataclass
class Scenario:
    name: str
    segments: list  # Segment objects fed in order
    turns: list = field(default_factory=list)  # verbalizer ScriptTurns
    config: RuntimeConfig | None = None
    expect: str = ""  # expected event letter string
    expect_blocks: list | None = None  # (kind, text) pairs, optional
    expect_overflow: int = 0
    expect_unexpected: int = 0
    raises: type | None = None


def drive(scenario: Scenario):
    """Feed a scenario's segments through a fresh runtime; return runtime
    plus the error raised (when scenario.raises is set)."""
    clock = VirtualClock()
    backend = ScriptedBackend(Script(tuple(scenario.turns)), clock, name="verbalizer")
    runtime = VerbalizerRuntime(
        "test query", scenario.config or RuntimeConfig(), clock
    )
    error = None
    try:
        for seg in scenario.segments:
            runtime.on_segment(seg, backend)
    except Exception as exc:
        error = exc
    return runtime, backend, error


def gen_runtime_case(rng):
    """Random segments plus a matching verbalizer script.

    Returns (segments, turns, config, expected_letters, expected_overflow,
    expected_unexpected). The expectation mirrors the documented state rules,
    so the fuzz asserts the exact event string, not just the shape.
    """
    seq_mode = rng.random() < 0.2  # decisions withheld, one final verbalization
    config = RuntimeConfig(decide_each_segment=not seq_mode)
    n = rng.randint(1, 8)
    end_marker = rng.random() < 0.3
    segments = []
    turns = []
    expect = []
    overflow = 0
    unexpected = 0
    pending = False

    def verbal_turn():
        nonlocal overflow
        k = rng.randint(1, 3)
        emissions = [(words(rng) + " ", rng.randint(0, 3)) for _ in range(k)]
        if rng.random() < 0.12:
            overflow += 1
        else:
            emissions.append(("<eov>", rng.randint(0, 2)))
        turns.append(ScriptTurn(tuple(emissions)))
        return "K" * k + "E"

    for i in range(n):
        final_text_segment = i == n - 1 and not end_marker
        blank = rng.random() < 0.15 and not final_text_segment
        text = ("  \n" if blank else f"{words(rng)}.\n")
        segments.append(Segment(text, i, is_final=final_text_segment))
        expect.append("S")
        pending = True
        if final_text_segment:
            expect.append("F" + verbal_turn())
            pending = False
        elif blank or seq_mode:
            continue
        else:
            roll = rng.random()
            if roll < 0.35:
                decision = "<bov>"
            elif roll < 0.9:
                decision = "<con>"
            else:
                decision = "hmm"
                unexpected += 1
            turns.append(ScriptTurn(((decision, rng.randint(0, 2)),)))
            if decision == "<bov>":
                expect.append("V" + verbal_turn())
                pending = False
            else:
                expect.append("C")
    if end_marker:
        segments.append(Segment("", n - 1, is_final=True))
        if pending:
            expect.append("F" + verbal_turn())
    return segments, turns, config, "".join(expect), overflow, unexpected


# ----------------------------------------------------------------- train_prep

def span_scan_roles(tokens_list, control: ControlTokens) -> list[str]:
    """Independent role oracle: regex over the space-joined string."""
    joined = " ".join(tokens_list)
    offsets = []
    pos = 0
    for t in tokens_list:
        offsets.append((pos, pos + len(t)))
        pos += len(t) + 1
    span_re = re.compile(
        re.escape(control.bov) + r".*?" + re.escape(control.eov), re.DOTALL
    )
    spans = [m.span() for m in span_re.finditer(joined)]
    return [
        "verbal" if any(a <= s and e <= b for a, b in spans) else "think"
        for s, e in offsets
    ]


def gen_balanced_tokens(rng, control: ControlTokens | None = None) -> list[str]:
    """Random tag-balanced token list with standalone markers."""
    control = control or ControlTokens()
    out: list[str] = []
    for _ in range(rng.randint(1, 4)):
        out.extend(rng.choice(WORDS) for _ in range(rng.randint(0, 3)))
        out.append(control.bov)
        out.extend(rng.choice(WORDS) for _ in range(rng.randint(1, 3)))
        out.append(control.eov)
    out.extend(rng.choice(WORDS) for _ in range(rng.randint(0, 2)))
    return out


# -------------------------------------------------------------------- metrics

def random_tree(rng, max_nodes=12) -> ParseTree:
    n = rng.randint(1, max_nodes)
    rows = [(1, 0)]
    for tid in range(2, n + 1):
        rows.append((tid, rng.randint(1, tid - 1)))
    rng.shuffle(rows)
    return ParseTree(tuple(rows))


def brute_depth(tree: ParseTree) -> int:
    """Longest root-to-leaf path via child adjacency, independent of the
    memoized head-walk in the implementation."""
    children = defaultdict(list)
    root = None
    for tid, head in tree.tokens:
        if head is None or head == 0 or head == tid:
            root = tid
        else:
            children[head].append(tid)
    best = 0
    stack = [(root, 0)]
    while stack:
        node, d = stack.pop()
        best = max(best, d)
        for c in children[node]:
            stack.append((c, d + 1))
    return best


# --------------------------------------------------------------- data builder

def constructive_scatter(rng):
    """Mechanically interleave summary sentences into reasoning sentences.

    Returns (reasoning, summary, tagged_output) guaranteed to satisfy all
    three scatter checks; sentence bodies are pairwise distinct.
    """
    n = rng.randint(2, 4)
    reasons = [
        f"Reason {i} states {words(rng)} r{i}{rng.randint(10, 99)}.\n"
        for i in range(n)
    ]
    verbals = [f"Point {i} is {words(rng)} v{i}{rng.randint(10, 99)}." for i in range(n)]
    summary = " ".join(verbals)
    tagged = "".join(r + f"<bov>{v}<eov>" for r, v in zip(reasons, verbals))
    return "".join(reasons), summary, tagged


def make_session_script(turn_specs) -> Script:
    """Build a Script from [(text, delay) or str, ...] turn specs."""
    return Script(tuple(turn(*spec) for spec in turn_specs))
