"""Speech-suitability metrics and judge-based answer verification.

Word count splits on whitespace. Reading ease uses the classic constants
over words, sentences and a heuristic syllable count; the syllable rule is
approximate by design, so corpus-level scores are comparable within this
codebase rather than against other implementations. Dependency depth
consumes externally produced parse trees. The nonvocalizable count tallies
characters a TTS engine cannot pronounce naturally: everything outside
letters, digits, whitespace and plain sentence punctuation.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

from . import prompts
from .backends import ModelRequest, Sampling

FRE_BASE = 206.835
FRE_WORDS_PER_SENTENCE = 1.015
FRE_SYLLABLES_PER_WORD = 84.6

VOCALIZABLE_PUNCT = frozenset({".", ",", "!", "?", "'", "’", '"', ":", ";", "-"})

_VOWEL_GROUP = re.compile(r"[aeiouy]+")
_SENTENCE_SPLIT = re.compile(r"[.!?]+(?=\s|$)")
_VERDICT = re.compile(r"incorrect|correct", re.IGNORECASE)


class NoWordsError(ValueError):
    """Reading ease requires at least one word."""


class EmptyRowsError(ValueError):
    """aggregate() requires at least one row."""


class MultipleRootsError(ValueError):
    pass


class CyclicTreeError(ValueError):
    pass


def word_count(text: str) -> int:
    """Number of maximal non-whitespace runs."""
    return len(text.split())


def count_syllables(word: str) -> int:
    """Heuristic syllable count, always at least 1.

    Vowel groups (aeiouy) are counted in the word's letters; a trailing
    silent 'e' drops one group unless the word ends consonant+"le", where
    the final e is pronounced (ap-ple, peo-ple).
    """
    letters = "".join(c for c in word.lower() if c.isalpha())
    if not letters:
        return 1
    groups = _VOWEL_GROUP.findall(letters)
    count = len(groups)
    if (
        count > 1
        and letters.endswith("e")
        and not letters[-2] in "aeiouy"
        and not (
            len(letters) >= 3
            and letters.endswith("le")
            and letters[-3] not in "aeiouy"
        )
    ):
        count -= 1
    return max(1, count)


def sentence_count(text: str) -> int:
    """Sentences end at runs of . ! ? followed by whitespace or the end."""
    pieces = _SENTENCE_SPLIT.split(text)
    n = sum(1 for p in pieces if p.strip())
    return max(1, n)


def fre_from_counts(words: int, sentences: int, syllables: int) -> float:
    """Closed-form reading-ease score from the three counts, unclamped."""
    if words < 1:
        raise NoWordsError("reading ease needs at least one word")
    if sentences < 1:
        raise ValueError("sentence count must be >= 1")
    return (
        FRE_BASE
        - FRE_WORDS_PER_SENTENCE * (words / sentences)
        - FRE_SYLLABLES_PER_WORD * (syllables / words)
    )


def flesch_reading_ease(text: str) -> float:
    words = text.split()
    if not words:
        raise NoWordsError("reading ease needs at least one word")
    syllables = sum(count_syllables(w) for w in words)
    return fre_from_counts(len(words), sentence_count(text), syllables)


def nonvocalizable_count(text: str) -> int:
    """Characters outside letters, decimal digits, whitespace and the plain
    punctuation a TTS reads naturally (math and markup count against)."""
    bad = 0
    for c in text:
        if c.isalpha() or c.isdecimal() or c.isspace() or c in VOCALIZABLE_PUNCT:
            continue
        bad += 1
    return bad


@dataclass(frozen=True)
class ParseTree:
    """One sentence's dependency structure: (token id, head id) pairs.

    A token is the root when its head is 0, itself, or absent.
    """

    tokens: tuple[tuple[int, int | None], ...]

    @staticmethod
    def from_json_dict(data: dict) -> "ParseTree":
        toks = tuple(
            (int(t["id"]), None if t.get("head") is None else int(t["head"]))
            for t in data["tokens"]
        )
        return ParseTree(toks)


def dependency_depth(tree: ParseTree) -> int:
    """Maximum number of head edges from the root to any token."""
    heads: dict[int, int | None] = {}
    roots = []
    for tid, head in tree.tokens:
        heads[tid] = head
        if head is None or head == 0 or head == tid:
            roots.append(tid)
    if len(roots) != 1:
        raise MultipleRootsError(f"expected exactly one root, found {len(roots)}")
    root = roots[0]
    depths: dict[int, int] = {root: 0}

    def depth_of(tid: int, trail: set[int]) -> int:
        if tid in depths:
            return depths[tid]
        if tid in trail:
            raise CyclicTreeError(f"cycle through token {tid}")
        trail.add(tid)
        head = heads.get(tid)
        if head is None or head == 0 or head == tid:
            depths[tid] = 0
        elif head not in heads:
            raise CyclicTreeError(f"token {tid} points at missing head {head}")
        else:
            depths[tid] = depth_of(head, trail) + 1
        return depths[tid]

    return max(depth_of(tid, set()) for tid, _ in tree.tokens)


@dataclass(frozen=True)
class Verdict:
    correct: bool | None  # None when the judge output names no verdict
    raw: str


def parse_verdict(raw: str) -> bool | None:
    """Last occurrence of correct/incorrect decides; absent means no verdict."""
    matches = list(_VERDICT.finditer(raw))
    if not matches:
        return None
    return matches[-1].group(0).lower() == "correct"


def verify_answer(
    question: str, ground_truth: str, submitted: str, judge
) -> Verdict:
    """Ask the judge backend whether the submitted answer is correct."""
    from .backends import collect_text

    user = prompts.load("judge_user").format(
        question=question, ground_truth=ground_truth, submitted_answer=submitted
    )
    request = ModelRequest(
        system_prompt=prompts.load("judge_system"),
        messages=(("user", user),),
        sampling=Sampling(temperature=0.1, nucleus_p=0.95),
        max_tokens=1024,
    )
    raw = collect_text(judge.stream_generate(request))
    return Verdict(correct=parse_verdict(raw), raw=raw)


@dataclass(frozen=True)
class MetricRow:
    id: str
    wc: int
    fre: float | None
    nv: int
    dd: int | None = None
    correct: bool | None = None
    judge_raw: str | None = None

    def __post_init__(self) -> None:
        if self.wc < 0 or self.nv < 0 or (self.dd is not None and self.dd < 0):
            raise ValueError("metric values must be non-negative")


def compute_row(
    id: str,
    response: str,
    trees: Sequence[ParseTree] = (),
    verdict: Verdict | None = None,
) -> MetricRow:
    wc = word_count(response)
    fre = flesch_reading_ease(response) if wc else None
    dd = max((dependency_depth(t) for t in trees), default=None)
    return MetricRow(
        id=id,
        wc=wc,
        fre=fre,
        nv=nonvocalizable_count(response),
        dd=dd,
        correct=None if verdict is None else verdict.correct,
        judge_raw=None if verdict is None else verdict.raw,
    )


def aggregate(rows: Sequence[MetricRow]) -> dict:
    """Arithmetic means over present values; accuracy over judged rows."""
    if not rows:
        raise EmptyRowsError("no rows to aggregate")

    def mean(values: list) -> float | None:
        return sum(values) / len(values) if values else None

    judged = [r for r in rows if r.correct is not None]
    accuracy = (
        100.0 * sum(1 for r in judged if r.correct) / len(judged) if judged else None
    )
    return {
        "rows": len(rows),
        "mean_wc": mean([r.wc for r in rows]),
        "mean_fre": mean([r.fre for r in rows if r.fre is not None]),
        "mean_dd": mean([r.dd for r in rows if r.dd is not None]),
        "mean_nv": mean([r.nv for r in rows]),
        "judged": len(judged),
        "accuracy_pct": accuracy,
    }


CSV_FIELDS = ("id", "wc", "fre", "dd", "nv", "correct")


def write_rows_csv(stream: TextIO, rows: Iterable[MetricRow]) -> None:
    writer = csv.writer(stream)
    writer.writerow(CSV_FIELDS)
    for r in rows:
        writer.writerow(
            [
                r.id,
                r.wc,
                "" if r.fre is None else f"{r.fre:.4f}",
                "" if r.dd is None else r.dd,
                r.nv,
                "" if r.correct is None else str(r.correct).lower(),
            ]
        )
