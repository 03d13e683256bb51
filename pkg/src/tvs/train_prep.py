"""Training-record preparation: role labels, loss targets, reference loss.

Verbal positions are those inside a begin-verbal .. end-verbal span, with
both marker tokens included. Every other response position is a Think
position whose target is the continue marker, so the model learns to hold
back verbalization; Verbal positions keep the actual token as target. The
question itself carries no loss positions, it only conditions the model.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence, TextIO

from .interleave import BlockKind, ControlTokens, InterleavedSequence, UnbalancedTagsError


class ProviderFailureError(RuntimeError):
    """The log-probability provider returned a non-finite value."""


class Role(Enum):
    VERBAL = "verbal"
    THINK = "think"


@dataclass(frozen=True)
class LabeledSequence:
    tokens: tuple[str, ...]
    roles: tuple[Role, ...]
    targets: tuple[str, ...]

    def __post_init__(self) -> None:
        if not (len(self.tokens) == len(self.roles) == len(self.targets)):
            raise ValueError("tokens, roles and targets must align")


def label_roles(
    tokens: Sequence[str], control: ControlTokens | None = None
) -> LabeledSequence:
    """Label each position Verbal or Think and attach its loss target.

    Control tokens must appear as standalone entries. A begin marker inside
    an open span, an end marker outside one, or an unclosed span raises
    UnbalancedTagsError.
    """
    control = control or ControlTokens()
    roles: list[Role] = []
    targets: list[str] = []
    in_verbal = False
    for i, token in enumerate(tokens):
        if token == control.bov:
            if in_verbal:
                raise UnbalancedTagsError(f"begin marker inside a span at position {i}")
            in_verbal = True
            roles.append(Role.VERBAL)
            targets.append(token)
        elif token == control.eov:
            if not in_verbal:
                raise UnbalancedTagsError(f"end marker outside a span at position {i}")
            in_verbal = False
            roles.append(Role.VERBAL)
            targets.append(token)
        else:
            if in_verbal:
                roles.append(Role.VERBAL)
                targets.append(token)
            else:
                roles.append(Role.THINK)
                targets.append(control.con)
    if in_verbal:
        raise UnbalancedTagsError("unclosed verbal span at end of sequence")
    return LabeledSequence(tuple(tokens), tuple(roles), tuple(targets))


def tokenize_tagged(text: str, control: ControlTokens | None = None) -> list[str]:
    """Split tagged text into whitespace tokens with standalone markers.

    A reference tokenizer for tests and the loss evaluator; trainers use
    their own tokenization, which is why records carry character spans.
    """
    control = control or ControlTokens()
    pattern = re.compile(
        "(" + "|".join(re.escape(m) for m in control.all()) + ")"
    )
    out: list[str] = []
    for piece in pattern.split(text):
        if not piece:
            continue
        if piece in control.all():
            out.append(piece)
        else:
            out.extend(piece.split())
    return out


LogProbProvider = Callable[[tuple[str, ...], str], float]


def loss_terms(
    labeled: LabeledSequence,
    question: str,
    logprob: LogProbProvider,
) -> tuple[float, float]:
    """Return (verbal_term, think_term), each a negated log-prob sum.

    The provider is called as logprob(context, target) where context is the
    question followed by all response tokens before the scored position.
    """
    verbal = 0.0
    think = 0.0
    for i, target in enumerate(labeled.targets):
        context = (question,) + labeled.tokens[:i]
        lp = logprob(context, target)
        if not math.isfinite(lp):
            raise ProviderFailureError(
                f"non-finite log-probability at position {i}: {lp!r}"
            )
        if labeled.roles[i] is Role.VERBAL:
            verbal -= lp
        else:
            think -= lp
    return verbal, think


def masked_loss(
    labeled: LabeledSequence,
    question: str,
    logprob: LogProbProvider,
) -> float:
    """Total selective loss: verbal positions score their own tokens, think
    positions score the continue marker."""
    verbal, think = loss_terms(labeled, question, logprob)
    return verbal + think


@dataclass(frozen=True)
class CharSpan:
    start: int
    end: int
    role: Role

    def to_json_dict(self) -> dict:
        return {"start": self.start, "end": self.end, "role": self.role.value}


@dataclass(frozen=True)
class TrainingRecord:
    id: str
    question: str
    interleaved_text: str
    char_spans: tuple[CharSpan, ...]
    control_tokens: ControlTokens = field(default_factory=ControlTokens)

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "interleaved_text": self.interleaved_text,
            "char_spans": [s.to_json_dict() for s in self.char_spans],
            "control_tokens": {
                "bov": self.control_tokens.bov,
                "eov": self.control_tokens.eov,
                "con": self.control_tokens.con,
            },
        }


def spans_for(seq: InterleavedSequence) -> tuple[str, tuple[CharSpan, ...]]:
    """Render a sequence and compute role spans that partition it exactly.

    Verbal spans include their begin/end markers; reason spans are the raw
    text between them.
    """
    tokens = seq.tokens
    parts: list[str] = []
    spans: list[CharSpan] = []
    pos = 0
    for block in seq.blocks:
        if block.kind is BlockKind.REASON:
            piece = block.text
            role = Role.THINK
        else:
            piece = tokens.bov + block.text + tokens.eov
            role = Role.VERBAL
        if piece:
            spans.append(CharSpan(pos, pos + len(piece), role))
            pos += len(piece)
            parts.append(piece)
    return "".join(parts), tuple(spans)


def emit_records(examples: Iterable) -> tuple[list[TrainingRecord], dict]:
    """Convert validated built examples into records plus a manifest.

    Examples are anything with .raw (id, question), .interleaved and
    .validation attributes. Examples whose validation failed, or whose text
    contains the continue-marker spelling (it must only ever be a target),
    are rejected and counted, never silently dropped.
    """
    records: list[TrainingRecord] = []
    rejected = 0
    span_hist = {"think": 0, "verbal": 0}
    for example in examples:
        if not example.validation.ok:
            rejected += 1
            continue
        seq = example.interleaved
        text, spans = spans_for(seq)
        if seq.tokens.con in text:
            rejected += 1
            continue
        for span in spans:
            span_hist[span.role.value] += 1
        records.append(
            TrainingRecord(
                id=str(example.raw.id),
                question=example.raw.question,
                interleaved_text=text,
                char_spans=spans,
                control_tokens=seq.tokens,
            )
        )
    manifest = {
        "records": len(records),
        "rejected": rejected,
        "span_roles": span_hist,
    }
    return records, manifest


def write_records_jsonl(stream: TextIO, records: Iterable[TrainingRecord]) -> None:
    for record in records:
        stream.write(json.dumps(record.to_json_dict(), ensure_ascii=False) + "\n")
