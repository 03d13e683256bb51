"""Interleaved reasoning/verbalization sequences and their tagged-text form.

A response alternates raw reasoning text with short speech-friendly verbal
chunks. In tagged form each verbal chunk is wrapped in begin/end markers:

    reasoning <bov>verbal summary<eov> more reasoning <bov>...<eov>

Parsing and rendering are exact inverses: rendering a parsed string recovers
it byte-for-byte, and parsing never loses or reorders text.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

logger = logging.getLogger(__name__)

DEFAULT_BOV = "<bov>"
DEFAULT_EOV = "<eov>"
DEFAULT_CON = "<con>"


class TagError(ValueError):
    """Base class for malformed tagged text. ``code`` is a stable identifier."""

    code = "tag_error"


class UnbalancedTagsError(TagError):
    code = "unbalanced"


class NestedTagsError(TagError):
    code = "nested"


class TagOrderError(TagError):
    code = "order"


class TrailingReasonError(TagError):
    code = "trailing"


class EmptyReasonError(TagError):
    code = "empty_reason"


class SequenceShapeError(ValueError):
    """A block list violates the alternating reason/verbal shape."""


@dataclass(frozen=True)
class ControlTokens:
    """Marker spellings for begin-verbal, end-verbal and continue-thinking."""

    bov: str = DEFAULT_BOV
    eov: str = DEFAULT_EOV
    con: str = DEFAULT_CON

    def __post_init__(self) -> None:
        markers = (self.bov, self.eov, self.con)
        if any(not m for m in markers):
            raise ValueError("control token markers must be non-empty")
        if len(set(markers)) != 3:
            raise ValueError("control token markers must be pairwise distinct")
        for a in markers:
            for b in markers:
                if a != b and a in b:
                    raise ValueError(
                        f"marker {a!r} is a substring of marker {b!r}"
                    )

    def all(self) -> tuple[str, str, str]:
        return (self.bov, self.eov, self.con)


class BlockKind(Enum):
    REASON = "reason"
    VERBAL = "verbal"


@dataclass(frozen=True)
class Block:
    kind: BlockKind
    text: str

    @staticmethod
    def reason(text: str) -> "Block":
        return Block(BlockKind.REASON, text)

    @staticmethod
    def verbal(text: str) -> "Block":
        return Block(BlockKind.VERBAL, text)


@dataclass(frozen=True)
class InterleavedSequence:
    """Ordered reason/verbal blocks plus the marker spellings used."""

    blocks: tuple[Block, ...]
    tokens: ControlTokens = field(default_factory=ControlTokens)

    def __post_init__(self) -> None:
        object.__setattr__(self, "blocks", tuple(self.blocks))

    def validate(self, strict: bool = True) -> None:
        """Check the alternating shape.

        Strict mode is the training-data contract: non-empty, starts with a
        non-empty reason block, strictly alternating, ends with a verbal
        block. Lenient mode additionally tolerates empty reason blocks and a
        trailing reason block, which live transcripts produce.
        """
        if not self.blocks:
            raise SequenceShapeError("sequence is empty")
        for i, block in enumerate(self.blocks):
            expected = BlockKind.REASON if i % 2 == 0 else BlockKind.VERBAL
            if block.kind is not expected:
                raise SequenceShapeError(
                    f"block {i} is {block.kind.value}, expected {expected.value}"
                )
            if block.kind is BlockKind.VERBAL:
                for marker in self.tokens.all():
                    if marker in block.text:
                        raise SequenceShapeError(
                            f"verbal block {i} contains control marker {marker!r}"
                        )
            if strict and block.kind is BlockKind.REASON and not block.text:
                raise SequenceShapeError(f"reason block {i} is empty")
        if strict and self.blocks[-1].kind is not BlockKind.VERBAL:
            raise SequenceShapeError("sequence does not end with a verbal block")

    def reason_blocks(self) -> Iterator[Block]:
        return (b for b in self.blocks if b.kind is BlockKind.REASON)

    def verbal_blocks(self) -> Iterator[Block]:
        return (b for b in self.blocks if b.kind is BlockKind.VERBAL)


def parse_interleaved(
    text: str, tokens: ControlTokens | None = None, strict: bool = True
) -> InterleavedSequence:
    """Parse tagged text into an interleaved sequence.

    Raises a ``TagError`` subclass on malformed input. Strict mode rejects
    trailing reasoning after the final end marker and empty reason blocks;
    lenient mode keeps both and logs a warning for trailing reasoning.
    """
    tokens = tokens or ControlTokens()
    pattern = re.compile(
        f"{re.escape(tokens.bov)}|{re.escape(tokens.eov)}"
    )
    blocks: list[Block] = []
    pos = 0
    open_bov = False
    verbal_start = 0
    for match in pattern.finditer(text):
        marker = match.group(0)
        if marker == tokens.bov:
            if open_bov:
                raise NestedTagsError(
                    f"begin marker at offset {match.start()} inside an open verbal span"
                )
            reason_text = text[pos : match.start()]
            if not reason_text and blocks:
                # an end marker immediately followed by a begin marker
                if strict:
                    raise EmptyReasonError(
                        f"empty reasoning before begin marker at offset {match.start()}"
                    )
            if not reason_text and not blocks and strict:
                raise EmptyReasonError("response begins with the begin marker")
            blocks.append(Block.reason(reason_text))
            open_bov = True
            verbal_start = match.end()
        else:
            if not open_bov:
                raise TagOrderError(
                    f"end marker at offset {match.start()} without a preceding begin marker"
                )
            blocks.append(Block.verbal(text[verbal_start : match.start()]))
            open_bov = False
        pos = match.end()
    if open_bov:
        raise UnbalancedTagsError("begin marker without a matching end marker")
    trailing = text[pos:]
    if trailing:
        if not blocks:
            # no tags at all: pure reasoning is not a valid interleaved response
            raise UnbalancedTagsError("no verbalization markers found")
        if strict:
            raise TrailingReasonError(
                f"{len(trailing)} chars of reasoning after the final end marker"
            )
        logger.warning("keeping %d chars of trailing reasoning", len(trailing))
        blocks.append(Block.reason(trailing))
    if not blocks:
        raise UnbalancedTagsError("no verbalization markers found")
    seq = InterleavedSequence(tuple(blocks), tokens)
    seq.validate(strict=strict)
    return seq


def render_interleaved(seq: InterleavedSequence) -> str:
    """Render a sequence back to tagged text. Inverse of ``parse_interleaved``."""
    parts: list[str] = []
    for block in seq.blocks:
        if block.kind is BlockKind.REASON:
            parts.append(block.text)
        else:
            parts.append(seq.tokens.bov + block.text + seq.tokens.eov)
    return "".join(parts)


def strip_verbalizations(seq: InterleavedSequence) -> str:
    """Concatenate the reasoning text, dropping all verbal chunks and markers."""
    return "".join(b.text for b in seq.reason_blocks())
