"""Two-mode streaming verbalizer: think segments in, spoken summaries out.

The runtime starts in Thinking mode. Each content-bearing segment is appended
to the verbalizer context and a single greedy decision token is requested:
the continue marker keeps thinking, the begin-verbal marker switches to
Verbalizing mode, which streams verbal text until the end-verbal marker.
The final segment skips the decision and forces a verbalization, so every
finished stream ends with spoken output.

The verbalizer context replays the training layout: the user query, then an
assistant-side accumulation of raw reasoning segments interleaved with the
already-emitted tagged verbal spans.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from . import prompts
from .backends import GREEDY, BackendError, ModelRequest, Sampling, TokenEventKind
from .clock import Clock, WallClock
from .interleave import Block, ControlTokens, InterleavedSequence
from .segmenter import Segment

logger = logging.getLogger(__name__)


class StreamNotFinishedError(RuntimeError):
    """transcript() was requested before the final segment was processed."""


class StreamFinishedError(RuntimeError):
    """A segment arrived after the final segment was already processed."""


class Mode(Enum):
    THINKING = "thinking"
    VERBALIZING = "verbalizing"


@dataclass(frozen=True)
class RuntimeConfig:
    control_tokens: ControlTokens = field(default_factory=ControlTokens)
    verbal_sampling: Sampling = field(default_factory=Sampling)
    force_bov_on_final: bool = True
    max_verbal_tokens: int = 256
    # False realizes the one-shot strategy: decisions are withheld and the
    # single verbalization happens at the forced final segment.
    decide_each_segment: bool = True

    def __post_init__(self) -> None:
        if self.max_verbal_tokens < 1:
            raise ValueError("max_verbal_tokens must be >= 1")


class EventKind(Enum):
    SEGMENT_INGESTED = "segment_ingested"
    DECISION_CONTINUE = "decision_continue"
    DECISION_VERBALIZE = "decision_verbalize"
    FORCED_BOV = "forced_bov"
    VERBAL_CHUNK = "verbal_chunk"
    VERBAL_END = "verbal_end"


@dataclass(frozen=True)
class RuntimeEvent:
    kind: EventKind
    ts_ns: int
    index: int | None = None
    text: str | None = None
    truncated: bool = False  # only meaningful on VERBAL_END


def event_to_json(event: RuntimeEvent) -> dict:
    out: dict = {"event": event.kind.value}
    if event.index is not None:
        out["index"] = event.index
    if event.text is not None:
        out["text"] = event.text
    out["ts_ns"] = event.ts_ns
    if event.truncated:
        out["truncated"] = True
    return out


class VerbalizerRuntime:
    """Single-consumer state machine over a streaming verbalizer backend.

    Feed segments with on_segment(); when the final segment (or the
    end-of-stream marker) has been processed, transcript() returns the
    alternating reason/verbal sequence actually produced.
    """

    def __init__(
        self,
        query: str,
        config: RuntimeConfig | None = None,
        clock: Clock | None = None,
        system_prompt: str | None = None,
        chunk_sink: Callable[[str], None] | None = None,
    ) -> None:
        self._query = query
        self._config = config or RuntimeConfig()
        self._clock = clock or WallClock()
        self._system_prompt = (
            prompts.load("verbalizer_system") if system_prompt is None else system_prompt
        )
        self.chunk_sink = chunk_sink
        self._mode = Mode.THINKING
        self._finished = False
        self._events: list[RuntimeEvent] = []
        self._blocks: list[Block] = []
        self._pending: list[str] = []  # raw segment texts not yet verbalized
        self._context: list[str] = []  # tagged assistant-side accumulation
        self.overflow_count = 0
        self.unexpected_decision_count = 0

    @property
    def mode(self) -> Mode:
        return self._mode

    @property
    def finished(self) -> bool:
        return self._finished

    @property
    def events(self) -> list[RuntimeEvent]:
        return list(self._events)

    def context_text(self) -> str:
        return "".join(self._context)

    def _emit(self, kind: EventKind, **kw) -> RuntimeEvent:
        event = RuntimeEvent(kind, ts_ns=self._clock.now(), **kw)
        self._events.append(event)
        return event

    def on_segment(self, segment: Segment, verbalizer) -> list[RuntimeEvent]:
        """Ingest one segment, possibly verbalizing. Returns the new events."""
        if self._finished:
            raise StreamFinishedError("final segment already processed")
        if self._mode is not Mode.THINKING:
            raise RuntimeError("on_segment requires Thinking mode")
        before = len(self._events)
        is_marker = segment.is_final and not segment.text
        if not is_marker:
            self._emit(EventKind.SEGMENT_INGESTED, index=segment.index)
            self._pending.append(segment.text)
            self._context.append(segment.text)
        if segment.is_final:
            self._finished = True
            if self._config.force_bov_on_final:
                if not is_marker or self._pending:
                    self._emit(EventKind.FORCED_BOV)
                    self._verbalize(verbalizer)
            elif not is_marker and not self._blank(segment.text):
                self._decide(segment, verbalizer)
        elif self._config.decide_each_segment and not self._blank(segment.text):
            self._decide(segment, verbalizer)
        return self._events[before:]

    @staticmethod
    def _blank(text: str) -> bool:
        return not text.strip()

    def _decide(self, segment: Segment, verbalizer) -> None:
        tokens = self._config.control_tokens
        exact = getattr(verbalizer, "exact_token_control", False)
        request = ModelRequest(
            system_prompt=self._system_prompt,
            messages=(("user", self._query), ("assistant", self.context_text())),
            sampling=GREEDY,
            max_tokens=1 if exact else 4,
            stop_markers=(tokens.con, tokens.bov),
        )
        completion = self._collect(verbalizer.stream_generate(request))
        pos_con = completion.find(tokens.con)
        pos_bov = completion.find(tokens.bov)
        if pos_bov >= 0 and (pos_con < 0 or pos_bov < pos_con):
            self._emit(EventKind.DECISION_VERBALIZE, index=segment.index)
            self._verbalize(verbalizer)
            return
        if pos_con < 0:
            # the model produced neither marker; keep thinking rather than
            # risk verbalizing on a garbled decision
            self.unexpected_decision_count += 1
            logger.warning(
                "unexpected decision token %r at segment %d; treating as continue",
                completion[:40],
                segment.index,
            )
        self._emit(EventKind.DECISION_CONTINUE, index=segment.index)

    def _verbalize(self, verbalizer) -> None:
        tokens = self._config.control_tokens
        self._mode = Mode.VERBALIZING
        self._context.append(tokens.bov)
        request = ModelRequest(
            system_prompt=self._system_prompt,
            messages=(("user", self._query), ("assistant", self.context_text())),
            sampling=self._config.verbal_sampling,
            max_tokens=self._config.max_verbal_tokens,
            stop_markers=(tokens.eov,),
        )
        raw_parts: list[str] = []
        for event in verbalizer.stream_generate(request):
            if event.kind is TokenEventKind.DELTA:
                raw_parts.append(event.text)
                display = event.text
                cut = display.find(tokens.eov)
                if cut >= 0:
                    display = display[:cut]
                if display:
                    self._emit(EventKind.VERBAL_CHUNK, text=display)
                    if self.chunk_sink is not None:
                        self.chunk_sink(display)
            elif event.kind is TokenEventKind.ERROR:
                self._mode = Mode.THINKING
                raise BackendError(event.reason)
        raw = "".join(raw_parts)
        truncated = not raw.endswith(tokens.eov)
        verbal_text = raw[: -len(tokens.eov)] if not truncated else raw
        if truncated:
            self.overflow_count += 1
            logger.warning(
                "verbalization ended without the end marker; truncated at %d chars",
                len(verbal_text),
            )
        self._emit(EventKind.VERBAL_END, truncated=truncated)
        self._blocks.append(Block.reason("".join(self._pending)))
        self._pending.clear()
        self._blocks.append(Block.verbal(verbal_text))
        self._context.append(verbal_text + tokens.eov)
        self._mode = Mode.THINKING

    @staticmethod
    def _collect(stream) -> str:
        parts: list[str] = []
        for event in stream:
            if event.kind is TokenEventKind.DELTA:
                parts.append(event.text)
            elif event.kind is TokenEventKind.ERROR:
                raise BackendError(event.reason)
        return "".join(parts)

    def transcript(self, partial: bool = False) -> InterleavedSequence:
        """The alternating sequence produced. Requires a finished stream
        unless partial is set, in which case whatever exists is returned
        unvalidated (aborted runs can stop anywhere)."""
        if not self._finished and not partial:
            raise StreamNotFinishedError("stream still in progress")
        blocks = list(self._blocks)
        if self._pending:
            blocks.append(Block.reason("".join(self._pending)))
        seq = InterleavedSequence(tuple(blocks), self._config.control_tokens)
        if not partial:
            seq.validate(strict=False)
        return seq
