"""Incremental splitting of a streamed think-text into reasoning segments.

Chunks arrive in arbitrary sizes; segments are delimited by configurable
strings (newline by default). Two guarantees drive the design:

- Conservation: with keep_delimiter on, concatenating all emitted segment
  texts reproduces the pushed bytes exactly.
- Chunking-invariance: segment boundaries depend only on the full input,
  never on how it was sliced into chunks. Achieved by holding back any
  buffer tail that could still grow into a longer delimiter match.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class PushAfterFlushError(RuntimeError):
    """push() was called on an already-flushed segmenter."""


class DoubleFlushError(RuntimeError):
    """flush() was called twice."""


@dataclass(frozen=True)
class SegmenterConfig:
    delimiters: tuple[str, ...] = ("\n",)
    keep_delimiter: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "delimiters", tuple(self.delimiters))
        if not self.delimiters:
            raise ValueError("at least one delimiter is required")
        if any(not d for d in self.delimiters):
            raise ValueError("delimiters must be non-empty strings")


@dataclass(frozen=True)
class Segment:
    text: str
    index: int
    is_final: bool = False

    def is_marker(self) -> bool:
        """True if this looks like the retroactive end-of-stream marker.

        The marker reuses the index of the last emitted segment; callers that
        must be exact should also compare indices (see split_all).
        """
        return self.is_final and not self.text


def strip_trailing_delimiter(text: str, config: SegmenterConfig) -> str:
    """Remove the terminating delimiter a kept-delimiter segment ends with."""
    for d in sorted(config.delimiters, key=len, reverse=True):
        if text.endswith(d):
            return text[: -len(d)]
    return text


class Segmenter:
    """Stateful chunk-to-segment splitter. Single-owner, not thread-safe."""

    def __init__(self, config: SegmenterConfig | None = None) -> None:
        self._config = config or SegmenterConfig()
        # longest-first so "\n\n" wins over "\n" at the same position
        self._delims = sorted(self._config.delimiters, key=len, reverse=True)
        self._buf = ""
        self._scan = 0  # first position not yet proven boundary-free
        self._next_index = 0
        self._flushed = False

    @property
    def config(self) -> SegmenterConfig:
        return self._config

    def push(self, chunk: str) -> list[Segment]:
        if self._flushed:
            raise PushAfterFlushError("segmenter already flushed")
        if not chunk:
            return []
        self._buf += chunk
        return self._drain()

    def _drain(self) -> list[Segment]:
        out: list[Segment] = []
        buf = self._buf
        keep = self._config.keep_delimiter
        i = self._scan
        start = 0
        while i < len(buf):
            matched = None
            for d in self._delims:
                if buf.startswith(d, i):
                    matched = d
                    break
            # hold back while a longer delimiter could still complete here;
            # emitting now would make boundaries depend on chunk slicing
            rest_len = len(buf) - i
            if any(
                len(d) > rest_len and d.startswith(buf[i:])
                for d in self._delims
            ):
                break
            if matched is None:
                i += 1
                continue
            end = i + len(matched)
            text = buf[start:end] if keep else buf[start:i]
            out.append(Segment(text, self._next_index))
            self._next_index += 1
            start = end
            i = end
        self._buf = buf[start:]
        self._scan = i - start
        return out

    def flush(self) -> Segment | None:
        """Finish the stream.

        A non-empty residual buffer becomes the final segment. An empty
        buffer yields a final-marker result (empty text, index of the last
        emitted segment) so the caller learns which segment was last, or
        None if nothing was ever buffered or emitted.
        """
        if self._flushed:
            raise DoubleFlushError("segmenter already flushed")
        self._flushed = True
        tail = self._buf
        self._buf = ""
        self._scan = 0
        if tail:
            if not self._config.keep_delimiter:
                tail = strip_trailing_delimiter(tail, self._config)
            seg = Segment(tail, self._next_index, is_final=True)
            self._next_index += 1
            return seg
        if self._next_index == 0:
            return None
        return Segment("", self._next_index - 1, is_final=True)


def split_all(text: str, config: SegmenterConfig | None = None) -> list[Segment]:
    """Segment a complete string in one shot (push everything, then flush).

    The flush marker, when produced, is folded into the last segment's
    is_final flag rather than returned as a separate entry.
    """
    seg = Segmenter(config)
    out = seg.push(text)
    fin = seg.flush()
    if fin is not None:
        if fin.is_marker() and out and fin.index == out[-1].index:
            out[-1] = Segment(out[-1].text, out[-1].index, is_final=True)
        else:
            out.append(fin)
    return out
