"""Speak-stage sinks: receive verbal chunks in emission order.

Audio synthesis is out of scope; the sinks here are a null sink, an
in-memory sink for tests, a file sink (one line per chunk, timestamped),
a callback adapter, and a stub HTTP text-to-speech client that POSTs each
chunk and discards the response body.
"""

from __future__ import annotations

import json
from typing import Callable, TextIO

from .clock import Clock, WallClock
from .runtime import RuntimeEvent, event_to_json


class SpeakSink:
    """Interface: receive() per chunk, close() once at end of stream."""

    def receive(self, text: str) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass


class NullSink(SpeakSink):
    def receive(self, text: str) -> None:
        pass


class MemorySink(SpeakSink):
    def __init__(self) -> None:
        self.chunks: list[str] = []
        self.closed = False

    def receive(self, text: str) -> None:
        self.chunks.append(text)

    def close(self) -> None:
        self.closed = True


class CallbackSink(SpeakSink):
    def __init__(self, fn: Callable[[str], None]) -> None:
        self._fn = fn

    def receive(self, text: str) -> None:
        self._fn(text)


class FileSink(SpeakSink):
    """Writes one JSON line per chunk: {"ts_ns", "text"}."""

    def __init__(self, stream: TextIO, clock: Clock | None = None) -> None:
        self._stream = stream
        self._clock = clock or WallClock()
        self._closed = False

    def receive(self, text: str) -> None:
        line = json.dumps(
            {"ts_ns": self._clock.now(), "text": text}, ensure_ascii=False
        )
        self._stream.write(line + "\n")

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._stream.flush()


class HttpTtsSink(SpeakSink):
    """Stub streaming TTS client: POSTs each chunk as JSON, ignores audio."""

    def __init__(self, url: str, timeout: float = 30.0, session=None) -> None:
        if session is None:
            import requests

            session = requests.Session()
        self._session = session
        self._url = url
        self._timeout = timeout

    def receive(self, text: str) -> None:
        response = self._session.post(
            self._url, json={"text": text}, timeout=self._timeout
        )
        status = getattr(response, "status_code", 200)
        if status >= 400:
            raise OSError(f"tts endpoint returned status {status}")


def write_transcript_jsonl(stream: TextIO, events: list[RuntimeEvent]) -> None:
    """One event per line: {"event", "index"?, "text"?, "ts_ns"}."""
    for event in events:
        stream.write(json.dumps(event_to_json(event), ensure_ascii=False) + "\n")
