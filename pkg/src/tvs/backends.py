"""Streaming model backends: a deterministic scripted one and an HTTP client.

Every backend implements stream_generate(request) -> iterator of TokenEvent.
The concatenation of Delta texts is the full completion; exactly one terminal
event (Done or Error) closes each stream. Stop markers truncate the stream at
their first occurrence and the marker itself is kept in the output, which is
what lets callers see which control token ended a span.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterator, Mapping, Sequence

from .clock import VirtualClock

logger = logging.getLogger(__name__)


class BackendError(RuntimeError):
    """Raised by helpers when a backend interaction cannot proceed."""


class MalformedEventError(BackendError):
    """A `data:` line in an event stream carried an unparseable payload."""


@dataclass(frozen=True)
class Sampling:
    temperature: float = 0.1
    nucleus_p: float = 0.95
    greedy: bool = False

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.nucleus_p <= 1:
            raise ValueError("nucleus_p must be in (0, 1]")


GREEDY = Sampling(temperature=0.1, nucleus_p=0.95, greedy=True)


@dataclass(frozen=True)
class ModelRequest:
    system_prompt: str = ""
    messages: tuple[tuple[str, str], ...] = ()
    sampling: Sampling = field(default_factory=Sampling)
    max_tokens: int = 1024
    stop_markers: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(tuple(m) for m in self.messages))
        object.__setattr__(self, "stop_markers", tuple(self.stop_markers))
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


class TokenEventKind(Enum):
    DELTA = "delta"
    DONE = "done"
    ERROR = "error"


@dataclass(frozen=True)
class TokenEvent:
    kind: TokenEventKind
    text: str = ""
    reason: str = ""
    meta: Mapping[str, object] | None = None

    @staticmethod
    def delta(text: str, meta: Mapping[str, object] | None = None) -> "TokenEvent":
        return TokenEvent(TokenEventKind.DELTA, text=text, meta=meta)

    @staticmethod
    def done() -> "TokenEvent":
        return TokenEvent(TokenEventKind.DONE)

    @staticmethod
    def error(reason: str) -> "TokenEvent":
        return TokenEvent(TokenEventKind.ERROR, reason=reason)


class StopScanner:
    """Truncates a delta stream at the first stop marker, keeping the marker.

    Markers may arrive split across deltas, so a suffix that could still
    grow into a marker is withheld until decidable.
    """

    def __init__(self, markers: Sequence[str]) -> None:
        self._markers = [m for m in markers if m]
        self._maxlen = max((len(m) for m in self._markers), default=0)
        self._pending = ""

    def feed(self, text: str) -> tuple[str, bool]:
        """Returns (text safe to emit now, whether a marker completed)."""
        if not self._markers:
            return text, False
        buf = self._pending + text
        best: tuple[int, str] | None = None
        for m in self._markers:
            pos = buf.find(m)
            if pos < 0:
                continue
            if best is None or pos < best[0] or (pos == best[0] and len(m) > len(best[1])):
                best = (pos, m)
        if best is not None:
            self._pending = ""
            return buf[: best[0] + len(best[1])], True
        hold = 0
        for k in range(min(len(buf), self._maxlen - 1), 0, -1):
            tail = buf[len(buf) - k :]
            if any(m.startswith(tail) for m in self._markers):
                hold = k
                break
        self._pending = buf[len(buf) - hold :] if hold else ""
        return buf[: len(buf) - hold] if hold else buf, False

    def drain(self) -> str:
        """Release withheld text when the underlying stream ends."""
        pending, self._pending = self._pending, ""
        return pending


@dataclass(frozen=True)
class ScriptTurn:
    """One scripted reply: optional request predicate plus timed emissions."""

    emissions: tuple[tuple[str, int], ...]
    match: Callable[[ModelRequest], bool] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "emissions", tuple((t, int(d)) for t, d in self.emissions)
        )
        for text, delay in self.emissions:
            if delay < 0:
                raise ValueError("emission delay must be >= 0")


@dataclass(frozen=True)
class Script:
    turns: tuple[ScriptTurn, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "turns", tuple(self.turns))


def turn(*emissions: tuple[str, int] | str) -> ScriptTurn:
    """Convenience builder: strings default to a zero-tick delay."""
    norm = tuple(
        (e, 0) if isinstance(e, str) else (e[0], e[1]) for e in emissions
    )
    return ScriptTurn(norm)


class ScriptedBackend:
    """Replays a script turn per request, advancing a virtual clock by the
    scripted delays. Turn consumption is locked so concurrent stages draw
    turns in a well-defined order; each stream is single-consumer.
    """

    exact_token_control = True

    def __init__(
        self,
        script: Script,
        clock: VirtualClock | None = None,
        name: str = "scripted",
    ) -> None:
        self._script = script
        self._clock = clock
        self._name = name
        self._next_turn = 0
        self._lock = threading.Lock()
        self.requests: list[ModelRequest] = []

    @property
    def turns_consumed(self) -> int:
        with self._lock:
            return self._next_turn

    def stream_generate(self, request: ModelRequest) -> Iterator[TokenEvent]:
        with self._lock:
            self.requests.append(request)
            if self._next_turn >= len(self._script.turns):
                turn_ = None
            else:
                turn_ = self._script.turns[self._next_turn]
                self._next_turn += 1
        return self._stream(turn_, request)

    def _stream(
        self, turn_: ScriptTurn | None, request: ModelRequest
    ) -> Iterator[TokenEvent]:
        if turn_ is None:
            yield TokenEvent.error(f"{self._name}: script exhausted")
            return
        if turn_.match is not None and not turn_.match(request):
            yield TokenEvent.error(f"{self._name}: script turn predicate rejected request")
            return
        scanner = StopScanner(request.stop_markers)
        emitted = 0
        for text, delay in turn_.emissions:
            if emitted >= request.max_tokens:
                break
            if self._clock is not None and delay:
                self._clock.advance(delay)
            emitted += 1
            out, stopped = scanner.feed(text)
            if out:
                yield TokenEvent.delta(out)
            if stopped:
                yield TokenEvent.done()
                return
        tail = scanner.drain()
        if tail:
            yield TokenEvent.delta(tail)
        yield TokenEvent.done()


def parse_sse_line(line: str) -> TokenEvent | None:
    """Parse one line of an OpenAI-style event stream.

    `data: {json}` with a content delta becomes Delta; `data: [DONE]` becomes
    Done; anything without the data prefix (comments, event names, blanks,
    role-only deltas) is skipped by returning None.
    """
    if not line.startswith("data:"):
        return None
    payload = line[len("data:") :].strip()
    if payload == "[DONE]":
        return TokenEvent.done()
    try:
        body = json.loads(payload)
    except json.JSONDecodeError as exc:
        raise MalformedEventError(f"unparseable event payload: {payload[:80]!r}") from exc
    try:
        choices = body.get("choices") or []
        delta = choices[0].get("delta") if choices else None
        content = delta.get("content") if isinstance(delta, dict) else None
    except (AttributeError, IndexError, TypeError) as exc:
        raise MalformedEventError(f"unexpected event shape: {payload[:80]!r}") from exc
    if content is None:
        return None
    if not isinstance(content, str):
        raise MalformedEventError("delta content is not a string")
    return TokenEvent.delta(content)


class HttpBackend:
    """OpenAI-compatible chat-completions client with SSE streaming.

    Stop markers are enforced client-side rather than through the provider's
    `stop` field: providers drop the matched marker from the output, and the
    callers here need to see it. One retry is attempted on transport errors
    that occur before any delta was produced; retries are counted so reports
    can flag runs whose latency includes one.
    """

    exact_token_control = False

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 120.0,
        max_retries: int = 1,
        session: object | None = None,
    ) -> None:
        if session is None:
            import requests

            session = requests.Session()
        self._session = session
        self._base_url = base_url.rstrip("/")
        self._model = model
        self._api_key = api_key
        self._timeout = timeout
        self._max_retries = max_retries
        self._stats_lock = threading.Lock()
        self.retries_performed = 0

    def _body(self, request: ModelRequest) -> dict:
        messages = []
        if request.system_prompt:
            messages.append({"role": "system", "content": request.system_prompt})
        messages.extend({"role": r, "content": t} for r, t in request.messages)
        body: dict = {
            "model": self._model,
            "messages": messages,
            "stream": True,
            "max_tokens": request.max_tokens,
        }
        if request.sampling.greedy:
            # no argmax access over HTTP; temperature 0 is the closest ask
            body["temperature"] = 0.0
        else:
            body["temperature"] = request.sampling.temperature
            body["top_p"] = request.sampling.nucleus_p
        return body

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        return headers

    def stream_generate(self, request: ModelRequest) -> Iterator[TokenEvent]:
        attempts = self._max_retries + 1
        for attempt in range(attempts):
            emitted_any = False
            try:
                response = self._session.post(
                    f"{self._base_url}/chat/completions",
                    json=self._body(request),
                    headers=self._headers(),
                    stream=True,
                    timeout=self._timeout,
                )
                if getattr(response, "status_code", 200) >= 400:
                    raise BackendError(f"http status {response.status_code}")
                scanner = StopScanner(request.stop_markers)
                saw_done = False
                for line in response.iter_lines(decode_unicode=True):
                    if line is None:
                        continue
                    if isinstance(line, bytes):
                        line = line.decode("utf-8", errors="replace")
                    event = parse_sse_line(line)
                    if event is None:
                        continue
                    if event.kind is TokenEventKind.DONE:
                        saw_done = True
                        break
                    out, stopped = scanner.feed(event.text)
                    if out:
                        emitted_any = True
                        yield TokenEvent.delta(out)
                    if stopped:
                        yield TokenEvent.done()
                        return
                tail = scanner.drain()
                if tail:
                    yield TokenEvent.delta(tail)
                if not saw_done:
                    logger.warning("stream closed without [DONE]; treating as done")
                yield TokenEvent.done()
                return
            except MalformedEventError as exc:
                yield TokenEvent.error(str(exc))
                return
            except Exception as exc:  # transport errors from the http layer
                if emitted_any or attempt + 1 >= attempts:
                    yield TokenEvent.error(f"transport error: {exc}")
                    return
                with self._stats_lock:
                    self.retries_performed += 1
                logger.warning("retrying after transport error: %s", exc)
        yield TokenEvent.error("unreachable retry state")


def collect_text(events: Iterator[TokenEvent]) -> str:
    """Concatenate deltas until the terminal event; raise on Error."""
    parts: list[str] = []
    for event in events:
        if event.kind is TokenEventKind.DELTA:
            parts.append(event.text)
        elif event.kind is TokenEventKind.DONE:
            return "".join(parts)
        else:
            raise BackendError(event.reason)
    raise BackendError("stream ended without a terminal event")
