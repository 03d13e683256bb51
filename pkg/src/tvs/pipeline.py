"""Think → Verbalize → Speak orchestration with latency instrumentation.

Two strategies share one runtime: the incremental strategy decides
continue-vs-verbalize per reasoning segment; the one-shot strategy withholds
decisions and verbalizes once, after the final segment. Latency is anchored
per run: t1 from query receipt to the committed begin-verbal decision, t2
from there to the first completed verbalization.

Wall-clock runs execute the three stages on separate threads joined by
bounded queues, so thinking continues while a verbalization is in flight.
Virtual-clock runs are serialized instead: scripted delays advance the clock
in consumption order, which makes timestamps bit-reproducible. t1/t2 are
unaffected by the choice (both anchors precede any stage overlap); totals in
serialized runs do not benefit from overlap and may exceed threaded ones.
"""

from __future__ import annotations

import logging
import math
import queue
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

from . import prompts
from .backends import BackendError, ModelRequest, Sampling, TokenEventKind
from .clock import Clock, VirtualClock, WallClock
from .interleave import InterleavedSequence, TagError
from .runtime import (
    EventKind,
    RuntimeConfig,
    RuntimeEvent,
    VerbalizerRuntime,
)
from .segmenter import Segmenter, SegmenterConfig
from .sinks import SpeakSink

logger = logging.getLogger(__name__)

QUEUE_CAPACITY = 64

THINK_FAILURE = "ThinkBackendFailure"
VERBALIZER_FAILURE = "VerbalizerFailure"
SPEAK_FAILURE = "SpeakSinkFailure"


class EmptySamplesError(ValueError):
    """percentile() needs at least one sample."""


class Strategy(Enum):
    SEQ = "seq"
    REVERT = "revert"


@dataclass(frozen=True)
class LatencyRecord:
    t1_ns: int
    t2_ns: int
    total_ns: int
    per_event: tuple[RuntimeEvent, ...]

    def __post_init__(self) -> None:
        if not (0 <= self.t1_ns <= self.total_ns):
            raise ValueError("t1 must lie within [0, total]")
        if self.t2_ns < 0 or self.t1_ns + self.t2_ns > self.total_ns:
            raise ValueError("t1 + t2 must not exceed total")


@dataclass
class RunResult:
    transcript: InterleavedSequence
    latency: LatencyRecord | None
    events: list[RuntimeEvent]
    error: str | None = None
    error_detail: str | None = None
    retried: bool = False

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass(frozen=True)
class PipelineConfig:
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    think_sampling: Sampling = field(default_factory=Sampling)
    think_max_tokens: int = 2048
    think_system_prompt: str | None = None  # defaults to the packaged asset


def runtime_config_for(strategy: Strategy, base: RuntimeConfig) -> RuntimeConfig:
    decide = strategy is Strategy.REVERT
    if base.decide_each_segment == decide:
        return base
    return RuntimeConfig(
        control_tokens=base.control_tokens,
        verbal_sampling=base.verbal_sampling,
        force_bov_on_final=base.force_bov_on_final,
        max_verbal_tokens=base.max_verbal_tokens,
        decide_each_segment=decide,
    )


def _think_request(query: str, config: PipelineConfig) -> ModelRequest:
    system = config.think_system_prompt
    if system is None:
        system = prompts.load("cot_system")
    return ModelRequest(
        system_prompt=system,
        messages=(("user", query),),
        sampling=config.think_sampling,
        max_tokens=config.think_max_tokens,
    )


def _latency(
    start_ns: int, events: Sequence[RuntimeEvent]
) -> LatencyRecord | None:
    bov_ts = None
    first_end_ts = None
    for event in events:
        if bov_ts is None and event.kind in (
            EventKind.DECISION_VERBALIZE,
            EventKind.FORCED_BOV,
        ):
            bov_ts = event.ts_ns
        elif bov_ts is not None and event.kind is EventKind.VERBAL_END:
            first_end_ts = event.ts_ns
            break
    if bov_ts is None or first_end_ts is None or not events:
        return None
    return LatencyRecord(
        t1_ns=bov_ts - start_ns,
        t2_ns=first_end_ts - bov_ts,
        total_ns=events[-1].ts_ns - start_ns,
        per_event=tuple(events),
    )


def _retries_before(backends: Iterable[object]) -> int:
    return sum(getattr(b, "retries_performed", 0) for b in backends)


def run(
    query: str,
    strategy: Strategy,
    think,
    verbalizer,
    speak: SpeakSink,
    clock: Clock | None = None,
    config: PipelineConfig | None = None,
    serialize: bool | None = None,
) -> RunResult:
    """Drive one query end to end. Never raises for stage failures; the
    result carries an error mark plus whatever partial transcript exists."""
    if not query:
        raise ValueError("query must be non-empty")
    config = config or PipelineConfig()
    clock = clock or WallClock()
    if serialize is None:
        serialize = isinstance(clock, VirtualClock)
    rc = runtime_config_for(strategy, config.runtime)
    retries_0 = _retries_before((think, verbalizer))
    start_ns = clock.now()
    runtime = VerbalizerRuntime(query, rc, clock)
    if serialize:
        error, detail = _run_serialized(
            query, think, verbalizer, speak, runtime, config
        )
    else:
        error, detail = _run_threaded(
            query, think, verbalizer, speak, runtime, config
        )
    events = runtime.events
    partial = not runtime.finished or error is not None
    try:
        transcript = runtime.transcript(partial=partial)
    except TagError as exc:
        # a live verbalizer can leak a control marker into verbal text;
        # surface that as a stage failure, not a crash
        transcript = runtime.transcript(partial=True)
        if error is None:
            error, detail = VERBALIZER_FAILURE, f"malformed transcript: {exc}"
    latency = _latency(start_ns, events) if error is None else None
    retried = _retries_before((think, verbalizer)) > retries_0
    if error is not None:
        logger.warning("run aborted: %s (%s)", error, detail)
    return RunResult(
        transcript=transcript,
        latency=latency,
        events=events,
        error=error,
        error_detail=detail,
        retried=retried,
    )


def _run_serialized(
    query, think, verbalizer, speak, runtime: VerbalizerRuntime, config
) -> tuple[str | None, str | None]:
    segmenter = Segmenter(config.segmenter)
    runtime.chunk_sink = speak.receive
    try:
        for event in think.stream_generate(_think_request(query, config)):
            if event.kind is TokenEventKind.DELTA:
                for seg in segmenter.push(event.text):
                    runtime.on_segment(seg, verbalizer)
            elif event.kind is TokenEventKind.ERROR:
                return THINK_FAILURE, event.reason
        final = segmenter.flush()
        if final is None:
            return THINK_FAILURE, "think stream produced no text"
        runtime.on_segment(final, verbalizer)
        return None, None
    except BackendError as exc:
        return VERBALIZER_FAILURE, str(exc)
    except OSError as exc:
        return SPEAK_FAILURE, str(exc)
    finally:
        try:
            speak.close()
        except OSError:
            logger.warning("speak sink close failed", exc_info=True)


def _run_threaded(
    query, think, verbalizer, speak, runtime: VerbalizerRuntime, config
) -> tuple[str | None, str | None]:
    deltas: queue.Queue = queue.Queue(maxsize=QUEUE_CAPACITY)
    chunks: queue.Queue = queue.Queue(maxsize=QUEUE_CAPACITY)
    failures: dict[str, str] = {}
    lock = threading.Lock()

    def fail(code: str, detail: str) -> None:
        with lock:
            failures.setdefault(code, detail)

    def think_stage() -> None:
        try:
            for event in think.stream_generate(_think_request(query, config)):
                if event.kind is TokenEventKind.DELTA:
                    deltas.put(event.text)
                elif event.kind is TokenEventKind.ERROR:
                    fail(THINK_FAILURE, event.reason)
                    break
        except Exception as exc:
            fail(THINK_FAILURE, str(exc))
        finally:
            deltas.put(None)

    def speak_stage() -> None:
        try:
            while True:
                chunk = chunks.get()
                if chunk is None:
                    speak.close()
                    return
                speak.receive(chunk)
        except Exception as exc:
            fail(SPEAK_FAILURE, str(exc))
            while chunks.get() is not None:
                pass

    runtime.chunk_sink = chunks.put
    think_thread = threading.Thread(target=think_stage, name="think", daemon=True)
    speak_thread = threading.Thread(target=speak_stage, name="speak", daemon=True)
    think_thread.start()
    speak_thread.start()
    segmenter = Segmenter(config.segmenter)
    try:
        while True:
            delta = deltas.get()
            if delta is None:
                break
            for seg in segmenter.push(delta):
                runtime.on_segment(seg, verbalizer)
        if THINK_FAILURE not in failures:
            final = segmenter.flush()
            if final is None:
                fail(THINK_FAILURE, "think stream produced no text")
            else:
                runtime.on_segment(final, verbalizer)
    except Exception as exc:
        detail = str(exc) if isinstance(exc, BackendError) else f"internal: {exc}"
        fail(VERBALIZER_FAILURE, detail)
        while deltas.get() is not None:  # unblock the producer
            pass
    finally:
        chunks.put(None)
        think_thread.join()
        speak_thread.join()
    for code in (THINK_FAILURE, VERBALIZER_FAILURE, SPEAK_FAILURE):
        if code in failures:
            return code, failures[code]
    return None, None


def percentile(samples: Sequence[int | float], p: float):
    """Nearest-rank percentile: the ceil(p/100*n)-th smallest sample."""
    if not samples:
        raise EmptySamplesError("no samples")
    if not 0 < p <= 100:
        raise ValueError("p must be in (0, 100]")
    ordered = sorted(samples)
    rank = math.ceil(p / 100 * len(ordered))
    return ordered[rank - 1]


@dataclass(frozen=True)
class LatencyReport:
    strategy: Strategy
    n: int
    p50_t1_ns: int
    p50_t2_ns: int
    p50_total_ns: int
    failures: int
    retried: int = 0

    def to_json_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "n": self.n,
            "p50_t1_ns": self.p50_t1_ns,
            "p50_t2_ns": self.p50_t2_ns,
            "p50_total_ns": self.p50_total_ns,
            "failures": self.failures,
            "retried": self.retried,
        }


def bench(
    queries: Sequence[str],
    n_runs: int,
    strategy: Strategy,
    backend_factory: Callable[[str, int], tuple[object, object]],
    clock_factory: Callable[[], Clock],
    speak_factory: Callable[[], SpeakSink] | None = None,
    config: PipelineConfig | None = None,
) -> LatencyReport:
    """Run each query n_runs times and aggregate p50 latencies.

    backend_factory(query, run_index) must return fresh (think, verbalizer)
    clients per run: scripted backends are consumed by a single run.
    Failed runs are counted and excluded from the percentile aggregation.
    """
    if not queries:
        raise ValueError("at least one query required")
    from .sinks import NullSink

    speak_factory = speak_factory or NullSink
    t1s: list[int] = []
    t2s: list[int] = []
    totals: list[int] = []
    failures = 0
    retried = 0
    for query in queries:
        for i in range(n_runs):
            # clock first: scripted backends advance the clock they share
            clock = clock_factory()
            think, verbalizer = backend_factory(query, i)
            result = run(
                query,
                strategy,
                think,
                verbalizer,
                speak_factory(),
                clock,
                config=config,
            )
            if result.ok and result.latency is not None:
                t1s.append(result.latency.t1_ns)
                t2s.append(result.latency.t2_ns)
                totals.append(result.latency.total_ns)
            else:
                failures += 1
            if result.retried:
                retried += 1
    if t1s:
        report = LatencyReport(
            strategy=strategy,
            n=len(t1s),
            p50_t1_ns=percentile(t1s, 50),
            p50_t2_ns=percentile(t2s, 50),
            p50_total_ns=percentile(totals, 50),
            failures=failures,
            retried=retried,
        )
    else:
        report = LatencyReport(strategy, 0, 0, 0, 0, failures, retried)
    return report
