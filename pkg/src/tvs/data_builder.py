"""Dataset construction: solve a question, summarize the reasoning in four
progressive passes, then scatter the summary back through the reasoning as
tagged verbal spans.

Scatter outputs are machine-checked rather than trusted: the reasoning must
survive verbatim, the verbal spans must reproduce the summary's content, and
they must appear in the summary's order. Failures are retried once and then
quarantined, never silently dropped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence, TextIO

from . import prompts
from .backends import BackendError, ModelRequest, Sampling, collect_text
from .interleave import (
    InterleavedSequence,
    TagError,
    parse_interleaved,
    render_interleaved,
    strip_verbalizations,
)

logger = logging.getLogger(__name__)

WIKI2HOP_SUBTYPES = ("inference", "comparison", "bridge_comparison", "compositional")

BUILDER_SAMPLING = Sampling(temperature=0.1, nucleus_p=0.95)
BUILDER_MAX_TOKENS = 2048


class BuilderError(RuntimeError):
    pass


class EmptyCompletionError(BuilderError):
    pass


class SourceMissingError(BuilderError):
    pass


class InsufficientExamplesError(BuilderError):
    pass


class SummarizeStageError(BuilderError):
    """A summarize stage failed; .partial holds the completed stage outputs."""

    def __init__(self, stage: int, partial: list[str], reason: str) -> None:
        super().__init__(f"summarize stage {stage} failed: {reason}")
        self.stage = stage
        self.partial = partial


@dataclass(frozen=True)
class RawExample:
    id: str
    question: str
    gold_answer: str
    source: str = "other"  # gsm8k | wiki2hop | other
    subtype: str | None = None

    def __post_init__(self) -> None:
        if not self.question or not self.gold_answer:
            raise ValueError("question and gold_answer must be non-empty")

    def to_json_dict(self) -> dict:
        out = {
            "id": self.id,
            "question": self.question,
            "gold_answer": self.gold_answer,
            "source": self.source,
        }
        if self.subtype is not None:
            out["subtype"] = self.subtype
        return out

    @staticmethod
    def from_json_dict(data: dict) -> "RawExample":
        return RawExample(
            id=str(data["id"]),
            question=data["question"],
            gold_answer=data["gold_answer"],
            source=data.get("source", "other"),
            subtype=data.get("subtype"),
        )


class ViolationCode(Enum):
    VERBATIM = "VerbatimViolation"
    SUMMARY_ORDER = "SummaryOrderViolation"
    SUMMARY_CONTENT = "SummaryContentMismatch"
    TAG_ERROR = "TagError"


@dataclass(frozen=True)
class Violation:
    code: ViolationCode
    detail: str

    def to_json_dict(self) -> dict:
        return {"code": self.code.value, "detail": self.detail}


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "violations", tuple(self.violations))

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json_dict(self) -> dict:
        return {
            "ok": self.ok,
            "violations": [v.to_json_dict() for v in self.violations],
        }


@dataclass(frozen=True)
class BuiltExample:
    raw: RawExample
    reasoning: str
    summary_stages: tuple[str, ...]
    interleaved: InterleavedSequence
    validation: ValidationReport

    def to_json_dict(self) -> dict:
        out = self.raw.to_json_dict()
        out["reasoning"] = self.reasoning
        out["summary_stages"] = list(self.summary_stages)
        out["interleaved_text"] = render_interleaved(self.interleaved)
        out["validation"] = self.validation.to_json_dict()
        return out


def solve(example: RawExample, client) -> str:
    """Produce the full step-by-step reasoning for one question."""
    request = ModelRequest(
        system_prompt=prompts.load("solve"),
        messages=(("user", example.question),),
        sampling=BUILDER_SAMPLING,
        max_tokens=BUILDER_MAX_TOKENS,
    )
    reasoning = collect_text(client.stream_generate(request))
    if not reasoning.strip():
        raise EmptyCompletionError(f"empty reasoning for example {example.id}")
    return reasoning


def summarize(reasoning: str, client, question: str = "") -> list[str]:
    """Refine a summary through exactly four sequential constraint passes.

    Each pass sees the full chat history, so stage k is conditioned on the
    stage k-1 output. The question is included so the repetition pass can
    recognize question material; callers without one may leave it empty.
    """
    if not reasoning:
        raise ValueError("reasoning must be non-empty")
    system = prompts.load("summarize_base")
    first_user = prompts.load("summarize_user").format(
        question=question,
        analysis=reasoning,
        instruction=prompts.load(prompts.SUMMARIZE_STAGES[0]),
    )
    messages: list[tuple[str, str]] = [("user", first_user)]
    outputs: list[str] = []
    for stage, asset in enumerate(prompts.SUMMARIZE_STAGES):
        if stage > 0:
            messages.append(("user", prompts.load(asset)))
        request = ModelRequest(
            system_prompt=system,
            messages=tuple(messages),
            sampling=BUILDER_SAMPLING,
            max_tokens=BUILDER_MAX_TOKENS,
        )
        try:
            out = collect_text(client.stream_generate(request))
        except BackendError as exc:
            raise SummarizeStageError(stage + 1, outputs, str(exc)) from exc
        outputs.append(out)
        messages.append(("assistant", out))
    return outputs


def _normalize(text: str) -> str:
    """Collapse whitespace runs to single spaces and trim the ends."""
    return " ".join(text.split())


def validate_scatter(
    reasoning: str, summary: str, seq: InterleavedSequence
) -> ValidationReport:
    """Three structural checks on a scatter output.

    Verbatim: the concatenated reason blocks must equal the input reasoning.
    Content: the verbal blocks joined must equal the summary. Order: each
    verbal block must match the summary at strictly increasing offsets,
    greedily left to right. All comparisons are whitespace-normalized.
    """
    violations: list[Violation] = []
    got_reasoning = _normalize(strip_verbalizations(seq))
    want_reasoning = _normalize(reasoning)
    if got_reasoning != want_reasoning:
        violations.append(
            Violation(
                ViolationCode.VERBATIM,
                f"reasoning text altered (got {len(got_reasoning)} chars, "
                f"expected {len(want_reasoning)})",
            )
        )
    verbal_texts = [b.text for b in seq.verbal_blocks()]
    got_summary = _normalize(" ".join(verbal_texts))
    want_summary = _normalize(summary)
    if got_summary != want_summary:
        violations.append(
            Violation(
                ViolationCode.SUMMARY_CONTENT,
                f"verbal blocks do not reproduce the summary (got "
                f"{len(got_summary)} chars, expected {len(want_summary)})",
            )
        )
    offset = 0
    for i, text in enumerate(verbal_texts):
        pos = want_summary.find(_normalize(text), offset)
        if pos < 0:
            violations.append(
                Violation(
                    ViolationCode.SUMMARY_ORDER,
                    f"verbal block {i} not found in the summary after offset {offset}",
                )
            )
            break
        offset = pos + 1
    return ValidationReport(tuple(violations))


def scatter(
    reasoning: str,
    summary: str,
    client,
    fewshot: Sequence[dict] | None = None,
) -> tuple[InterleavedSequence, ValidationReport]:
    """Interleave a summary into its reasoning via the builder model.

    The completion is parsed strictly; parse failures raise TagError.
    Returns the parsed sequence plus its validation report.
    """
    if not reasoning or not summary:
        raise ValueError("reasoning and summary must be non-empty")
    if fewshot is None:
        fewshot = prompts.load_scatter_fewshot()
    user_template = prompts.load("scatter_user")
    messages: list[tuple[str, str]] = []
    for example in fewshot:
        messages.append(
            ("user", user_template.format(analysis=example["analysis"], summary=example["summary"]))
        )
        messages.append(("assistant", example["output"]))
    messages.append(
        ("user", user_template.format(analysis=reasoning, summary=summary))
    )
    request = ModelRequest(
        system_prompt=prompts.load("scatter_system"),
        messages=tuple(messages),
        sampling=BUILDER_SAMPLING,
        max_tokens=BUILDER_MAX_TOKENS,
    )
    completion = collect_text(client.stream_generate(request))
    seq = parse_interleaved(completion, strict=True)
    return seq, validate_scatter(reasoning, summary, seq)


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    with path.open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def load_raw_jsonl(path: str | Path) -> list[RawExample]:
    p = Path(path)
    if not p.exists():
        raise SourceMissingError(f"source file not found: {p}")
    return [RawExample.from_json_dict(r) for r in _read_jsonl(p)]


def adapt_gsm8k_row(row: dict, index: int) -> RawExample:
    """Map the public grade-school math schema {question, answer} where the
    final answer follows a '#### ' marker."""
    answer = row["answer"]
    gold = answer.rsplit("#### ", 1)[-1].strip() if "#### " in answer else answer.strip()
    return RawExample(
        id=row.get("id", f"gsm8k-{index}"),
        question=row["question"],
        gold_answer=gold,
        source="gsm8k",
    )


def adapt_wiki2hop_row(row: dict, index: int) -> RawExample:
    """Map the public two-hop QA schema {_id, question, answer, type}."""
    return RawExample(
        id=str(row.get("_id", row.get("id", f"wiki2hop-{index}"))),
        question=row["question"],
        gold_answer=str(row["answer"]),
        source="wiki2hop",
        subtype=row.get("type"),
    )


def sample_corpus(
    gsm8k_path: str | Path | None = None,
    wiki2hop_path: str | Path | None = None,
    gsm8k: int | str | None = None,
    wiki2hop_per_type: int | None = None,
    seed: int = 0,
) -> list[RawExample]:
    """Deterministically sample raw examples from adapted JSONL sources.

    gsm8k may be "all" or a count; wiki2hop sampling draws the same count
    from each of the four question subtypes and fails loudly when a subtype
    is missing or short.
    """
    rng = random.Random(seed)
    out: list[RawExample] = []
    if gsm8k is not None:
        if gsm8k_path is None:
            raise SourceMissingError("gsm8k requested but no source path given")
        rows = load_raw_jsonl(gsm8k_path)
        if gsm8k == "all":
            out.extend(rows)
        else:
            n = int(gsm8k)
            if n > len(rows):
                raise InsufficientExamplesError(
                    f"asked for {n} gsm8k examples, source has {len(rows)}"
                )
            out.extend(rng.sample(rows, n))
    if wiki2hop_per_type is not None:
        if wiki2hop_path is None:
            raise SourceMissingError("wiki2hop requested but no source path given")
        rows = load_raw_jsonl(wiki2hop_path)
        by_type: dict[str, list[RawExample]] = {t: [] for t in WIKI2HOP_SUBTYPES}
        for row in rows:
            if row.subtype in by_type:
                by_type[row.subtype].append(row)
        for subtype in WIKI2HOP_SUBTYPES:
            pool = by_type[subtype]
            if len(pool) < wiki2hop_per_type:
                raise InsufficientExamplesError(
                    f"subtype {subtype}: asked for {wiki2hop_per_type}, have {len(pool)}"
                )
            out.extend(rng.sample(pool, wiki2hop_per_type))
    return out


@dataclass
class BuildOutcome:
    built: list[BuiltExample]
    rejects: list[dict]
    manifest: dict


def prompt_asset_hashes() -> dict[str, str]:
    return {
        name: hashlib.sha256(prompts.load(name).encode("utf-8")).hexdigest()[:16]
        for name in prompts.ASSETS
    }


def build_examples(
    examples: Sequence[RawExample],
    client,
    workers: int = 4,
    seed: int = 0,
    fewshot: Sequence[dict] | None = None,
) -> BuildOutcome:
    """Run solve/summarize/scatter over a corpus with one retry on invalid
    scatter output. Output ordering is by example id, independent of worker
    scheduling. Use workers=1 with scripted clients, whose turn order is
    consumed globally."""

    def process(example: RawExample) -> tuple[RawExample, BuiltExample | None, dict | None]:
        try:
            reasoning = solve(example, client)
            stages = summarize(reasoning, client, question=example.question)
            summary = stages[-1]
            seq, report = _scatter_with_retry(reasoning, summary, client, fewshot)
            built = BuiltExample(
                raw=example,
                reasoning=reasoning,
                summary_stages=tuple(stages),
                interleaved=seq,
                validation=report,
            )
            if report.ok:
                return example, built, None
            reject = built.to_json_dict()
            return example, None, reject
        except (BuilderError, BackendError, TagError) as exc:
            reject = example.to_json_dict()
            reject["error"] = f"{type(exc).__name__}: {exc}"
            return example, None, reject

    results: list[tuple[RawExample, BuiltExample | None, dict | None]] = []
    if workers <= 1:
        results.extend(process(e) for e in examples)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results.extend(pool.map(process, examples))
    results.sort(key=lambda r: r[0].id)
    built = [b for _, b, _ in results if b is not None]
    rejects = [r for _, _, r in results if r is not None]
    histogram: dict[str, int] = {}
    for reject in rejects:
        for violation in reject.get("validation", {}).get("violations", []):
            code = violation["code"]
            histogram[code] = histogram.get(code, 0) + 1
        if "error" in reject:
            histogram["error"] = histogram.get("error", 0) + 1
    manifest = {
        "input": len(examples),
        "built": len(built),
        "rejected": len(rejects),
        "violation_histogram": histogram,
        "seed": seed,
        "prompt_hashes": prompt_asset_hashes(),
    }
    return BuildOutcome(built=built, rejects=rejects, manifest=manifest)


def _scatter_with_retry(
    reasoning: str, summary: str, client, fewshot
) -> tuple[InterleavedSequence, ValidationReport]:
    first_error: TagError | None = None
    for attempt in range(2):
        try:
            seq, report = scatter(reasoning, summary, client, fewshot=fewshot)
        except TagError as exc:
            first_error = exc
            logger.warning("scatter parse failed (attempt %d): %s", attempt + 1, exc)
            continue
        if report.ok or attempt == 1:
            return seq, report
        logger.warning(
            "scatter validation failed (attempt %d): %s",
            attempt + 1,
            [v.code.value for v in report.violations],
        )
    # both attempts failed to parse: synthesize a tag-error report around
    # a minimal sequence so the example can be quarantined with details
    report = ValidationReport(
        (Violation(ViolationCode.TAG_ERROR, f"unparseable output: {first_error}"),)
    )
    seq = parse_interleaved(
        f"{reasoning}<bov>{_normalize(summary)}<eov>", strict=False
    )
    return seq, report


def write_built_jsonl(stream: TextIO, built: Iterable[BuiltExample]) -> None:
    for example in built:
        stream.write(json.dumps(example.to_json_dict(), ensure_ascii=False) + "\n")


def write_rejects_jsonl(stream: TextIO, rejects: Iterable[dict]) -> None:
    for reject in rejects:
        stream.write(json.dumps(reject, ensure_ascii=False) + "\n")
