"""Command-line entry point.

Subcommands: run (one query through the pipeline), bench (batch latency,
one-shot vs incremental), build-data (solve/summarize/scatter a corpus),
emit-train (training records), eval (speech metrics + judge), replay
(deterministic re-run of a recorded session).

Exit codes: 0 success, 2 usage error, 3 backend error, 4 validation error.
Errors are also printed as one JSON object per line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from types import SimpleNamespace

from . import __version__, data_builder, metrics, pipeline, session, sinks, train_prep
from .backends import BackendError, ScriptedBackend
from .clock import VirtualClock, WallClock
from .config import CliConfig, ConfigError, http_backend_for, load_config
from .interleave import TagError, parse_interleaved, render_interleaved
from .pipeline import PipelineConfig, Strategy
from .runtime import RuntimeConfig
from .segmenter import SegmenterConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_BACKEND = 3
EXIT_VALIDATION = 4


def _json_error(code: str, detail: str) -> None:
    sys.stderr.write(json.dumps({"error": code, "detail": detail}) + "\n")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # exit 2 with a structured line
        _json_error("usage", message)
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _formatter(prog: str) -> argparse.HelpFormatter:
    return argparse.HelpFormatter(prog, width=96)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="tvs",
        description="Streaming think/verbalize pipeline, dataset builder and metrics.",
        formatter_class=_formatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    run_p = sub.add_parser(
        "run",
        help="answer one query through the pipeline",
        formatter_class=_formatter,
    )
    run_p.add_argument("--query", help="question to answer (overrides the session's)")
    run_p.add_argument("--scripted", metavar="SESSION", help="scripted session file")
    run_p.add_argument("--strategy", choices=["seq", "revert"], help="verbalization strategy")
    run_p.add_argument("--clock", choices=["wall", "virtual"], help="time source")
    run_p.add_argument("--config", metavar="TOML", help="backend configuration file")
    run_p.add_argument("--transcript", metavar="PATH", help="write event JSONL here")
    run_p.add_argument("--speak-log", metavar="PATH", help="write spoken chunks JSONL here")
    run_p.add_argument(
        "--interactive", action="store_true", help="read queries in a loop, stream chunks"
    )

    bench_p = sub.add_parser(
        "bench",
        help="aggregate p50 latencies per strategy",
        formatter_class=_formatter,
    )
    bench_p.add_argument("--scripted", metavar="SESSION", help="scripted session file")
    bench_p.add_argument("--runs", type=int, default=1, help="runs per strategy")
    bench_p.add_argument(
        "--strategy",
        choices=["seq", "revert", "both"],
        default="both",
        help="which strategies to measure",
    )
    bench_p.add_argument("--clock", choices=["wall", "virtual"], help="time source")
    bench_p.add_argument("--config", metavar="TOML", help="backend configuration file")
    bench_p.add_argument("--out", metavar="PATH", help="write the JSON report here")

    build_p = sub.add_parser(
        "build-data",
        help="solve/summarize/scatter a raw corpus",
        formatter_class=_formatter,
    )
    build_p.add_argument("--in", dest="input", required=True, metavar="JSONL")
    build_p.add_argument("--out", required=True, metavar="JSONL")
    build_p.add_argument("--rejects", metavar="JSONL", help="quarantine file")
    build_p.add_argument("--manifest", metavar="JSON", help="build manifest file")
    build_p.add_argument("--workers", type=int, default=4)
    build_p.add_argument("--seed", type=int, default=0)
    build_p.add_argument("--config", metavar="TOML", help="backend configuration file")
    build_p.add_argument("--scripted", metavar="SCRIPT", help="scripted builder backend")
    build_p.add_argument("--fewshot", metavar="DIR", help="interleaving example directory")

    emit_p = sub.add_parser(
        "emit-train",
        help="turn built examples into training records",
        formatter_class=_formatter,
    )
    emit_p.add_argument("--in", dest="input", required=True, metavar="JSONL")
    emit_p.add_argument("--out", required=True, metavar="JSONL")
    emit_p.add_argument("--manifest", metavar="JSON", help="emission manifest file")

    eval_p = sub.add_parser(
        "eval",
        help="speech metrics and judge verdicts over responses",
        formatter_class=_formatter,
    )
    eval_p.add_argument("--in", dest="input", required=True, metavar="JSONL")
    eval_p.add_argument("--parses", metavar="JSONL", help="dependency parses for depth")
    eval_p.add_argument("--csv", metavar="PATH", help="write per-row CSV here")
    eval_p.add_argument("--summary", metavar="PATH", help="write aggregate JSON here")
    eval_p.add_argument("--judge", action="store_true", help="verify answers via judge")
    eval_p.add_argument("--judge-scripted", metavar="SCRIPT", help="scripted judge backend")
    eval_p.add_argument("--config", metavar="TOML", help="backend configuration file")

    replay_p = sub.add_parser(
        "replay",
        help="re-run a recorded session deterministically",
        formatter_class=_formatter,
    )
    replay_p.add_argument("--scripted", metavar="SESSION", required=True)
    replay_p.add_argument("--strategy", choices=["seq", "revert"])
    replay_p.add_argument("--transcript", metavar="PATH", help="write event JSONL here")
    replay_p.add_argument("--report", metavar="PATH", help="write latency JSON here")

    return parser


def _pipeline_config(config: CliConfig) -> PipelineConfig:
    return PipelineConfig(
        runtime=RuntimeConfig(
            control_tokens=config.control_tokens,
            max_verbal_tokens=config.max_verbal_tokens,
        ),
        segmenter=SegmenterConfig(delimiters=config.delimiters),
    )


def _print_run_result(args, strategy: Strategy, result: pipeline.RunResult) -> None:
    sys.stdout.write(render_interleaved(result.transcript) + "\n")
    sys.stdout.write("---\n")
    summary = {
        "strategy": strategy.value,
        "t1_ns": None if result.latency is None else result.latency.t1_ns,
        "t2_ns": None if result.latency is None else result.latency.t2_ns,
        "total_ns": None if result.latency is None else result.latency.total_ns,
        "retried": result.retried,
        "error": result.error,
    }
    sys.stdout.write(json.dumps(summary) + "\n")
    if getattr(args, "transcript", None):
        with open(args.transcript, "w", encoding="utf-8") as f:
            sinks.write_transcript_jsonl(f, result.events)


def _run_one(args, sess: session.Session | None, config: CliConfig) -> int:
    strategy_name = args.strategy or (sess.strategy if sess else config.strategy)
    strategy = Strategy(strategy_name)
    clock_name = args.clock or (sess.clock if sess else config.clock)
    clock = VirtualClock() if clock_name == "virtual" else WallClock()
    if sess is not None:
        query = args.query or sess.query
        vclock = clock if isinstance(clock, VirtualClock) else None
        think = ScriptedBackend(sess.think, vclock, name="think")
        verbalizer = ScriptedBackend(
            sess.verbalizer_for(strategy.value), vclock, name="verbalizer"
        )
    else:
        if not args.query:
            _json_error("usage", "--query is required without --scripted")
            return EXIT_USAGE
        query = args.query
        think = http_backend_for(config, "think")
        verbalizer = http_backend_for(config, "verbalizer")
    speak_log = None
    if getattr(args, "speak_log", None):
        speak_log = open(args.speak_log, "w", encoding="utf-8")
    speak = sinks.FileSink(speak_log, clock) if speak_log else sinks.NullSink()
    try:
        result = pipeline.run(
            query, strategy, think, verbalizer, speak, clock, _pipeline_config(config)
        )
    finally:
        if speak_log is not None:
            speak_log.close()
    _print_run_result(args, strategy, result)
    if getattr(args, "report", None):
        report = {
            "strategy": strategy.value,
            "n": 1,
            "p50_t1_ns": None if result.latency is None else result.latency.t1_ns,
            "p50_t2_ns": None if result.latency is None else result.latency.t2_ns,
            "p50_total_ns": None if result.latency is None else result.latency.total_ns,
            "failures": 0 if result.ok else 1,
            "retried": 1 if result.retried else 0,
        }
        Path(args.report).write_text(json.dumps(report, indent=2) + "\n", "utf-8")
    if result.error is not None:
        _json_error(result.error, result.error_detail or "")
        return EXIT_BACKEND
    return EXIT_OK


def _cmd_run(args) -> int:
    config = load_config(args.config)
    if args.interactive:
        return _cmd_run_interactive(args, config)
    sess = session.load_session(args.scripted) if args.scripted else None
    return _run_one(args, sess, config)


def _cmd_run_interactive(args, config: CliConfig) -> int:
    if args.scripted:
        _json_error("usage", "--interactive and --scripted are mutually exclusive")
        return EXIT_USAGE
    think = http_backend_for(config, "think")
    verbalizer = http_backend_for(config, "verbalizer")
    strategy = Strategy(args.strategy or config.strategy)
    sys.stdout.write("query> ")
    sys.stdout.flush()
    for line in sys.stdin:
        query = line.strip()
        if not query:
            break
        speak = sinks.CallbackSink(
            lambda text: (sys.stdout.write(text + "\n"), sys.stdout.flush())
        )
        result = pipeline.run(
            query, strategy, think, verbalizer, speak, WallClock(), _pipeline_config(config)
        )
        if result.error is not None:
            _json_error(result.error, result.error_detail or "")
        elif result.latency is not None:
            sys.stdout.write(
                f"[t1 {result.latency.t1_ns / 1e9:.2f}s"
                f" t2 {result.latency.t2_ns / 1e9:.2f}s]\n"
            )
        sys.stdout.write("query> ")
        sys.stdout.flush()
    sys.stdout.write("\n")
    return EXIT_OK


def _cmd_bench(args) -> int:
    config = load_config(args.config)
    strategies = (
        [Strategy.SEQ, Strategy.REVERT]
        if args.strategy == "both"
        else [Strategy(args.strategy)]
    )
    if not args.scripted:
        _json_error("usage", "bench currently requires --scripted")
        return EXIT_USAGE
    sess = session.load_session(args.scripted)
    clock_name = args.clock or sess.clock
    reports = []
    for strategy in strategies:
        clocks: list[VirtualClock] = []

        def clock_factory():
            clock = VirtualClock() if clock_name == "virtual" else WallClock()
            if isinstance(clock, VirtualClock):
                clocks.append(clock)
            return clock

        def backend_factory(query: str, run_index: int):
            vclock = clocks[-1] if clocks else None
            return (
                ScriptedBackend(sess.think, vclock, name="think"),
                ScriptedBackend(
                    sess.verbalizer_for(strategy.value), vclock, name="verbalizer"
                ),
            )

        report = pipeline.bench(
            [sess.query],
            args.runs,
            strategy,
            backend_factory,
            clock_factory,
            config=_pipeline_config(config),
        )
        reports.append(report.to_json_dict())
    payload = json.dumps({"reports": reports}, indent=2)
    sys.stdout.write(payload + "\n")
    if args.out:
        Path(args.out).write_text(payload + "\n", "utf-8")
    return EXIT_OK


def _load_script_file(path: str):
    p = Path(path)
    if not p.exists():
        raise session.SessionError(f"script file not found: {p}")
    return session.script_from_json(json.loads(p.read_text("utf-8")))


def _cmd_build_data(args) -> int:
    config = load_config(args.config)
    examples = data_builder.load_raw_jsonl(args.input)
    if args.scripted:
        client = ScriptedBackend(_load_script_file(args.scripted), name="builder")
        workers = 1  # scripted turn order must match example order
    else:
        client = http_backend_for(config, "builder")
        workers = args.workers
    fewshot = None
    if args.fewshot:
        from . import prompts

        fewshot = prompts.load_scatter_fewshot(args.fewshot)
    outcome = data_builder.build_examples(
        examples, client, workers=workers, seed=args.seed, fewshot=fewshot
    )
    with open(args.out, "w", encoding="utf-8") as f:
        data_builder.write_built_jsonl(f, outcome.built)
    if args.rejects:
        with open(args.rejects, "w", encoding="utf-8") as f:
            data_builder.write_rejects_jsonl(f, outcome.rejects)
    if args.manifest:
        Path(args.manifest).write_text(
            json.dumps(outcome.manifest, indent=2, sort_keys=True) + "\n", "utf-8"
        )
    sys.stdout.write(json.dumps(outcome.manifest, sort_keys=True) + "\n")
    return EXIT_OK


def _cmd_emit_train(args) -> int:
    path = Path(args.input)
    if not path.exists():
        raise data_builder.SourceMissingError(f"input file not found: {path}")
    examples = []
    with path.open("r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            ok = row.get("validation", {}).get("ok", True)
            try:
                seq = parse_interleaved(row["interleaved_text"], strict=True)
            except TagError:
                seq, ok = None, False
            examples.append(
                SimpleNamespace(
                    raw=SimpleNamespace(id=row["id"], question=row["question"]),
                    interleaved=seq,
                    validation=SimpleNamespace(ok=ok),
                )
            )
    records, manifest = train_prep.emit_records(examples)
    with open(args.out, "w", encoding="utf-8") as f:
        train_prep.write_records_jsonl(f, records)
    if args.manifest:
        Path(args.manifest).write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", "utf-8"
        )
    sys.stdout.write(json.dumps(manifest, sort_keys=True) + "\n")
    return EXIT_OK


def _cmd_eval(args) -> int:
    path = Path(args.input)
    if not path.exists():
        raise data_builder.SourceMissingError(f"input file not found: {path}")
    trees_by_id: dict[str, list[metrics.ParseTree]] = {}
    if args.parses:
        parses_path = Path(args.parses)
        if not parses_path.exists():
            raise data_builder.SourceMissingError(
                f"parses file not found: {parses_path}"
            )
        with parses_path.open("r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                row = json.loads(line)
                trees_by_id.setdefault(str(row["id"]), []).append(
                    metrics.ParseTree.from_json_dict(row)
                )
    judge = None
    if args.judge_scripted:
        judge = ScriptedBackend(_load_script_file(args.judge_scripted), name="judge")
    elif args.judge:
        judge = http_backend_for(load_config(args.config), "judge")
    rows = []
    with path.open("r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            rid = str(row["id"])
            verdict = None
            if judge is not None:
                verdict = metrics.verify_answer(
                    row["question"], row["ground_truth"], row["response"], judge
                )
            rows.append(
                metrics.compute_row(
                    rid, row["response"], trees_by_id.get(rid, ()), verdict
                )
            )
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as f:
            metrics.write_rows_csv(f, rows)
    summary = metrics.aggregate(rows)
    payload = json.dumps(summary, indent=2, sort_keys=True)
    sys.stdout.write(payload + "\n")
    if args.summary:
        Path(args.summary).write_text(payload + "\n", "utf-8")
    return EXIT_OK


def _cmd_replay(args) -> int:
    sess = session.load_session(args.scripted)
    ns = SimpleNamespace(
        query=None,
        strategy=args.strategy,
        clock="virtual",
        transcript=args.transcript,
        speak_log=None,
        report=args.report,
    )
    return _run_one(ns, sess, CliConfig())


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits for usage errors and --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE
    handlers = {
        "run": _cmd_run,
        "bench": _cmd_bench,
        "build-data": _cmd_build_data,
        "emit-train": _cmd_emit_train,
        "eval": _cmd_eval,
        "replay": _cmd_replay,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, session.SessionError, TagError) as exc:
        _json_error("validation", str(exc))
        return EXIT_VALIDATION
    except (
        data_builder.SourceMissingError,
        data_builder.InsufficientExamplesError,
    ) as exc:
        _json_error("validation", str(exc))
        return EXIT_VALIDATION
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        _json_error("validation", f"{type(exc).__name__}: {exc}")
        return EXIT_VALIDATION
    except (BackendError, data_builder.BuilderError) as exc:
        _json_error("backend", str(exc))
        return EXIT_BACKEND
    except OSError as exc:
        _json_error("io", str(exc))
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
