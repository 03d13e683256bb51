import csv
import io
import json
import sys
from pathlib import Path

import pytest

import tvs.cli as cli
from helpers import constructive_scatter
from tvs.backends import Script, ScriptedBackend, turn
from tvs.config import CliConfig, ConfigError, load_config
from tvs.session import dump_session, load_session

REPO = Path(__file__).resolve().parent.parent
DEMO = REPO / "fixtures" / "demo.script"
FLAGS_FILE = Path(__file__).resolve().parent / "data" / "cli_flags.txt"


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def last_json_line(out):
    return json.loads(out.strip().splitlines()[-1])


def stderr_error(err):
    return json.loads(err.strip().splitlines()[0])


# ----------------------------------------------------------------- exit codes

def test_no_subcommand_prints_help(capsys):
    code, out, _ = run_cli(capsys)
    assert code == 2
    assert "COMMAND" in out


def test_unknown_subcommand(capsys):
    code, _, err = run_cli(capsys, "bogus")
    assert code == 2
    assert stderr_error(err)["error"] == "usage"


def test_help_exits_zero(capsys):
    for argv in (["--help"], ["run", "--help"], ["eval", "--help"]):
        assert run_cli(capsys, *argv)[0] == 0


def test_version(capsys):
    code, out, _ = run_cli(capsys, "--version")
    assert code == 0
    assert out.startswith("tvs ")


def test_run_requires_query_or_session(capsys):
    code, _, err = run_cli(capsys, "run")
    assert code == 2
    assert stderr_error(err)["error"] == "usage"


def test_run_without_backend_config_fails_validation(capsys):
    code, _, err = run_cli(capsys, "run", "--query", "hi")
    assert code == 4
    assert stderr_error(err)["error"] == "validation"


def test_missing_eval_input(capsys, tmp_path):
    code, _, err = run_cli(capsys, "eval", "--in", str(tmp_path / "absent.jsonl"))
    assert code == 4
    assert stderr_error(err)["error"] == "validation"


def test_malformed_session_file(capsys, tmp_path):
    bad = tmp_path / "bad.script"
    bad.write_text("{not json", "utf-8")
    code, _, err = run_cli(capsys, "run", "--scripted", str(bad))
    assert code == 4
    session_missing = tmp_path / "keyless.script"
    session_missing.write_text(json.dumps({"query": "q"}), "utf-8")
    code, _, err = run_cli(capsys, "run", "--scripted", str(session_missing))
    assert code == 4


def test_backend_failure_exits_three(capsys, tmp_path):
    dead = tmp_path / "dead.script"
    dead.write_text(
        json.dumps(
            {"query": "q", "think": {"turns": []}, "verbalizer": {"turns": []}}
        ),
        "utf-8",
    )
    code, out, err = run_cli(capsys, "run", "--scripted", str(dead))
    assert code == 3
    assert stderr_error(err)["error"] == "ThinkBackendFailure"
    assert last_json_line(out)["error"] == "ThinkBackendFailure"


def test_interactive_rejects_scripted(capsys):
    code, _, err = run_cli(capsys, "run", "--interactive", "--scripted", str(DEMO))
    assert code == 2


# ---------------------------------------------------------------- golden flags

def load_flag_sections():
    sections = {}
    current = None
    for line in FLAGS_FILE.read_text("utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        else:
            sections[current].append(line)
    return sections


@pytest.mark.parametrize("section", sorted(load_flag_sections()))
def test_help_documents_every_flag(capsys, section):
    flags = load_flag_sections()[section]
    argv = ["--help"] if section == "tvs" else [section, "--help"]
    code, out, _ = run_cli(capsys, *argv)
    assert code == 0
    for flag in flags:
        assert flag in out, f"{section} --help is missing {flag}"


# ------------------------------------------------------------------ run/replay

def test_run_demo_incremental(capsys):
    code, out, err = run_cli(capsys, "run", "--scripted", str(DEMO))
    assert code == 0, err
    summary = last_json_line(out)
    assert summary == {
        "strategy": "revert",
        "t1_ns": 82000000,
        "t2_ns": 6000000,
        "total_ns": 134000000,
        "retried": False,
        "error": None,
    }
    transcript = out.split("\n---\n")[0]
    assert transcript.count("<bov>") == 2
    assert transcript.endswith("<eov>")


def test_run_demo_one_shot(capsys):
    code, out, _ = run_cli(capsys, "run", "--scripted", str(DEMO), "--strategy", "seq")
    assert code == 0
    summary = last_json_line(out)
    assert summary["strategy"] == "seq"
    assert summary["t1_ns"] == 120000000
    assert summary["total_ns"] == 126000000


def test_run_is_byte_deterministic(capsys):
    outputs = [run_cli(capsys, "run", "--scripted", str(DEMO))[1] for _ in range(2)]
    assert outputs[0] == outputs[1]


def test_run_writes_transcript_and_speak_log(capsys, tmp_path):
    transcript = tmp_path / "events.jsonl"
    speak = tmp_path / "speak.jsonl"
    code, _, _ = run_cli(
        capsys,
        "run",
        "--scripted",
        str(DEMO),
        "--transcript",
        str(transcript),
        "--speak-log",
        str(speak),
    )
    assert code == 0
    events = [json.loads(l) for l in transcript.read_text().splitlines()]
    assert events[0]["event"] == "segment_ingested"
    assert events[-1]["event"] == "verbal_end"
    assert all("ts_ns" in e for e in events)
    chunks = [json.loads(l) for l in speak.read_text().splitlines()]
    spoken = [e["text"] for e in events if e["event"] == "verbal_chunk"]
    assert [c["text"] for c in chunks] == spoken


def test_replay_matches_run_and_repeats(capsys, tmp_path):
    report_path = tmp_path / "report.json"
    first = run_cli(
        capsys, "replay", "--scripted", str(DEMO), "--report", str(report_path)
    )
    second = run_cli(
        capsys, "replay", "--scripted", str(DEMO), "--report", str(report_path)
    )
    assert first[0] == second[0] == 0
    assert first[1] == second[1]
    report = json.loads(report_path.read_text())
    assert report["p50_t1_ns"] == 82000000
    assert report["failures"] == 0


def test_session_roundtrip():
    sess = load_session(DEMO)
    again = json.loads(dump_session(sess))
    assert again["query"] == sess.query
    assert again["think"]["turns"][0]["emissions"][0][1] == 40000000
    assert "verbalizer_seq" in again


# ----------------------------------------------------------------------- bench

def test_bench_both_strategies(capsys, tmp_path):
    out_path = tmp_path / "bench.json"
    code, out, _ = run_cli(
        capsys,
        "bench",
        "--scripted",
        str(DEMO),
        "--runs",
        "3",
        "--out",
        str(out_path),
    )
    assert code == 0
    payload = json.loads(out)
    by_strategy = {r["strategy"]: r for r in payload["reports"]}
    assert set(by_strategy) == {"seq", "revert"}
    assert by_strategy["revert"]["p50_t1_ns"] == 82000000
    assert by_strategy["seq"]["p50_t1_ns"] == 120000000
    assert all(r["n"] == 3 and r["failures"] == 0 for r in payload["reports"])
    assert json.loads(out_path.read_text()) == payload


def test_bench_single_strategy(capsys):
    code, out, _ = run_cli(
        capsys, "bench", "--scripted", str(DEMO), "--strategy", "revert"
    )
    assert code == 0
    reports = json.loads(out)["reports"]
    assert [r["strategy"] for r in reports] == ["revert"]


def test_bench_requires_scripted(capsys):
    code, _, err = run_cli(capsys, "bench")
    assert code == 2
    assert stderr_error(err)["error"] == "usage"


# ---------------------------------------------------------------------- config

def test_load_config_defaults():
    config = load_config(None)
    assert config.strategy == "revert"
    assert config.clock == "wall"
    with pytest.raises(ConfigError):
        config.require_backend("think")


def test_load_config_full(tmp_path, monkeypatch):
    path = tmp_path / "tvs.toml"
    path.write_text(
        """
[backend.think]
base_url = "http://localhost:9/v1"
model = "m-think"
key_env = "THINK_KEY"

[backend.judge]
base_url = "http://localhost:9/v1"
model = "m-judge"

[runtime]
strategy = "seq"
clock = "virtual"
delimiters = ["\\n", ". "]
bov = "[[B]]"
eov = "[[E]]"
con = "[[C]]"
max_verbal_tokens = 64
""",
        "utf-8",
    )
    monkeypatch.setenv("THINK_KEY", "sk-secret")
    config = load_config(path)
    assert config.strategy == "seq"
    assert config.clock == "virtual"
    assert config.delimiters == ("\n", ". ")
    assert config.control_tokens.bov == "[[B]]"
    assert config.max_verbal_tokens == 64
    think = config.require_backend("think")
    assert think.model == "m-think"
    assert think.api_key() == "sk-secret"
    assert config.require_backend("judge").api_key() is None


def test_load_config_failures(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    bad_role = tmp_path / "role.toml"
    bad_role.write_text('[backend.oracle]\nbase_url = "x"\nmodel = "y"\n', "utf-8")
    with pytest.raises(ConfigError):
        load_config(bad_role)
    missing_field = tmp_path / "field.toml"
    missing_field.write_text('[backend.think]\nbase_url = "x"\n', "utf-8")
    with pytest.raises(ConfigError):
        load_config(missing_field)


def test_cli_reports_config_error(capsys, tmp_path):
    bad_role = tmp_path / "role.toml"
    bad_role.write_text('[backend.oracle]\nbase_url = "x"\nmodel = "y"\n', "utf-8")
    code, _, err = run_cli(
        capsys, "run", "--query", "hi", "--config", str(bad_role)
    )
    assert code == 4
    assert stderr_error(err)["error"] == "validation"


# ----------------------------------------------------------------- interactive

def test_interactive_loop(capsys, monkeypatch):
    def fake_backend(config, role):
        if role == "think":
            return ScriptedBackend(Script((turn("two plus two"),)))
        return ScriptedBackend(Script((turn("Four.", "<eov>"),)))

    monkeypatch.setattr(cli, "http_backend_for", fake_backend)
    monkeypatch.setattr(sys, "stdin", io.StringIO("what is 2+2?\n\n"))
    code, out, _ = run_cli(capsys, "run", "--interactive")
    assert code == 0
    assert out.count("query> ") == 2
    assert "Four.\n" in out
    assert "[t1 " in out


# ------------------------------------------------------------------ full chain

def make_builder_script(path, per_example_texts):
    turns = [
        {"emissions": [[text, 0]]}
        for texts in per_example_texts
        for text in texts
    ]
    path.write_text(json.dumps({"turns": turns}), "utf-8")


def test_build_emit_eval_chain(capsys, tmp_path, rng):
    raw = tmp_path / "raw.jsonl"
    rows = [
        {"id": "ex-a", "question": "How many apples?", "gold_answer": "17"},
        {"id": "ex-b", "question": "How many pears?", "gold_answer": "3"},
    ]
    raw.write_text("".join(json.dumps(r) + "\n" for r in rows), "utf-8")

    scatters = []
    per_example = []
    for _ in rows:
        reasoning, summary, tagged = constructive_scatter(rng)
        scatters.append((reasoning, summary, tagged))
        per_example.append([reasoning, "s1", "s2", "s3", summary, tagged])
    script_path = tmp_path / "builder.script"
    make_builder_script(script_path, per_example)

    built = tmp_path / "built.jsonl"
    rejects = tmp_path / "rejects.jsonl"
    manifest_path = tmp_path / "manifest.json"
    code, out, err = run_cli(
        capsys,
        "build-data",
        "--in", str(raw),
        "--out", str(built),
        "--rejects", str(rejects),
        "--manifest", str(manifest_path),
        "--scripted", str(script_path),
    )
    assert code == 0, err
    manifest = json.loads(manifest_path.read_text())
    assert manifest["input"] == 2
    assert manifest["built"] == 2
    assert manifest["rejected"] == 0
    built_rows = [json.loads(l) for l in built.read_text().splitlines()]
    assert [r["id"] for r in built_rows] == ["ex-a", "ex-b"]
    assert built_rows[0]["validation"]["ok"] is True
    assert rejects.read_text() == ""

    records = tmp_path / "records.jsonl"
    emit_manifest = tmp_path / "emit.json"
    code, out, _ = run_cli(
        capsys,
        "emit-train",
        "--in", str(built),
        "--out", str(records),
        "--manifest", str(emit_manifest),
    )
    assert code == 0
    assert json.loads(emit_manifest.read_text())["records"] == 2
    record_rows = [json.loads(l) for l in records.read_text().splitlines()]
    assert record_rows[0]["question"] == "How many apples?"
    assert record_rows[0]["char_spans"][0]["role"] == "think"

    responses = tmp_path / "responses.jsonl"
    response_rows = [
        {
            "id": r["id"],
            "question": r["question"],
            "ground_truth": rows[i]["gold_answer"],
            "response": "The answer is seventeen.",
        }
        for i, r in enumerate(rows)
    ]
    responses.write_text(
        "".join(json.dumps(r) + "\n" for r in response_rows), "utf-8"
    )
    parses = tmp_path / "parses.jsonl"
    parses.write_text(
        json.dumps(
            {
                "id": "ex-a",
                "tokens": [{"id": 1, "head": 0}, {"id": 2, "head": 1}],
            }
        )
        + "\n",
        "utf-8",
    )
    judge_script = tmp_path / "judge.script"
    judge_script.write_text(
        json.dumps(
            {
                "turns": [
                    {"emissions": [["Checking: 17 matches. correct", 0]]},
                    {"emissions": [["3 does not match. incorrect", 0]]},
                ]
            }
        ),
        "utf-8",
    )
    csv_path = tmp_path / "rows.csv"
    summary_path = tmp_path / "summary.json"
    code, out, _ = run_cli(
        capsys,
        "eval",
        "--in", str(responses),
        "--parses", str(parses),
        "--csv", str(csv_path),
        "--summary", str(summary_path),
        "--judge-scripted", str(judge_script),
    )
    assert code == 0
    summary = json.loads(summary_path.read_text())
    assert summary["rows"] == 2
    assert summary["judged"] == 2
    assert summary["accuracy_pct"] == pytest.approx(50.0)
    parsed_csv = list(csv.reader(io.StringIO(csv_path.read_text())))
    assert parsed_csv[0] == ["id", "wc", "fre", "dd", "nv", "correct"]
    by_id = {row[0]: row for row in parsed_csv[1:]}
    assert by_id["ex-a"][3] == "1"  # depth from the parse tree
    assert by_id["ex-a"][5] == "true"
    assert by_id["ex-b"][5] == "false"
    assert by_id["ex-b"][3] == ""  # no parse supplied


def test_emit_train_rejects_malformed_rows(capsys, tmp_path):
    built = tmp_path / "built.jsonl"
    rows = [
        {
            "id": "good",
            "question": "q",
            "interleaved_text": "r\n<bov>v.<eov>",
            "validation": {"ok": True},
        },
        {
            "id": "tagless",
            "question": "q",
            "interleaved_text": "no markers here",
            "validation": {"ok": True},
        },
    ]
    built.write_text("".join(json.dumps(r) + "\n" for r in rows), "utf-8")
    records = tmp_path / "records.jsonl"
    code, out, _ = run_cli(capsys, "emit-train", "--in", str(built), "--out", str(records))
    assert code == 0
    manifest = last_json_line(out)
    assert manifest["records"] == 1
    assert manifest["rejected"] == 1


def test_build_data_missing_input(capsys, tmp_path):
    code, _, err = run_cli(
        capsys,
        "build-data",
        "--in", str(tmp_path / "nope.jsonl"),
        "--out", str(tmp_path / "o.jsonl"),
    )
    assert code == 4
    assert stderr_error(err)["error"] == "validation"
