"""End-to-end CLI behavior: output, exit codes, file artifacts."""

import json

import pytest

from pbefix.cli import gradcheck_battery, main, read_examples
from tests.test_dsl import NAME_PHONE_EXAMPLES, NAME_PHONE_PROGRAM


def write_examples(path, pairs):
    with open(path, "w") as fh:
        for i, o in pairs:
            fh.write(json.dumps({"i": i, "o": o}) + "\n")
    return str(path)


# ---------------------------------------------------------------------------
# run


def test_run_name_phone_golden(capsys):
    argv = ["run", "--program", NAME_PHONE_PROGRAM]
    for text, _ in NAME_PHONE_EXAMPLES:
        argv += ["--input", text]
    assert main(argv) == 0
    out = capsys.readouterr().out.splitlines()
    assert out == [expected for _, expected in NAME_PHONE_EXAMPLES]


def test_run_program_from_file(tmp_path, capsys):
    path = tmp_path / "prog.txt"
    path.write_text(NAME_PHONE_PROGRAM)
    code = main(["run", "--program", str(path),
                 "--input", NAME_PHONE_EXAMPLES[0][0]])
    assert code == 0
    assert capsys.readouterr().out.strip() == NAME_PHONE_EXAMPLES[0][1]


def test_run_unparseable_program_exits_2(capsys):
    assert main(["run", "--program", "Concat(Bogus())", "--input", "x"]) == 2
    err = capsys.readouterr().err
    assert "cannot parse program" in err and "offset" in err


def test_run_exec_error_reports_input_and_exits_1(capsys):
    # The second input has no comma, so the Regex(",") position fails there;
    # the first still prints its output.
    code = main(["run", "--program", NAME_PHONE_PROGRAM,
                 "--input", NAME_PHONE_EXAMPLES[0][0],
                 "--input", "no commas here 123"])
    assert code == 1
    captured = capsys.readouterr()
    assert captured.out.splitlines() == [NAME_PHONE_EXAMPLES[0][1]]
    assert "input 1" in captured.err and "NoSuchMatch" in captured.err


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["run", "--program", "x", "--bogus"])
    assert exc.value.code == 2


def test_missing_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


# ---------------------------------------------------------------------------
# synth


def test_synth_solves_overfit_task(overfit_checkpoint, tmp_path, capsys):
    examples = write_examples(tmp_path / "ex.jsonl",
                              overfit_checkpoint.task.examples)
    trace_path = tmp_path / "trace.jsonl"
    code = main(["synth", "--checkpoint", str(overfit_checkpoint.path),
                 "--examples", examples, "--method", "fixer",
                 "--trace", str(trace_path)])
    assert code == 0
    program_text = capsys.readouterr().out.strip()
    from pbefix.dsl import execute, parse
    program = parse(program_text)
    for i, o in overfit_checkpoint.task.examples:
        assert execute(program, i) == o
    records = [json.loads(line) for line in
               trace_path.read_text().splitlines()]
    assert records[0]["method"] == "fixer"
    assert records[-1]["matched"] is True


def test_synth_both_methods_respect_budget(overfit_checkpoint, tmp_path):
    examples = write_examples(tmp_path / "ex.jsonl",
                              overfit_checkpoint.task.examples)
    for method in ("beam", "fixer"):
        trace_path = tmp_path / f"{method}.jsonl"
        code = main(["synth", "--checkpoint", str(overfit_checkpoint.path),
                     "--examples", examples, "--method", method,
                     "--steps", "2", "--trace", str(trace_path)])
        assert code == 0
        records = [json.loads(line) for line in
                   trace_path.read_text().splitlines()]
        assert len(records) <= 2


def test_synth_unsolvable_exits_1(overfit_checkpoint, tmp_path, capsys):
    # The overfit model knows exactly one program; alien examples stay
    # unsolved within a 2-candidate budget.
    examples = write_examples(tmp_path / "ex.jsonl",
                              [("qqq", "zzz"), ("a b", "XXL")])
    code = main(["synth", "--checkpoint", str(overfit_checkpoint.path),
                 "--examples", examples, "--steps", "2"])
    assert code == 1
    assert "no program found" in capsys.readouterr().err


def test_synth_bad_checkpoint_exits_2(tmp_path, capsys):
    code = main(["synth", "--checkpoint", str(tmp_path / "nope"),
                 "--examples", str(tmp_path / "nope.jsonl")])
    assert code == 2
    assert "cannot load checkpoint" in capsys.readouterr().err


def test_synth_malformed_examples_exits_2(overfit_checkpoint, tmp_path,
                                          capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"i": "x"}\n')
    code = main(["synth", "--checkpoint", str(overfit_checkpoint.path),
                 "--examples", str(bad)])
    assert code == 2
    assert "'i' and 'o'" in capsys.readouterr().err


def test_read_examples_rejects_empty(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("\n")
    with pytest.raises(ValueError, match="no example pairs"):
        read_examples(str(empty))


# ---------------------------------------------------------------------------
# gen


def test_gen_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    argv = ["gen", "--seed", "1", "--count", "10", "--max-expressions", "2",
            "--max-io-len", "20"]
    assert main(argv + ["--out", str(a)]) == 0
    assert main(argv + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 10


def test_gen_workers_do_not_change_bytes(tmp_path):
    one, four = tmp_path / "w1.jsonl", tmp_path / "w4.jsonl"
    base = ["gen", "--seed", "3", "--count", "8", "--max-expressions", "2",
            "--max-io-len", "20"]
    assert main(base + ["--out", str(one), "--workers", "1"]) == 0
    assert main(base + ["--out", str(four), "--workers", "4"]) == 0
    assert one.read_bytes() == four.read_bytes()


def test_gen_corpus_round_trips(tmp_path):
    out = tmp_path / "corpus.jsonl"
    assert main(["gen", "--seed", "2", "--count", "5", "--max-expressions",
                 "2", "--max-io-len", "20", "--out", str(out)]) == 0
    from pbefix.dsl import execute
    from pbefix.taskgen import read_corpus
    for task in read_corpus(str(out)):
        for i, o in task.examples:
            assert execute(task.program, i) == o


# ---------------------------------------------------------------------------
# train / eval / analyze round trip


@pytest.fixture(scope="module")
def tiny_train_run(tmp_path_factory):
    """A 4-step CLI training run reused by eval/analyze tests."""
    root = tmp_path_factory.mktemp("cli-train")
    config = {
        "batch_size": 2, "steps": 4, "eval_every": 4, "eval_tasks": 3,
        "seed": 0, "lr": 0.001, "clip_norm": 5.0,
        "model": {"hidden": 8, "e_char": 4, "e_tok": 4, "t_max": 16,
                  "io_width": 12},
        "gen": {"max_expressions": 1, "max_io_len": 12, "seed": 5},
        "search": {"s": 2, "inner_beam": 2},
    }
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config))
    out_dir = root / "out"
    code = main(["train", "--config", str(config_path),
                 "--out", str(out_dir)])
    assert code == 0
    return root, config_path, out_dir


def test_train_writes_checkpoint_and_metrics(tiny_train_run, capsys):
    _, _, out_dir = tiny_train_run
    assert (out_dir / "checkpoint" / "manifest.json").is_file()
    assert (out_dir / "checkpoint" / "params.bin").is_file()
    metrics = [json.loads(line) for line in
               (out_dir / "metrics.jsonl").read_text().splitlines()]
    assert [m["step"] for m in metrics] == [4]


def test_train_resume_continues_from_rolling_checkpoint(tiny_train_run,
                                                        tmp_path, capsys):
    root, config_path, _ = tiny_train_run
    half_dir = tmp_path / "half"
    assert main(["train", "--config", str(config_path), "--out",
                 str(half_dir), "--checkpoint-every", "2"]) == 0
    capsys.readouterr()
    # the rolling checkpoint is at the final step; extend the run from it
    import json as _json
    extended = _json.loads(config_path.read_text())
    extended["steps"] = 6
    ext_path = tmp_path / "extended.json"
    ext_path.write_text(_json.dumps(extended))
    assert main(["train", "--config", str(ext_path),
                 "--out", str(tmp_path / "more"),
                 "--resume", str(half_dir / "checkpoint-latest")]) == 0
    from pbefix.train import load_checkpoint
    assert load_checkpoint(tmp_path / "more" / "checkpoint").step == 6


def test_train_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"steps": 0}')
    assert main(["train", "--config", str(bad),
                 "--out", str(tmp_path / "o")]) == 2
    assert "bad config" in capsys.readouterr().err


def test_eval_prints_accuracy_json(tiny_train_run, tmp_path, capsys):
    _, _, out_dir = tiny_train_run
    traces_path = tmp_path / "traces.jsonl"
    code = main(["eval", "--checkpoint", str(out_dir / "checkpoint"),
                 "--method", "fixer", "--steps", "2", "--count", "3",
                 "--traces", str(traces_path)])
    assert code == 0
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert 0.0 <= report["accuracy"] <= 1.0
    assert report["total"] == 3
    assert report["method"] == "fixer"
    records = [json.loads(line) for line in
               traces_path.read_text().splitlines()]
    assert all(r["method"] == "fixer" for r in records)


def test_eval_workers_match_single_worker(tiny_train_run, capsys):
    _, _, out_dir = tiny_train_run
    argv = ["eval", "--checkpoint", str(out_dir / "checkpoint"),
            "--method", "greedy", "--count", "4"]
    assert main(argv + ["--workers", "1"]) == 0
    one = capsys.readouterr().out.strip().splitlines()[-1]
    assert main(argv + ["--workers", "3"]) == 0
    three = capsys.readouterr().out.strip().splitlines()[-1]
    assert json.loads(one) == json.loads(three)


def test_analyze_writes_report(tiny_train_run, tmp_path, capsys):
    _, _, out_dir = tiny_train_run
    traces_path = tmp_path / "traces.jsonl"
    assert main(["eval", "--checkpoint", str(out_dir / "checkpoint"),
                 "--method", "fixer", "--count", "3",
                 "--traces", str(traces_path)]) == 0
    capsys.readouterr()
    report_dir = tmp_path / "report"
    code = main(["analyze", "--traces", str(traces_path),
                 "--report", str(report_dir)])
    assert code == 0
    assert "step-2 corrections" in capsys.readouterr().out
    assert (report_dir / "step2_summary.txt").is_file()
    assert (report_dir / "step2_fixer_initial_length.csv").is_file()


def test_analyze_rejects_untagged_file(tmp_path, capsys):
    bad = tmp_path / "untagged.jsonl"
    bad.write_text(json.dumps({"task": 0, "step": 1, "tokens": [2],
                               "program": None, "outputs": [None],
                               "matched": False, "solved": False}) + "\n")
    code = main(["analyze", "--traces", str(bad),
                 "--report", str(tmp_path / "r")])
    assert code == 2
    assert "method" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_battery_passes_default_tolerance(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "task_loss" in out and "FAIL" not in out


def test_gradcheck_fails_on_absurd_tolerance(capsys):
    assert main(["gradcheck", "--tolerance", "1e-18"]) == 1
    captured = capsys.readouterr()
    assert "FAIL" in captured.out
    assert "exceeded tolerance" in captured.err


def test_gradcheck_battery_covers_all_ops():
    names = [name for name, _ in gradcheck_battery(seed=0)]
    for op in ("matmul", "add_bias", "add", "add_n", "mul_const", "relu",
               "tanh", "sigmoid", "concat", "reshape", "take_time",
               "embedding_lookup", "maxpool_over_set", "lstm_cell_pre",
               "lstm_cell", "softmax_xent", "sum_all", "task_loss"):
        assert op in names, op
