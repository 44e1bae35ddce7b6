"""Post-hoc analyses over solver traces.

Two studies live here. `accuracy_by_length` buckets a corpus evaluation by
ground-truth program length. The step-2 correction study looks at tasks whose
first candidate was wrong and whose second candidate solved the task, and
asks what the second program changed about the first: how long the first
program was, how many expressions changed, and how far from the end the
earliest change sat. Changes are measured by `expr_diff`, a minimal
expression-level edit script (Wagner-Fischer over the expression lists with
unit costs and a fixed backtrace preference, so histograms are reproducible).

Everything downstream of `run_method` is pure post-processing over FixTraces;
`write_method_traces`/`read_method_traces` wrap the trace JSONL format with a
method tag so one file can carry several methods' traces.
"""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO, Union

from .dsl import Expression, Program, parse, program_length
from .model import ModelConfig
from .search import FixTrace, SearchConfig, read_traces, trace_records
from .taskgen import Task
from .train import EvalReport, evaluate, run_method

# ---------------------------------------------------------------------------
# Expression-level edit scripts


@dataclass(frozen=True)
class Substitute:
    """Replace the expression at an index of the initial program."""

    initial_index: int
    new_expr: Expression


@dataclass(frozen=True)
class Delete:
    """Drop the expression at an index of the initial program."""

    initial_index: int


@dataclass(frozen=True)
class Insert:
    """Add an expression after an index of the initial program (-1 = front)."""

    after_initial_index: int
    new_expr: Expression


Edit = Union[Substitute, Delete, Insert]


@dataclass(frozen=True)
class ExprEditScript:
    """Minimal unit-cost edits turning one expression list into another.

    All indices refer to positions in the *initial* program's expression
    list; edits are ordered left to right along that list.
    """

    edits: tuple[Edit, ...]


def expr_diff(initial: Program, corrected: Program) -> ExprEditScript:
    """Minimal expression-level edit script from `initial` to `corrected`.

    Wagner-Fischer alignment with unit costs and structural expression
    equality. The backtrace is deterministic: at equal cost it prefers
    match > substitute > delete > insert, walking from the ends of both
    lists, so equal inputs always yield the identical script.
    """
    a = initial.expressions
    b = corrected.expressions
    n, m = len(a), len(b)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dist[i][0] = i
    for j in range(m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            same = a[i - 1] == b[j - 1]
            dist[i][j] = min(
                dist[i - 1][j - 1] + (0 if same else 1),
                dist[i - 1][j] + 1,
                dist[i][j - 1] + 1,
            )
    edits: list[Edit] = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and a[i - 1] == b[j - 1] \
                and dist[i][j] == dist[i - 1][j - 1]:
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + 1:
            edits.append(Substitute(i - 1, b[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and dist[i][j] == dist[i - 1][j] + 1:
            edits.append(Delete(i - 1))
            i = i - 1
        else:
            edits.append(Insert(i - 1, b[j - 1]))
            j = j - 1
    edits.reverse()
    return ExprEditScript(tuple(edits))


def apply_script(initial: Program, script: ExprEditScript) -> Program:
    """Replay an edit script against the initial expression list."""
    subs = {e.initial_index: e.new_expr for e in script.edits
            if isinstance(e, Substitute)}
    dels = {e.initial_index for e in script.edits if isinstance(e, Delete)}
    inserts: dict[int, list[Expression]] = {}
    for e in script.edits:
        if isinstance(e, Insert):
            inserts.setdefault(e.after_initial_index, []).append(e.new_expr)
    out: list[Expression] = list(inserts.get(-1, []))
    for k, expr in enumerate(initial.expressions):
        if k in dels:
            pass
        elif k in subs:
            out.append(subs[k])
        else:
            out.append(expr)
        out.extend(inserts.get(k, []))
    return Program(tuple(out))


def expressions_changed(script: ExprEditScript) -> int:
    """Total edit count: every substitute, delete, and insert is one change."""
    return len(script.edits)


def furthest_distance_from_end(script: ExprEditScript,
                               initial_length: int) -> int:
    """How deep into the initial program the earliest in-place edit reaches.

    Measured as max(initial_length - initial_index) over substitutes and
    deletes: 1 means only the last expression was touched, initial_length
    means the first was. Insert-only (and empty) scripts score 0 — adding
    expressions never disturbs an existing position.
    """
    distances = [initial_length - e.initial_index for e in script.edits
                 if isinstance(e, (Substitute, Delete))]
    return max(distances, default=0)


# ---------------------------------------------------------------------------
# Step-2 correction study


@dataclass(frozen=True)
class Step2Record:
    """One task whose second candidate fixed a wrong first candidate."""

    method: str
    initial: Program
    corrected: Program
    initial_length: int
    expressions_changed: int
    furthest_distance_from_end: int


def make_step2_record(method: str, initial: Program,
                      corrected: Program) -> Step2Record:
    script = expr_diff(initial, corrected)
    length = program_length(initial)
    return Step2Record(
        method=method,
        initial=initial,
        corrected=corrected,
        initial_length=length,
        expressions_changed=expressions_changed(script),
        furthest_distance_from_end=furthest_distance_from_end(script, length),
    )


HIST_FIELDS = ("initial_length", "expressions_changed",
               "furthest_distance_from_end")


@dataclass
class Step2Study:
    """Per-method step-2 correction records plus undecodable-step tallies.

    Corrections whose first candidate failed token decoding have no initial
    program to diff against; they are counted in `undecodable` and excluded
    from the records (and therefore from every histogram).
    """

    records: dict[str, list[Step2Record]]
    undecodable: dict[str, int]

    @property
    def methods(self) -> tuple[str, ...]:
        return tuple(sorted(self.records))

    def corrections(self, method: str) -> int:
        return len(self.records[method])

    def histogram(self, method: str, field: str) -> dict[int, int]:
        """Counts of one Step2Record field; sums to corrections(method)."""
        if field not in HIST_FIELDS:
            raise ValueError(f"unknown histogram field {field!r}")
        counts = Counter(getattr(r, field) for r in self.records[method])
        return dict(sorted(counts.items()))


def normalized(hist: Mapping[int, int]) -> dict[int, float]:
    """The same histogram as fractions of its total (empty stays empty)."""
    total = sum(hist.values())
    if total == 0:
        return {}
    return {value: count / total for value, count in hist.items()}


def step2_from_traces(
        traces_by_method: Mapping[str, Sequence[FixTrace]]) -> Step2Study:
    """Select step-2 corrections (step 1 wrong, step 2 solved) per method."""
    records: dict[str, list[Step2Record]] = {}
    undecodable: dict[str, int] = {}
    for method, traces in traces_by_method.items():
        recs: list[Step2Record] = []
        undec = 0
        for trace in traces:
            if trace.solved_at != 2:
                continue
            first = trace.steps[0].program
            if first is None:
                undec += 1
                continue
            second = trace.steps[1].program
            recs.append(make_step2_record(method, parse(first), parse(second)))
        records[method] = recs
        undecodable[method] = undec
    return Step2Study(records, undecodable)


def step2_study(store, model: ModelConfig, corpus: Sequence[Task],
                search: SearchConfig,
                methods: Sequence[str] = ("beam", "fixer")) -> Step2Study:
    """Run each method over the corpus and study its step-2 corrections."""
    return step2_from_traces({
        method: run_method(store, model, corpus, search, method)
        for method in methods
    })


# ---------------------------------------------------------------------------
# Accuracy by ground-truth program length


@dataclass(frozen=True)
class LengthAccuracy:
    """Solve rate within one ground-truth program-length bucket."""

    length: int
    solved: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.solved / self.total


def length_table(report: EvalReport) -> list[LengthAccuracy]:
    """Per-length rows from an evaluation, lengths absent from the corpus
    are omitted rather than reported as zero."""
    return [LengthAccuracy(length, solved, total)
            for length, (solved, total) in sorted(report.by_length.items())]


def accuracy_by_length(store, model: ModelConfig, corpus: Sequence[Task],
                       search: SearchConfig,
                       method: str) -> list[LengthAccuracy]:
    """Evaluate one method over the corpus, bucketed by program length."""
    return length_table(evaluate(store, model, corpus, search, method))


# ---------------------------------------------------------------------------
# Method-tagged trace files (JSONL, superset of the plain trace format)


def write_method_traces(fp: TextIO, method: str,
                        traces: Iterable[FixTrace]) -> None:
    for task_id, trace in enumerate(traces):
        for record in trace_records(trace, task_id):
            record["method"] = method
            fp.write(json.dumps(record, ensure_ascii=True) + "\n")


def read_method_traces(fp: TextIO) -> dict[str, list[FixTrace]]:
    """Group a method-tagged trace file back into per-method FixTraces."""
    by_method: dict[str, list[str]] = {}
    for line in fp:
        line = line.strip()
        if not line:
            continue
        record = json.loads(line)
        if "method" not in record:
            raise ValueError("trace record missing 'method' tag; "
                             "was this file written by write_method_traces?")
        by_method.setdefault(record["method"], []).append(line)
    return {method: read_traces(io.StringIO("\n".join(lines)))
            for method, lines in by_method.items()}


# ---------------------------------------------------------------------------
# Reports: text tables plus plot-ready CSV


def _hist_rows(hist: Mapping[int, int]) -> list[tuple[int, int, float]]:
    fractions = normalized(hist)
    return [(value, count, fractions[value])
            for value, count in sorted(hist.items())]


def format_step2_report(study: Step2Study) -> str:
    lines = ["step-2 corrections (step 1 wrong, step 2 solved)", ""]
    header = f"{'method':<8} {'corrections':>11} {'undecodable':>11}"
    lines += [header, "-" * len(header)]
    for method in study.methods:
        lines.append(f"{method:<8} {study.corrections(method):>11d} "
                     f"{study.undecodable[method]:>11d}")
    for method in study.methods:
        for field in HIST_FIELDS:
            lines += ["", f"[{method}] {field.replace('_', ' ')}"]
            lines.append(f"{'value':>5} {'count':>5} {'fraction':>8}")
            for value, count, frac in _hist_rows(study.histogram(method,
                                                                 field)):
                lines.append(f"{value:>5d} {count:>5d} {frac:>8.3f}")
    return "\n".join(lines) + "\n"


def write_step2_report(study: Step2Study, out_dir: Union[str, Path]
                       ) -> list[Path]:
    """One CSV per method and histogram, plus a plain-text summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for method in study.methods:
        for field in HIST_FIELDS:
            path = out_dir / f"step2_{method}_{field}.csv"
            with open(path, "w", newline="") as fp:
                writer = csv.writer(fp)
                writer.writerow(["value", "count", "fraction"])
                for value, count, frac in _hist_rows(
                        study.histogram(method, field)):
                    writer.writerow([value, count, f"{frac:.6f}"])
            written.append(path)
    summary = out_dir / "step2_summary.txt"
    summary.write_text(format_step2_report(study))
    written.append(summary)
    return written


def format_length_table(method: str, rows: Sequence[LengthAccuracy]) -> str:
    lines = [f"[{method}] accuracy by ground-truth program length",
             f"{'length':>6} {'solved':>6} {'total':>6} {'accuracy':>8}"]
    for row in rows:
        lines.append(f"{row.length:>6d} {row.solved:>6d} {row.total:>6d} "
                     f"{row.accuracy:>8.3f}")
    return "\n".join(lines) + "\n"


def write_length_report(method: str, rows: Sequence[LengthAccuracy],
                        out_dir: Union[str, Path]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"accuracy_by_length_{method}.csv"
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["length", "solved", "total", "accuracy"])
        for row in rows:
            writer.writerow([row.length, row.solved, row.total,
                             f"{row.accuracy:.6f}"])
    return path
