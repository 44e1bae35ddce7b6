"""Inference-time search: beam baseline and iterative fixer.

Both procedures share one budget: at most S candidate programs are executed
per task. The beam baseline decodes S candidates up front from the first
encoding and tries them best-first. The fixer search decodes one greedy
candidate, and while it mismatches, re-encodes the examples with that
candidate's executed outputs and asks an inner beam for the best sequence
not proposed before.

`beam_search` itself is generic over a step function so tests can drive it
with hand-built distributions; sequences still alive at t_max are returned
unfinished (no EOS), which keeps width-1 beam literally identical to greedy
decoding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence, TextIO, Union

import numpy as np

from .autodiff import Tensor
from .dsl import ExecError, execute, render
from .model import (
    ModelConfig,
    decoder_start,
    decoder_step,
    encode,
    param_arrays,
)
from .vocab import (
    BOS_ID,
    EOS_ID,
    ExecMarker,
    TokenDecodeError,
    encode_example_set,
    tokens_to_program,
)

TokenSeq = tuple[int, ...]
ScoredSeq = tuple[TokenSeq, float]
StepFn = Callable[[object, np.ndarray], tuple[np.ndarray, object]]


@dataclass(frozen=True)
class SearchConfig:
    """Budget and beam widths shared by both procedures."""

    s: int = 10
    inner_beam: int = 10
    t_max: int | None = None  # None: use the model config's t_max

    def __post_init__(self) -> None:
        if self.s < 1:
            raise ValueError("s must be at least 1")
        if self.inner_beam < 1:
            raise ValueError("inner_beam must be at least 1")


# ---------------------------------------------------------------------------
# Generic beam search


def beam_search(step_fn: StepFn, initial_state, width: int, t_max: int,
                start_id: int = BOS_ID,
                eos_id: int = EOS_ID) -> list[ScoredSeq]:
    """Top-`width` decoded sequences, sorted by (log-prob desc, tokens lex).

    `step_fn(state, last_tokens)` returns (log-probs (W, V), next state) and
    the state must support `.select(row_indices)`. A sequence retires to the
    finished pool when it emits `eos_id`; anything still alive after `t_max`
    steps retires as-is. Ties in log-prob break lexicographically on the
    token sequence, which makes results fully deterministic. One exception
    at the per-step width boundary: an expansion that retires on `eos_id`
    outranks an alive expansion with the exact same score, because its score
    is final while the alive one's continuations can only decay — dropping
    the finished sequence there could exclude a true top-`width` result.
    """
    if width < 1:
        raise ValueError("width must be at least 1")
    live_seqs: list[TokenSeq] = [()]
    live_scores = np.zeros(1, dtype=np.float64)
    live_last = np.array([start_id], dtype=np.int64)
    state = initial_state
    finished: list[ScoredSeq] = []

    def kth_finished_score() -> float:
        scores = sorted((s for _, s in finished), reverse=True)
        return scores[width - 1]

    for _ in range(t_max):
        if not live_seqs:
            break
        if len(finished) >= width and live_scores.max() < kth_finished_score():
            break  # scores only decrease with length; no live beam can place
        logprobs, state = step_fn(state, live_last)
        totals = live_scores[:, None] + logprobs
        flat = totals.ravel()
        vocab = totals.shape[1]
        if flat.size > width:
            kth = np.partition(flat, flat.size - width)[flat.size - width]
            pool = np.flatnonzero(flat >= kth)
        else:
            pool = np.arange(flat.size)
        entries = []
        for j in pool:
            parent, tok = divmod(int(j), vocab)
            entries.append((-flat[j], tok != eos_id,
                            live_seqs[parent] + (int(tok),),
                            parent, int(tok)))
        entries.sort(key=lambda e: (e[0], e[1], e[2]))
        next_seqs: list[TokenSeq] = []
        next_parents: list[int] = []
        next_last: list[int] = []
        next_scores: list[float] = []
        for neg_score, _, seq, parent, tok in entries[:width]:
            if tok == eos_id:
                finished.append((seq, float(-neg_score)))
            else:
                next_seqs.append(seq)
                next_parents.append(parent)
                next_last.append(tok)
                next_scores.append(-neg_score)
        live_seqs = next_seqs
        live_scores = np.array(next_scores, dtype=np.float64)
        live_last = np.array(next_last, dtype=np.int64)
        if next_parents:
            state = state.select(np.array(next_parents))
    finished.extend(zip(live_seqs, live_scores.tolist()))  # truncated, no EOS
    finished.sort(key=lambda e: (-e[1], e[0]))
    return finished[:width]


def synth_beam(params: Mapping[str, Tensor], config: ModelConfig,
               z: np.ndarray, width: int,
               t_max: int | None = None) -> list[ScoredSeq]:
    """Beam-search program token sequences from a (1, hidden) task vector."""
    arrays = param_arrays(params)

    def step(state, last):
        return decoder_step(arrays, state, last)

    z = z.data if isinstance(z, Tensor) else np.asarray(z)
    return beam_search(step, decoder_start(z), width,
                       config.t_max if t_max is None else t_max)


# ---------------------------------------------------------------------------
# Candidate evaluation and traces


@dataclass(frozen=True)
class CandidateStep:
    """One executed candidate: tokens, decoded text, per-example outcome."""

    tokens: TokenSeq
    program: str | None                  # rendered, or None on decode error
    outputs: tuple[str | None, ...]      # None where execution failed
    matched: bool


@dataclass(frozen=True)
class FixTrace:
    """Ordered candidate executions for one task, within budget S."""

    steps: tuple[CandidateStep, ...]
    solved: bool

    @property
    def solved_at(self) -> int | None:
        """1-based index of the matching step, None if exhausted."""
        for i, step in enumerate(self.steps, start=1):
            if step.matched:
                return i
        return None


def evaluate_candidate(tokens: Sequence[int],
                       examples: Sequence[tuple[str, str]]) -> CandidateStep:
    """Decode + execute one candidate and compare outputs exactly."""
    tokens = tuple(int(t) for t in tokens)
    try:
        program = tokens_to_program(tokens)
    except TokenDecodeError:
        return CandidateStep(tokens, None, (None,) * len(examples), False)
    outputs: list[str | None] = []
    matched = True
    for inp, want in examples:
        try:
            got = execute(program, inp)
        except ExecError:
            got = None
        outputs.append(got)
        matched = matched and got == want
    return CandidateStep(tokens, render(program), tuple(outputs), matched)


def _exec_outs_for_encoding(step: CandidateStep,
                            io_width: int) -> list[Union[str, ExecMarker]]:
    if step.program is None:
        return [ExecMarker.FAIL] * len(step.outputs)
    return [ExecMarker.FAIL if out is None else out[:io_width]
            for out in step.outputs]


def _encode_examples(params: Mapping[str, Tensor], config: ModelConfig,
                     examples: Sequence[tuple[str, str]],
                     exec_outs=None) -> np.ndarray:
    trip = encode_example_set(examples, exec_outs, width=config.io_width)
    return encode(params, config, trip).data


# ---------------------------------------------------------------------------
# Search procedures


def run_beam_baseline(params: Mapping[str, Tensor], config: ModelConfig,
                      examples: Sequence[tuple[str, str]],
                      search: SearchConfig) -> FixTrace:
    """Decode S candidates up front, execute best-first, stop on a match."""
    t_max = search.t_max if search.t_max is not None else config.t_max
    z = _encode_examples(params, config, examples)
    candidates = synth_beam(params, config, z, search.s, t_max)
    steps: list[CandidateStep] = []
    for seq, _ in candidates[:search.s]:
        step = evaluate_candidate(seq, examples)
        steps.append(step)
        if step.matched:
            break
    return FixTrace(tuple(steps), any(s.matched for s in steps))


def run_fixer_search(params: Mapping[str, Tensor], config: ModelConfig,
                     examples: Sequence[tuple[str, str]],
                     search: SearchConfig) -> FixTrace:
    """Greedy first guess, then repeatedly re-encode with the latest
    candidate's executed outputs and take the best not-yet-proposed sequence
    from an inner beam (widened once if everything was already proposed)."""
    t_max = search.t_max if search.t_max is not None else config.t_max
    z = _encode_examples(params, config, examples)
    first = beam_width_one(params, config, z, t_max)
    steps = [evaluate_candidate(first, examples)]
    seen = {steps[0].tokens}
    while not steps[-1].matched and len(steps) < search.s:
        exec_outs = _exec_outs_for_encoding(steps[-1], config.io_width)
        z_fix = _encode_examples(params, config, examples, exec_outs)
        novel = None
        for width in (search.inner_beam, search.inner_beam * 2):
            for seq, _ in synth_beam(params, config, z_fix, width, t_max):
                if seq not in seen:
                    novel = seq
                    break
            if novel is not None:
                break
        if novel is None:
            break  # even the widened beam had no new sequence
        step = evaluate_candidate(novel, examples)
        steps.append(step)
        seen.add(step.tokens)
    return FixTrace(tuple(steps), any(s.matched for s in steps))


def beam_width_one(params: Mapping[str, Tensor], config: ModelConfig,
                   z: np.ndarray, t_max: int | None = None) -> TokenSeq:
    """Greedy decode via the beam machinery (identical result, one path)."""
    return synth_beam(params, config, z, 1, t_max)[0][0]


# ---------------------------------------------------------------------------
# Trace serialization (JSONL, one record per step)


def trace_records(trace: FixTrace, task_id: int) -> list[dict]:
    return [
        {
            "task": task_id,
            "step": i,
            "tokens": list(step.tokens),
            "program": step.program,
            "outputs": list(step.outputs),
            "matched": step.matched,
            "solved": trace.solved,
        }
        for i, step in enumerate(trace.steps, start=1)
    ]


def write_traces(fp: TextIO, traces: Iterable[FixTrace]) -> None:
    for task_id, trace in enumerate(traces):
        for record in trace_records(trace, task_id):
            fp.write(json.dumps(record, ensure_ascii=True) + "\n")


def read_traces(fp: TextIO) -> list[FixTrace]:
    """Rebuild per-task traces from a JSONL trace file."""
    by_task: dict[int, list[dict]] = {}
    for line in fp:
        line = line.strip()
        if not line:
            continue
        record = json.loads(line)
        by_task.setdefault(record["task"], []).append(record)
    traces = []
    for task_id in sorted(by_task):
        records = sorted(by_task[task_id], key=lambda r: r["step"])
        steps = tuple(
            CandidateStep(tuple(r["tokens"]), r["program"],
                          tuple(r["outputs"]), r["matched"])
            for r in records)
        traces.append(FixTrace(steps, any(s.matched for s in steps)))
    return traces
