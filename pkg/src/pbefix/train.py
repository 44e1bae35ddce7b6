"""Training loop, checkpointing, and evaluation.

Every optimizer step consumes a batch of brand-new tasks (a monotone task
counter indexes into the derived "train" seed stream, so no task is ever
seen twice). Held-out evaluation draws from the disjoint "eval" stream.

Checkpoints are directories: a canonical-JSON manifest (configs, vocab
listing, counters) next to raw little-endian tensor blobs ordered
lexicographically by parameter name, plus the Adam moments. Loading one and
continuing produces the bitwise-identical trajectory of an uninterrupted
run.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, TextIO

import numpy as np

from .autodiff import ParamStore, Tape, adam_step
from .dsl import program_length
from .model import (
    ModelConfig,
    batch_task_loss,
    decode_greedy,
    encode_batch,
    init_params,
    param_shapes,
)
from .search import (
    FixTrace,
    SearchConfig,
    evaluate_candidate,
    run_beam_baseline,
    run_fixer_search,
)
from .taskgen import GenConfig, Task, generate_tasks
from .vocab import CHAR_STRINGS, TOKEN_STRINGS, encode_example_set


class CheckpointError(ValueError):
    """Checkpoint directory does not match this build's expectations."""


class TrainingDiverged(RuntimeError):
    """Raised after too many consecutive non-finite losses."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    steps: int = 50_000
    eval_every: int = 2_500
    eval_tasks: int = 200
    seed: int = 0
    lr: float = 1e-3
    lr_final: float | None = None  # cosine-anneal to this; None = constant
    clip_norm: float = 5.0
    model: ModelConfig = field(default_factory=ModelConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    search: SearchConfig = field(default_factory=SearchConfig)

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")
        if self.eval_tasks < 1:
            raise ValueError("eval_tasks must be at least 1")
        if self.lr_final is not None and not 0 <= self.lr_final <= self.lr:
            raise ValueError("lr_final must lie in [0, lr]")


def lr_at(config: TrainConfig, step: int) -> float:
    """Learning rate for the update at 0-based `step`; a pure function of
    the step index so resumed runs stay bit-exact."""
    if config.lr_final is None:
        return config.lr
    progress = step / config.steps
    return config.lr_final + (config.lr - config.lr_final) * 0.5 * (
        1.0 + math.cos(math.pi * progress))


def train_config_to_dict(config: TrainConfig) -> dict:
    return dataclasses.asdict(config)


def train_config_from_dict(raw: dict) -> TrainConfig:
    data = dict(raw)
    for key, cls in (("model", ModelConfig), ("gen", GenConfig),
                     ("search", SearchConfig)):
        if key in data and isinstance(data[key], dict):
            sub = dict(data[key])
            if cls is GenConfig and sub.get("length_distribution") is not None:
                sub["length_distribution"] = tuple(sub["length_distribution"])
            data[key] = cls(**sub)
    return TrainConfig(**data)


@dataclass
class TrainState:
    config: TrainConfig
    store: ParamStore
    step: int = 0            # optimizer steps completed
    task_counter: int = 0    # fresh tasks consumed from the train stream
    skip_streak: int = 0


def init_state(config: TrainConfig) -> TrainState:
    return TrainState(config, init_params(config.model, seed=config.seed))


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class EvalReport:
    method: str
    total: int
    solved: int
    by_length: dict[int, tuple[int, int]]  # length -> (solved, total)
    mean_steps: float | None               # over solved tasks

    @property
    def accuracy(self) -> float:
        return self.solved / self.total if self.total else 0.0


def _greedy_traces(store: ParamStore, model: ModelConfig,
                   tasks: Sequence[Task]) -> list[FixTrace]:
    params = store.tensors(None)
    trip = np.stack([
        encode_example_set(t.examples, width=model.io_width) for t in tasks])
    z = encode_batch(params, model, trip)
    seqs, _ = decode_greedy(params, model, z.data)
    traces = []
    for seq, task in zip(seqs, tasks):
        step = evaluate_candidate(seq, task.examples)
        traces.append(FixTrace((step,), step.matched))
    return traces


def run_method(store: ParamStore, model: ModelConfig, tasks: Sequence[Task],
               search: SearchConfig, method: str) -> list[FixTrace]:
    """Per-task traces under one search procedure."""
    if method == "greedy":
        return _greedy_traces(store, model, tasks)
    params = store.tensors(None)
    if method == "beam":
        return [run_beam_baseline(params, model, t.examples, search)
                for t in tasks]
    if method == "fixer":
        return [run_fixer_search(params, model, t.examples, search)
                for t in tasks]
    raise ValueError(f"unknown method {method!r}")


def summarize(method: str, tasks: Sequence[Task],
              traces: Sequence[FixTrace]) -> EvalReport:
    by_length: dict[int, list[int]] = {}
    steps_to_solve = []
    solved = 0
    for task, trace in zip(tasks, traces):
        length = program_length(task.program)
        bucket = by_length.setdefault(length, [0, 0])
        bucket[1] += 1
        if trace.solved:
            bucket[0] += 1
            solved += 1
            steps_to_solve.append(trace.solved_at)
    mean_steps = (sum(steps_to_solve) / len(steps_to_solve)
                  if steps_to_solve else None)
    return EvalReport(method, len(tasks), solved,
                      {k: tuple(v) for k, v in sorted(by_length.items())},
                      mean_steps)


def evaluate(store: ParamStore, model: ModelConfig, tasks: Sequence[Task],
             search: SearchConfig, method: str) -> EvalReport:
    """Solve rate (exact output match on all examples) plus breakdowns."""
    return summarize(method, tasks, run_method(store, model, tasks, search,
                                               method))


def eval_corpus(config: TrainConfig, count: int | None = None) -> list[Task]:
    """The held-out tasks: the eval stream is disjoint from training."""
    n = config.eval_tasks if count is None else count
    return generate_tasks(config.gen, n, domain="eval", start=0)


# ---------------------------------------------------------------------------
# Checkpoints

_MANIFEST = "manifest.json"
_PARAMS = "params.bin"
_OPT = "opt.bin"


def _blob(arrays: Sequence[np.ndarray]) -> bytes:
    out = bytearray()
    for arr in arrays:
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        out.extend(le.tobytes(order="C"))
    return bytes(out)


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    store = state.store
    names = store.names()
    manifest = {
        "format": "pbefix-checkpoint",
        "version": 1,
        "config": train_config_to_dict(state.config),
        "step": state.step,
        "task_counter": state.task_counter,
        "skip_streak": state.skip_streak,
        "adam_step_count": store.step_count,
        "token_vocab": list(TOKEN_STRINGS),
        "char_vocab": list(CHAR_STRINGS),
        "params": [
            {"name": n, "shape": list(store[n].shape),
             "dtype": store[n].dtype.name}
            for n in names
        ],
    }
    (path / _MANIFEST).write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    (path / _PARAMS).write_bytes(_blob([store[n] for n in names]))
    (path / _OPT).write_bytes(
        _blob([store.m[n] for n in names] + [store.v[n] for n in names]))


def _check_vocab(kind: str, saved: list[str], current: tuple[str, ...]) -> None:
    if len(saved) != len(current):
        raise CheckpointError(
            f"{kind} vocab size mismatch: checkpoint has {len(saved)}, "
            f"this build has {len(current)}")
    for i, (a, b) in enumerate(zip(saved, current)):
        if a != b:
            raise CheckpointError(
                f"{kind} vocab mismatch at id {i}: "
                f"checkpoint {a!r} != current {b!r}")


def _read_blob(buf: bytes, specs: list[tuple[tuple[int, ...], np.dtype]],
               what: str) -> list[np.ndarray]:
    arrays = []
    offset = 0
    for shape, dtype in specs:
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        chunk = buf[offset:offset + size]
        if len(chunk) != size:
            raise CheckpointError(f"{what} is truncated")
        arrays.append(np.frombuffer(chunk, dtype=dtype).reshape(shape).copy())
        offset += size
    if offset != len(buf):
        raise CheckpointError(
            f"{what} has {len(buf) - offset} trailing bytes")
    return arrays


def load_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    manifest = json.loads((path / _MANIFEST).read_text())
    if manifest.get("format") != "pbefix-checkpoint":
        raise CheckpointError("not a checkpoint manifest")
    _check_vocab("token", manifest["token_vocab"], TOKEN_STRINGS)
    _check_vocab("char", manifest["char_vocab"], CHAR_STRINGS)
    config = train_config_from_dict(manifest["config"])
    expected = {p["name"]: tuple(p["shape"]) for p in manifest["params"]}
    declared = param_shapes(config.model)
    if set(expected) != set(declared):
        missing = sorted(set(declared) ^ set(expected))
        raise CheckpointError(f"parameter set mismatch: {missing[0]!r}")
    for name, shape in declared.items():
        if expected[name] != shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {expected[name]} "
                f"!= config {shape}")
    specs = [(tuple(p["shape"]), np.dtype(p["dtype"]).newbyteorder("<"))
             for p in manifest["params"]]
    params = _read_blob((path / _PARAMS).read_bytes(), specs, "params.bin")
    moments = _read_blob((path / _OPT).read_bytes(), specs + specs, "opt.bin")
    store = ParamStore()
    names = [p["name"] for p in manifest["params"]]
    for name, arr in zip(names, params):
        store.add(name, np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("=")))
    for name, arr in zip(names, moments[:len(names)]):
        store.m[name] = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("="))
    for name, arr in zip(names, moments[len(names):]):
        store.v[name] = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("="))
    store.step_count = manifest["adam_step_count"]
    return TrainState(config, store, manifest["step"],
                      manifest["task_counter"], manifest["skip_streak"])


# ---------------------------------------------------------------------------
# The loop


@dataclass
class TrainResult:
    state: TrainState
    losses: list[float]          # one entry per optimizer step taken here
    metrics: list[dict]          # eval records also written to metrics.jsonl


def _metrics_record(state: TrainState, loss: float,
                    corpus: Sequence[Task]) -> dict:
    cfg = state.config
    reports = {
        m: evaluate(state.store, cfg.model, corpus, cfg.search, m)
        for m in ("greedy", "beam", "fixer")
    }
    return {
        "step": state.step,
        "loss": loss,
        "greedy_acc": reports["greedy"].accuracy,
        "beam_acc": reports["beam"].accuracy,
        "fixer_acc": reports["fixer"].accuracy,
    }


def train(config: TrainConfig, out_dir: str | Path,
          state: TrainState | None = None,
          log: Callable[[str], None] | None = None,
          checkpoint_every: int | None = None) -> TrainResult:
    """Run (or resume) training to config.steps; artifacts land in out_dir.

    Writes metrics.jsonl eval records every eval_every steps and a final
    checkpoint under out_dir/checkpoint. Pass checkpoint_every to also keep
    a rolling out_dir/checkpoint-latest for crash recovery.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if state is None:
        state = init_state(config)
    else:
        config = state.config
    corpus = eval_corpus(config)
    losses: list[float] = []
    metrics: list[dict] = []
    with open(out_dir / "metrics.jsonl", "a") as metrics_fp:
        while state.step < config.steps:
            tasks = generate_tasks(config.gen, config.batch_size,
                                   domain="train", start=state.task_counter)
            state.task_counter += config.batch_size
            tape = Tape()
            tensors = state.store.tensors(tape)
            loss, _ = batch_task_loss(tensors, config.model, tasks)
            loss_val = float(loss.data)
            if np.isfinite(loss_val):
                tape.backward(loss)
                grads = {
                    name: (tensors[name].grad if tensors[name].grad is not None
                           else np.zeros_like(state.store[name]))
                    for name in state.store.names()
                }
                report = adam_step(state.store, grads,
                                   lr=lr_at(config, state.step),
                                   clip_norm=config.clip_norm)
                state.skip_streak = state.skip_streak + 1 if report.skipped \
                    else 0
            else:
                state.skip_streak += 1
            if state.skip_streak >= 100:
                raise TrainingDiverged(
                    f"{state.skip_streak} consecutive skipped steps at "
                    f"step {state.step}")
            state.step += 1
            losses.append(loss_val)
            if state.step % config.eval_every == 0 or \
                    state.step == config.steps:
                record = _metrics_record(state, loss_val, corpus)
                metrics.append(record)
                metrics_fp.write(json.dumps(record) + "\n")
                metrics_fp.flush()
                if log is not None:
                    log(json.dumps(record))
            if checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(state, out_dir / "checkpoint-latest")
    save_checkpoint(state, out_dir / "checkpoint")
    return TrainResult(state, losses, metrics)
