"""Seq2seq synthesizer: shared triplet encoder, shared LSTM decoder.

One encoder embeds (input, output, executed-output) triplets and max-pools
them into a task vector; one LSTM decoder emits program tokens from that
vector. The same parameter tensors serve both the first-round encoding
(executed slot = DUMMY) and the fix-round encoding (executed slot = real
output or FAIL), and both decoding passes, so there is exactly one set of
encoder weights and one set of decoder weights in a ParamStore.

Training loss per task is the sum of two teacher-forced NLL terms: one from
the DUMMY encoding and one from re-encoding with the outputs of the greedily
decoded candidate executed on every input. The candidate is decoded and
executed outside the tape, so no gradient flows through decoding or
execution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor, glorot_uniform, sigmoid_np
from .dsl import ExecError, execute
from .taskgen import EXAMPLES_PER_TASK, Task
from .vocab import (
    BOS_ID,
    CHAR_COUNT,
    DEFAULT_T_MAX,
    EOS_ID,
    IO_WIDTH,
    PAD_ID,
    TOKEN_COUNT,
    ExecMarker,
    TokenDecodeError,
    encode_example_set,
    program_to_tokens,
    tokens_to_program,
)

ExecOut = Union[str, ExecMarker]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    `encoder_layers` and `examples` are structural constants of the
    architecture; they are fields only so checkpoints can self-describe.
    `io_width` defaults to the full 80-char I/O slot and is narrowable only
    for tiny test configs.
    """

    hidden: int = 64
    e_char: int = 16
    e_tok: int = 32
    examples: int = EXAMPLES_PER_TASK
    encoder_layers: int = 5
    t_max: int = DEFAULT_T_MAX
    char_vocab: int = CHAR_COUNT
    token_vocab: int = TOKEN_COUNT
    io_width: int = IO_WIDTH

    def __post_init__(self) -> None:
        if self.hidden < 1 or self.e_char < 1 or self.e_tok < 1:
            raise ValueError("hidden, e_char, e_tok must be positive")
        if self.encoder_layers != 5:
            raise ValueError("the encoder is fixed at 5 dense layers")
        if self.examples != EXAMPLES_PER_TASK:
            raise ValueError(f"examples must be {EXAMPLES_PER_TASK}")
        if self.t_max < 2:
            raise ValueError("t_max must leave room for one token plus EOS")
        if not 1 <= self.io_width <= IO_WIDTH:
            raise ValueError(f"io_width must be in [1, {IO_WIDTH}]")

    @property
    def triplet_width(self) -> int:
        return 3 * self.io_width


PARAM_SHAPES = (
    ("enc.char_embed", lambda c: (c.char_vocab, c.e_char)),
    ("enc.fc1.w", lambda c: (c.triplet_width * c.e_char, c.hidden)),
    ("enc.fc1.b", lambda c: (c.hidden,)),
    ("enc.fc2.w", lambda c: (c.hidden, c.hidden)),
    ("enc.fc2.b", lambda c: (c.hidden,)),
    ("enc.fc3.w", lambda c: (c.hidden, c.hidden)),
    ("enc.fc3.b", lambda c: (c.hidden,)),
    ("enc.fc4.w", lambda c: (c.hidden, c.hidden)),
    ("enc.fc4.b", lambda c: (c.hidden,)),
    ("enc.fc5.w", lambda c: (c.hidden, c.hidden)),
    ("enc.fc5.b", lambda c: (c.hidden,)),
    ("dec.tok_embed", lambda c: (c.token_vocab, c.e_tok)),
    ("dec.lstm.w_ih", lambda c: (c.e_tok, 4 * c.hidden)),
    ("dec.lstm.w_hh", lambda c: (c.hidden, 4 * c.hidden)),
    ("dec.lstm.b", lambda c: (4 * c.hidden,)),
    ("dec.out.w", lambda c: (c.hidden, c.token_vocab)),
    ("dec.out.b", lambda c: (c.token_vocab,)),
)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {name: shape(config) for name, shape in PARAM_SHAPES}


def init_params(config: ModelConfig, seed: int = 0,
                dtype: np.dtype = np.float32) -> ParamStore:
    """Glorot-uniform weights and embeddings, zero biases, forget bias 1."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape_fn in PARAM_SHAPES:
        shape = shape_fn(config)
        if name.endswith(".b"):
            value = np.zeros(shape, dtype=dtype)
        else:
            value = glorot_uniform(rng, shape, shape[0], shape[1], dtype=dtype)
        store.add(name, value)
    store["dec.lstm.b"][config.hidden:2 * config.hidden] = 1.0
    return store


# ---------------------------------------------------------------------------
# Encoder


def encode_batch(params: Mapping[str, Tensor], config: ModelConfig,
                 triplets: np.ndarray) -> Tensor:
    """Encode (B, N, 3*io_width) triplet ids into (B, hidden) task vectors.

    Each triplet row passes through the shared embed + 5-layer stack
    (relu on layers 1-4, linear layer 5); rows of a task are then
    elementwise max-pooled.
    """
    triplets = np.asarray(triplets)
    if triplets.ndim != 3 or triplets.shape[2] != config.triplet_width:
        raise ValueError(
            f"expected (B, N, {config.triplet_width}) triplet ids, "
            f"got {triplets.shape}")
    b, n, width = triplets.shape
    emb = ad.embedding_lookup(params["enc.char_embed"],
                              triplets.reshape(b * n, width))
    x = ad.reshape(emb, (b * n, width * config.e_char))
    for layer in range(1, 6):
        x = ad.add_bias(ad.matmul(x, params[f"enc.fc{layer}.w"]),
                        params[f"enc.fc{layer}.b"])
        if layer < 5:
            x = ad.relu(x)
    return ad.maxpool_over_set(ad.reshape(x, (b, n, config.hidden)))


def encode(params: Mapping[str, Tensor], config: ModelConfig,
           triplets: np.ndarray) -> Tensor:
    """Encode one task's (N, 3*io_width) triplets into a (1, hidden) vector."""
    return encode_batch(params, config, np.asarray(triplets)[None])


# ---------------------------------------------------------------------------
# Decoder (inference path: plain numpy, no tape)


def param_arrays(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Raw ndarray view of a tensor dict (or pass ndarrays through)."""
    return {k: (v.data if isinstance(v, Tensor) else v)
            for k, v in params.items()}


@dataclass
class DecoderState:
    """LSTM state for a batch (or beam) of partial decodes."""

    h: np.ndarray
    c: np.ndarray

    def select(self, idx: np.ndarray) -> "DecoderState":
        """Reorder rows, e.g. when beam search keeps parents [0, 0, 2]."""
        return DecoderState(self.h[idx], self.c[idx])


def decoder_start(z: np.ndarray) -> DecoderState:
    z = np.asarray(z)
    if z.ndim != 2:
        raise ValueError(f"z must be (B, hidden), got {z.shape}")
    return DecoderState(z.copy(), np.zeros_like(z))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def decoder_step(arrays: Mapping[str, np.ndarray], state: DecoderState,
                 token_ids: np.ndarray) -> tuple[np.ndarray, DecoderState]:
    """Advance one step; returns (log-probs (B, V) float64, new state)."""
    hidden = state.h.shape[1]
    emb = arrays["dec.tok_embed"][token_ids]
    pre = (emb @ arrays["dec.lstm.w_ih"] + state.h @ arrays["dec.lstm.w_hh"]
           + arrays["dec.lstm.b"])
    ig = sigmoid_np(pre[:, :hidden])
    fg = sigmoid_np(pre[:, hidden:2 * hidden])
    g = np.tanh(pre[:, 2 * hidden:3 * hidden])
    og = sigmoid_np(pre[:, 3 * hidden:])
    c2 = fg * state.c + ig * g
    h2 = og * np.tanh(c2)
    logits = h2 @ arrays["dec.out.w"] + arrays["dec.out.b"]
    return _log_softmax(logits).astype(np.float64), DecoderState(h2, c2)


def decode_greedy(params: Mapping[str, Tensor], config: ModelConfig,
                  z: np.ndarray) -> tuple[list[tuple[int, ...]], np.ndarray]:
    """Greedy-decode every row of z; argmax token each step, stop at EOS.

    Returns the token sequences (EOS included when reached within t_max)
    and their total log-probabilities. Runs outside any tape.
    """
    arrays = param_arrays(params)
    z = z.data if isinstance(z, Tensor) else np.asarray(z)
    state = decoder_start(z)
    batch = z.shape[0]
    last = np.full(batch, BOS_ID, dtype=np.int64)
    alive = np.ones(batch, dtype=bool)
    logps = np.zeros(batch, dtype=np.float64)
    seqs: list[list[int]] = [[] for _ in range(batch)]
    for _ in range(config.t_max):
        logprobs, state = decoder_step(arrays, state, last)
        choice = logprobs.argmax(axis=1)
        logps[alive] += logprobs[np.arange(batch), choice][alive]
        for i in np.flatnonzero(alive):
            seqs[i].append(int(choice[i]))
        alive &= choice != EOS_ID
        if not alive.any():
            break
        last = choice
    return [tuple(s) for s in seqs], logps


# ---------------------------------------------------------------------------
# Teacher-forced NLL (training path: on tape)


def pad_token_rows(rows: Sequence[Sequence[int]]) -> np.ndarray:
    """Stack token sequences into a PAD-padded (B, T) int array."""
    max_len = max(len(r) for r in rows)
    out = np.full((len(rows), max_len), PAD_ID, dtype=np.int64)
    for i, row in enumerate(rows):
        out[i, :len(row)] = row
    return out


def _decode_nll_parts(params: Mapping[str, Tensor], config: ModelConfig,
                      z: Tensor, targets: np.ndarray
                      ) -> tuple[Tensor, np.ndarray]:
    """Per-token teacher-forced cross-entropies for PAD-padded targets.

    Returns the flat t-major (T*B,) loss tensor and the matching 0/1 mask
    that zeroes PAD positions.
    """
    batch, steps = targets.shape
    inputs = np.concatenate(
        [np.full((batch, 1), BOS_ID, dtype=targets.dtype), targets[:, :-1]],
        axis=1)
    emb = ad.embedding_lookup(params["dec.tok_embed"], inputs.reshape(-1))
    gates_x = ad.add_bias(ad.matmul(emb, params["dec.lstm.w_ih"]),
                          params["dec.lstm.b"])
    gates_x = ad.reshape(gates_x, (batch, steps, 4 * config.hidden))
    h = z
    c = Tensor(np.zeros_like(z.data))
    hs = []
    for t in range(steps):
        h, c = ad.lstm_cell_pre(ad.take_time(gates_x, t), h, c,
                                params["dec.lstm.w_hh"])
        hs.append(h)
    stacked = ad.concat(hs, axis=0)  # (T*B, hidden), t-major
    logits = ad.add_bias(ad.matmul(stacked, params["dec.out.w"]),
                         params["dec.out.b"])
    flat_targets = targets.T.reshape(-1)
    losses = ad.softmax_xent(logits, flat_targets)
    mask = (flat_targets != PAD_ID).astype(z.data.dtype)
    return losses, mask


def decode_nll_batch(params: Mapping[str, Tensor], config: ModelConfig,
                     z: Tensor, targets: np.ndarray) -> Tensor:
    """Summed teacher-forced NLL of PAD-padded (B, T) targets given z.

    Every non-PAD target token (EOS included) contributes one softmax
    cross-entropy term; the decoder input at step t is BOS for t=0 and
    targets[:, t-1] after.
    """
    targets = np.asarray(targets)
    losses, mask = _decode_nll_parts(params, config, z, targets)
    return ad.sum_all(ad.mul_const(losses, mask))


def decode_nll(params: Mapping[str, Tensor], config: ModelConfig,
               z: Tensor, target: Sequence[int]) -> Tensor:
    """Teacher-forced NLL of one target sequence given a (1, hidden) z."""
    if len(target) > config.t_max:
        raise ValueError(f"target length {len(target)} exceeds t_max")
    return decode_nll_batch(params, config, z,
                            np.asarray([target], dtype=np.int64))


# ---------------------------------------------------------------------------
# Two-term task loss


@dataclass(frozen=True)
class TaskLossStats:
    """Per-batch diagnostics from one loss evaluation."""

    nll_base: float          # mean first-term NLL per task
    nll_fix: float           # mean second-term NLL per task
    intermediate_ok: int     # tasks whose candidate executed on all examples
    intermediate_solved: int  # tasks whose candidate matched every output


def executed_outputs(tokens: Sequence[int],
                     examples: Sequence[tuple[str, str]],
                     io_width: int = IO_WIDTH) -> list[ExecOut]:
    """Run the decoded candidate on each example input for re-encoding.

    A sequence that does not decode to a program marks every slot FAIL;
    an execution error marks that example FAIL. Outputs are truncated to
    the encoder width, since the fixer only observes the encodable prefix.
    """
    try:
        program = tokens_to_program(tokens)
    except TokenDecodeError:
        return [ExecMarker.FAIL] * len(examples)
    outs: list[ExecOut] = []
    for inp, _ in examples:
        try:
            outs.append(execute(program, inp)[:io_width])
        except ExecError:
            outs.append(ExecMarker.FAIL)
    return outs


def batch_task_loss(
    params: Mapping[str, Tensor],
    config: ModelConfig,
    tasks: Sequence[Task],
    frozen_exec_outs: Sequence[Sequence[ExecOut]] | None = None,
) -> tuple[Tensor, TaskLossStats]:
    """Mean two-term loss over a batch of tasks.

    Term one decodes the ground-truth program from the DUMMY-slot encoding;
    term two decodes it again from the encoding whose third slots hold the
    executed outputs of the greedy candidate. The candidate is produced and
    executed outside the tape (pass `frozen_exec_outs` to pin it, e.g. for
    finite-difference checks).
    """
    batch = len(tasks)
    width = config.io_width
    dummy = np.stack(
        [encode_example_set(t.examples, width=width) for t in tasks])
    z_base = encode_batch(params, config, dummy)
    if frozen_exec_outs is None:
        seqs, _ = decode_greedy(params, config, z_base.data)
        exec_outs = [executed_outputs(seq, task.examples, width)
                     for seq, task in zip(seqs, tasks)]
    else:
        if len(frozen_exec_outs) != batch:
            raise ValueError("need one exec-out row per task")
        exec_outs = [list(row) for row in frozen_exec_outs]
    fix = np.stack(
        [encode_example_set(t.examples, outs, width=width)
         for t, outs in zip(tasks, exec_outs)])
    z_fix = encode_batch(params, config, fix)
    targets = pad_token_rows(
        [program_to_tokens(t.program, config.t_max) for t in tasks])
    # One decode over both encodings: rows 0..B-1 are the base term, rows
    # B..2B-1 the fixer term, each against the same targets.
    z_both = ad.concat([z_base, z_fix], axis=0)
    losses, mask = _decode_nll_parts(params, config, z_both,
                                     np.concatenate([targets, targets]))
    loss = ad.mul_const(ad.sum_all(ad.mul_const(losses, mask)), 1.0 / batch)
    per_row = (losses.data * mask).reshape(-1, 2 * batch).sum(axis=0)
    ok = sum(1 for outs in exec_outs
             if not any(o is ExecMarker.FAIL for o in outs))
    solved = sum(
        1 for outs, task in zip(exec_outs, tasks)
        if outs == [o[:width] for _, o in task.examples])
    stats = TaskLossStats(float(per_row[:batch].sum()) / batch,
                          float(per_row[batch:].sum()) / batch, ok, solved)
    return loss, stats


def task_loss(
    params: Mapping[str, Tensor],
    config: ModelConfig,
    task: Task,
    frozen_exec_outs: Sequence[ExecOut] | None = None,
) -> tuple[Tensor, TaskLossStats]:
    """Two-term loss for a single task; see batch_task_loss."""
    frozen = None if frozen_exec_outs is None else [frozen_exec_outs]
    return batch_task_loss(params, config, [task], frozen)
