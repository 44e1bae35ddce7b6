"""Reverse-mode automatic differentiation on numpy arrays.

A `Tape` records each op as a backward closure; `Tape.backward` replays them
in reverse, accumulating gradients into `Tensor.grad`. Ops called on tensors
without a tape skip recording entirely, which is the inference path. The op
set is exactly what the synthesizer model needs: dense layers, lookups,
elementwise nonlinearities, max-pooling across an example set, fused LSTM
cells, and softmax cross-entropy, plus an Adam optimizer and a central
finite-difference gradient checker.

Everything runs in float32 by default; build parameters as float64 when
verifying gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


def _check(cond: bool, op: str, *shapes) -> None:
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


class Tape:
    """Op recorder for one forward/backward pass (single-threaded)."""

    __slots__ = ("_backwards",)

    def __init__(self):
        self._backwards: list[Callable[[], None]] = []

    def record(self, fn: Callable[[], None]) -> None:
        self._backwards.append(fn)

    def backward(self, loss: "Tensor") -> None:
        """Seed d(loss)/d(loss) = 1 and propagate to every recorded tensor."""
        _check(loss.data.shape == (), "backward", loss.data.shape)
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for fn in reversed(self._backwards):
            fn()


class Tensor:
    """Array plus gradient slot; `tape=None` means do not differentiate."""

    __slots__ = ("data", "grad", "tape")

    def __init__(self, data: np.ndarray, tape: Tape | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.tape = tape

    @property
    def shape(self) -> tuple:
        return self.data.shape


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ValueError("inputs recorded on different tapes")
            tape = t.tape
    return tape


def _accum(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add g into t's gradient. Pass own=True only for freshly allocated
    arrays: the first accumulation then takes the buffer instead of copying."""
    if t.tape is None:
        return
    if t.grad is None:
        t.grad = g if own else g.copy()
    else:
        t.grad += g


def _grad_buffer(t: Tensor) -> np.ndarray:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    return t.grad


# --- graph ops ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.data.ndim == 2 and b.data.ndim == 2 and a.data.shape[1] == b.data.shape[0],
           "matmul", a.data.shape, b.data.shape)
    out = Tensor(a.data @ b.data, _tape_of(a, b))
    if out.tape is not None:
        def back():
            g = out.grad
            if a.tape is not None:
                _accum(a, g @ b.data.T, own=True)
            if b.tape is not None:
                _accum(b, a.data.T @ g, own=True)
        out.tape.record(back)
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    _check(x.data.shape[-1:] == b.data.shape and b.data.ndim == 1,
           "add_bias", x.data.shape, b.data.shape)
    out = Tensor(x.data + b.data, _tape_of(x, b))
    if out.tape is not None:
        axes = tuple(range(x.data.ndim - 1))
        def back():
            _accum(x, out.grad)
            if b.tape is not None:
                _accum(b, out.grad.sum(axis=axes), own=True)
        out.tape.record(back)
    return out


def add(x: Tensor, y: Tensor) -> Tensor:
    _check(x.data.shape == y.data.shape, "add", x.data.shape, y.data.shape)
    out = Tensor(x.data + y.data, _tape_of(x, y))
    if out.tape is not None:
        def back():
            _accum(x, out.grad)
            _accum(y, out.grad)
        out.tape.record(back)
    return out


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    first = tensors[0].data.shape
    for t in tensors[1:]:
        _check(t.data.shape == first, "add_n", first, t.data.shape)
    out = Tensor(sum(t.data for t in tensors), _tape_of(*tensors))
    if out.tape is not None:
        def back():
            for t in tensors:
                _accum(t, out.grad)
        out.tape.record(back)
    return out


def mul_const(x: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or array (no gradient into c)."""
    c = np.asarray(c, dtype=x.data.dtype)
    out = Tensor(x.data * c, x.tape)
    if out.tape is not None:
        def back():
            _accum(x, out.grad * c, own=True)
        out.tape.record(back)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0), x.tape)
    if out.tape is not None:
        def back():
            _accum(x, out.grad * (x.data > 0), own=True)
        out.tape.record(back)
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y, x.tape)
    if out.tape is not None:
        def back():
            _accum(x, out.grad * (1.0 - y * y), own=True)
        out.tape.record(back)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = sigmoid_np(x.data)
    out = Tensor(y, x.tape)
    if out.tape is not None:
        def back():
            _accum(x, out.grad * y * (1.0 - y), own=True)
        out.tape.record(back)
    return out


def sigmoid_np(z: np.ndarray) -> np.ndarray:
    # exp(-z) overflows to inf for very negative z, which still yields the
    # correct limit 1/inf = 0, so the plain formula is stable end to end
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), _tape_of(*tensors))
    if out.tape is not None:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def back():
            for t, piece in zip(tensors, np.split(out.grad, splits, axis=axis)):
                _accum(t, piece)
        out.tape.record(back)
    return out


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = Tensor(x.data.reshape(shape), x.tape)
    if out.tape is not None:
        def back():
            _accum(x, out.grad.reshape(x.data.shape))
        out.tape.record(back)
    return out


def take_time(x: Tensor, t: int) -> Tensor:
    """Slice x[:, t] of a (B, T, ...) tensor; the backward writes in place."""
    _check(x.data.ndim >= 2 and 0 <= t < x.data.shape[1], "take_time", x.data.shape, (t,))
    out = Tensor(x.data[:, t], x.tape)
    if out.tape is not None:
        def back():
            _grad_buffer(x)[:, t] += out.grad
        out.tape.record(back)
    return out


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of `table` (V, E) gathered by an integer array of any shape."""
    ids = np.asarray(ids)
    _check(table.data.ndim == 2, "embedding_lookup", table.data.shape, ids.shape)
    out = Tensor(table.data[ids], table.tape)
    if out.tape is not None:
        vocab, dim = table.data.shape
        def back():
            flat_ids = ids.reshape(-1)
            flat_g = out.grad.reshape(-1, dim)
            buf = _grad_buffer(table)
            # One bincount over (id, column) buckets beats np.add.at and a
            # per-column loop for our vocab sizes.
            buckets = (flat_ids[:, None] * dim + np.arange(dim)[None, :]).ravel()
            totals = np.bincount(buckets, weights=flat_g.ravel(), minlength=vocab * dim)
            buf += totals.reshape(vocab, dim)
        out.tape.record(back)
    return out


def maxpool_over_set(x: Tensor) -> Tensor:
    """Elementwise max over axis 1 of (B, N, H); ties route to the first index."""
    _check(x.data.ndim == 3, "maxpool_over_set", x.data.shape)
    idx = np.argmax(x.data, axis=1)  # first maximizer on ties
    out = Tensor(np.take_along_axis(x.data, idx[:, None, :], axis=1)[:, 0, :], x.tape)
    if out.tape is not None:
        B, _, H = x.data.shape
        def back():
            buf = _grad_buffer(x)
            buf[np.arange(B)[:, None], idx, np.arange(H)[None, :]] += out.grad
        out.tape.record(back)
    return out


def lstm_cell_pre(gates_x: Tensor, h: Tensor, c: Tensor, w_hh: Tensor
                  ) -> tuple[Tensor, Tensor]:
    """One LSTM step given precomputed input gates x @ w_ih + b.

    Gate order along the last axis is input, forget, cell, output. Sharing
    the precomputed projection lets a teacher-forced decoder batch all input
    projections into a single matmul across time.
    """
    B, H4 = gates_x.data.shape
    H = h.data.shape[-1]
    _check(H4 == 4 * H and h.data.shape == (B, H) and c.data.shape == (B, H)
           and w_hh.data.shape == (H, H4),
           "lstm_cell_pre", gates_x.data.shape, h.data.shape, c.data.shape, w_hh.data.shape)
    pre = gates_x.data + h.data @ w_hh.data
    ig = sigmoid_np(pre[:, :H])
    fg = sigmoid_np(pre[:, H:2 * H])
    gg = np.tanh(pre[:, 2 * H:3 * H])
    og = sigmoid_np(pre[:, 3 * H:])
    c2_data = fg * c.data + ig * gg
    tc2 = np.tanh(c2_data)
    tape = _tape_of(gates_x, h, c, w_hh)
    h2 = Tensor(og * tc2, tape)
    c2 = Tensor(c2_data, tape)
    if tape is not None:
        def back():
            dh2 = h2.grad if h2.grad is not None else 0.0
            dc2 = c2.grad if c2.grad is not None else 0.0
            dc2 = dc2 + dh2 * og * (1.0 - tc2 * tc2)
            dpre = np.empty_like(pre)
            dpre[:, :H] = dc2 * gg * ig * (1.0 - ig)
            dpre[:, H:2 * H] = dc2 * c.data * fg * (1.0 - fg)
            dpre[:, 2 * H:3 * H] = dc2 * ig * (1.0 - gg * gg)
            dpre[:, 3 * H:] = dh2 * tc2 * og * (1.0 - og)
            _accum(gates_x, dpre, own=True)
            if h.tape is not None:
                _accum(h, dpre @ w_hh.data.T, own=True)
            if c.tape is not None:
                _accum(c, dc2 * fg, own=True)
            if w_hh.tape is not None:
                _accum(w_hh, h.data.T @ dpre, own=True)
        tape.record(back)
    return h2, c2


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_ih: Tensor, w_hh: Tensor,
              b: Tensor) -> tuple[Tensor, Tensor]:
    """Canonical 4-gate LSTM step (input, forget, cell, output)."""
    return lstm_cell_pre(add_bias(matmul(x, w_ih), b), h, c, w_hh)


def softmax_xent(logits: Tensor, target_ids: np.ndarray) -> Tensor:
    """Per-row cross-entropy -log softmax(logits)[target] for (N, V) logits."""
    target_ids = np.asarray(target_ids)
    _check(logits.data.ndim == 2 and target_ids.shape == logits.data.shape[:1],
           "softmax_xent", logits.data.shape, target_ids.shape)
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    rows = np.arange(z.shape[0])
    log_probs = (z - zmax) - np.log(denom)
    out = Tensor(-log_probs[rows, target_ids], logits.tape)
    if out.tape is not None:
        probs = ez / denom
        def back():
            g = probs * out.grad[:, None]
            g[rows, target_ids] -= out.grad
            _accum(logits, g, own=True)
        out.tape.record(back)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype), x.tape)
    if out.tape is not None:
        def back():
            _accum(x, np.broadcast_to(out.grad, x.data.shape))
        out.tape.record(back)
    return out


# --- parameters and optimizer --------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int,
                   fan_out: int, dtype=np.float32) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


class ParamStore:
    """Named parameter arrays plus Adam moments; iteration is lexicographic."""

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, array: np.ndarray) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        self._params[name] = array
        self.m[name] = np.zeros_like(array)
        self.v[name] = np.zeros_like(array)

    def names(self) -> list[str]:
        return sorted(self._params)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __setitem__(self, name: str, array: np.ndarray) -> None:
        if name not in self._params:
            raise KeyError(name)
        self._params[name] = array

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def tensors(self, tape: Tape | None) -> dict[str, Tensor]:
        """Fresh Tensor wrappers for one pass (grads start empty)."""
        return {name: Tensor(self._params[name], tape) for name in self._params}


@dataclass
class AdamReport:
    grad_norm: float
    clip_scale: float
    skipped: bool


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              clip_norm: float | None = 5.0) -> AdamReport:
    """In-place Adam with bias correction and global-norm clipping.

    A non-finite gradient norm skips the update entirely (parameters, moments
    and step count untouched) and reports it.
    """
    names = store.names()
    sq = 0.0
    for name in names:
        g = grads[name]
        sq += float(np.dot(g.reshape(-1), g.reshape(-1)))
    norm = float(np.sqrt(sq))
    if not np.isfinite(norm):
        return AdamReport(grad_norm=norm, clip_scale=1.0, skipped=True)
    scale = 1.0
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name in names:
        g = grads[name] * scale
        p, m, v = store[name], store.m[name], store.v[name]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype, copy=False)
    return AdamReport(grad_norm=norm, clip_scale=scale, skipped=False)


# --- gradient checking ---------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float


@dataclass
class GradCheckReport:
    worst_rel_err: float
    worst_param: str
    entries: list[GradCheckEntry]

    def passed(self, tolerance: float) -> bool:
        return self.worst_rel_err < tolerance


def grad_check(build_fn: Callable[[dict[str, Tensor]], Tensor], store: ParamStore,
               h: float = 1e-5, max_elements_per_param: int | None = None,
               sample_seed: int = 0) -> GradCheckReport:
    """Analytic gradients vs central finite differences.

    `build_fn` maps a name -> Tensor dict to a scalar loss. Use float64
    parameters; float32 rounding swamps the h**2 truncation error. By default
    every element of every parameter is probed; for larger models pass
    `max_elements_per_param` to probe a deterministic random subset of each
    tensor instead.
    """
    tape = Tape()
    tensors = store.tensors(tape)
    loss = build_fn(tensors)
    tape.backward(loss)
    analytic = {
        name: (np.zeros_like(store[name]) if t.grad is None else t.grad.copy())
        for name, t in tensors.items()
    }

    def eval_loss() -> float:
        return float(build_fn(store.tensors(None)).data)

    # The difference quotient carries roundoff noise of roughly eps*|f|/h,
    # so gradient components below that scale cannot be resolved by this
    # oracle. The denominator floor sits 5e4 x above the noise, capping the
    # reported error for unresolvable components near 2e-5 while leaving
    # every resolvable component's error untouched (a floor can only lower
    # reported errors, never raise them).
    f0 = eval_loss()
    noise = np.finfo(np.float64).eps * abs(f0) / h
    floor = max(1e-6, 5e4 * noise)

    picker = np.random.default_rng(sample_seed)
    entries = []
    for name in store.names():
        p = store[name]
        flat = p.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        if max_elements_per_param is None or flat.size <= max_elements_per_param:
            indices = range(flat.size)
        else:
            indices = picker.choice(flat.size, size=max_elements_per_param,
                                    replace=False)
        worst = 0.0
        for i in indices:
            saved = flat[i]
            flat[i] = saved + h
            up = eval_loss()
            flat[i] = saved - h
            down = eval_loss()
            flat[i] = saved
            fd = (up - down) / (2.0 * h)
            err = abs(a_flat[i] - fd) / max(abs(a_flat[i]) + abs(fd), floor)
            worst = max(worst, err)
        entries.append(GradCheckEntry(name, worst))
    worst_entry = max(entries, key=lambda e: e.max_rel_err)
    return GradCheckReport(worst_entry.max_rel_err, worst_entry.name, entries)
