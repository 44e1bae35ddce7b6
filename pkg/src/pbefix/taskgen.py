"""Deterministic generation of (program, examples) tasks and corpus files.

Programs are sampled uniformly over grammar alternatives; inputs are built
constraint-first (materialize the regex matches and delimiters each SubStr
demands, interleaved with random filler) and validated by executing the
program, with rejection and a bounded retry budget. All randomness flows
through an explicit splitmix64 generator so a corpus is a pure function of
(seed, domain, index) on any platform.

Corpus files are JSONL, one task per line:
``{"program": <program text>, "examples": [{"i": str, "o": str} x 4]}``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

from .dsl import (
    DELIMITERS,
    MAX_CONST_POSITION,
    MAX_EXPRESSIONS,
    MAX_IO_LENGTH,
    MAX_MATCH_INDEX,
    Boundary,
    ConstPos,
    ConstStr,
    ExecError,
    Expression,
    ParseError,
    Position,
    Program,
    RegexPos,
    RegexToken,
    SubStr,
    execute,
    parse,
    render,
)

EXAMPLES_PER_TASK = 4

# Input attempts per program before giving up; generate_task then resamples
# the program, so a rare unsatisfiable draw costs bounded time.
INPUT_ATTEMPTS = 50

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


class SplitMix64:
    """splitmix64: the 64-bit generator of Steele, Lea & Flood (2014).

    State advances by the golden gamma 0x9E3779B97F4A7C15 modulo 2**64 and
    each output is the finalizer

        z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
        z ^= z >> 27;  z *= 0x94D049BB133111EB
        z ^= z >> 31

    applied to the new state. The algorithm is spelled out here (rather than
    deferring to a library RNG) so corpora reproduce bit-exactly from the
    seed in any implementation language.
    """

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        return _mix(self._state)

    def randrange(self, n: int) -> int:
        """Uniform integer in [0, n), rejection-sampled to avoid modulo bias."""
        if n <= 0:
            raise ValueError("randrange requires n >= 1")
        threshold = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < threshold:
                return u % n

    def random(self) -> float:
        """Float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def choice(self, seq: Sequence):
        return seq[self.randrange(len(seq))]

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]

    def weighted_index(self, weights: Sequence[float]) -> int:
        """Index drawn proportionally to nonnegative weights."""
        target = self.random() * sum(weights)
        acc = 0.0
        for i, w in enumerate(weights):
            acc += w
            if target < acc:
                return i
        return len(weights) - 1


def derive_seed(seed: int, domain: str, index: int) -> int:
    """Seed for an independent stream named by (domain, index).

    Feeds the domain bytes and the index through the splitmix64 finalizer one
    chunk at a time. Streams for different domains ("train", "eval", ...) or
    indices never share state, which makes generation embarrassingly parallel
    and lets a training run be resumed from a bare task counter.
    """
    h = seed & _MASK
    for b in domain.encode("utf-8"):
        h = _mix((h + _GAMMA + b) & _MASK)
    return _mix((h + _GAMMA + (index & _MASK)) & _MASK)


def task_rng(seed: int, domain: str, index: int) -> SplitMix64:
    return SplitMix64(derive_seed(seed, domain, index))


@dataclass(frozen=True)
class GenConfig:
    """Sampler settings; length_distribution weights lengths 1..max_expressions."""

    max_expressions: int = MAX_EXPRESSIONS
    max_io_len: int = MAX_IO_LENGTH
    seed: int = 0
    length_distribution: tuple[float, ...] | None = None

    def __post_init__(self):
        if not 1 <= self.max_expressions <= MAX_EXPRESSIONS:
            raise ValueError(f"max_expressions must be 1..{MAX_EXPRESSIONS}")
        if not 1 <= self.max_io_len <= MAX_IO_LENGTH:
            raise ValueError(f"max_io_len must be 1..{MAX_IO_LENGTH}")
        dist = self.length_distribution
        if dist is None:
            dist = (1.0,) * self.max_expressions
        dist = tuple(float(w) for w in dist)
        if len(dist) != self.max_expressions:
            raise ValueError("length_distribution must have max_expressions weights")
        if any(w < 0 for w in dist) or not any(w > 0 for w in dist):
            raise ValueError("length weights must be nonnegative and not all zero")
        object.__setattr__(self, "length_distribution", dist)


@dataclass(frozen=True)
class Task:
    """Ground-truth program plus four (input, output) examples it explains."""

    program: Program
    examples: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if not isinstance(self.examples, tuple):
            object.__setattr__(self, "examples", tuple(tuple(p) for p in self.examples))
        if len(self.examples) != EXAMPLES_PER_TASK:
            raise ValueError(f"a task has exactly {EXAMPLES_PER_TASK} examples")
        for i, o in self.examples:
            if len(i) > MAX_IO_LENGTH or len(o) > MAX_IO_LENGTH:
                raise ValueError(f"example strings are capped at {MAX_IO_LENGTH} chars")


# --- program sampling -------------------------------------------------------

_POSITION_TOKENS: tuple[Union[RegexToken, str], ...] = tuple(RegexToken) + DELIMITERS
_NONZERO_KS = tuple(k for k in range(-MAX_MATCH_INDEX, MAX_MATCH_INDEX + 1) if k)
_BOUNDARIES = (Boundary.START, Boundary.END)


def sample_program(rng: SplitMix64, config: GenConfig) -> Program:
    """Grammatical program with length drawn from config.length_distribution."""
    n = 1 + rng.weighted_index(config.length_distribution)
    return Program(tuple(_sample_expression(rng) for _ in range(n)))


def _sample_expression(rng: SplitMix64) -> Expression:
    if rng.randrange(2) == 0:
        return ConstStr(rng.choice(DELIMITERS))
    return SubStr(_sample_position(rng), _sample_position(rng))


def _sample_position(rng: SplitMix64) -> Position:
    if rng.randrange(2) == 0:
        return ConstPos(rng.randrange(2 * MAX_CONST_POSITION + 1) - MAX_CONST_POSITION)
    token = rng.choice(_POSITION_TOKENS)
    k = rng.choice(_NONZERO_KS)
    return RegexPos(token, k, rng.choice(_BOUNDARIES))


# --- constraint-first input sampling ----------------------------------------

_LOWER = "abcdefghijklmnopqrstuvwxyz"
_UPPER = _LOWER.upper()
_DIGITS = "0123456789"
_LOWER_DIGITS = _LOWER + _DIGITS
_NONSPACE = _LOWER_DIGITS + ",.-:;/()@"
_RANDOM_ALPHABET = _LOWER + _UPPER + _DIGITS + " .,-:;/()@"

_CHARS_PER_U64: dict[int, int] = {}


def _draw_run(rng: SplitMix64, alphabet: str, n: int) -> str:
    """n chars from alphabet, extracting several per 64-bit draw."""
    a = len(alphabet)
    cap = _CHARS_PER_U64.get(a)
    if cap is None:
        cap = _CHARS_PER_U64[a] = max(1, int(64 / math.log2(a)) - 1)
    chars = []
    u = left = 0
    state = rng._state
    for _ in range(n):
        if not left:
            state = (state + _GAMMA) & _MASK
            u, left = _mix(state), cap
        u, r = divmod(u, a)
        chars.append(alphabet[r])
        left -= 1
    rng._state = state
    return "".join(chars)


def _snippet_for(rng: SplitMix64, token: Union[RegexToken, str], minimal: bool) -> str:
    """A short string containing at least one match of `token`."""
    if isinstance(token, str):
        return token
    size = 1 if minimal else 1 + rng.randrange(3)
    if token in (RegexToken.WORD, RegexToken.LOWER):
        return _draw_run(rng, _LOWER, size)
    if token is RegexToken.NUM:
        return _draw_run(rng, _DIGITS, size)
    if token is RegexToken.DIGIT:
        return _draw_run(rng, _DIGITS, 1)
    if token is RegexToken.ALPHANUM:
        # a pure run, not a mix: digit runs leave Word/Lower matches alone
        return _draw_run(rng, _LOWER if rng.randrange(2) else _DIGITS, size)
    if token is RegexToken.ALLCAPS:
        return _draw_run(rng, _UPPER, size)
    if token is RegexToken.PROPCASE:
        return _draw_run(rng, _UPPER, 1) + _draw_run(rng, _LOWER, size)
    return _draw_run(rng, _NONSPACE, 1)  # CHAR: any non-space


def _universal_snippet(rng: SplitMix64) -> str:
    """Upper + lower + digit, e.g. "Qv7": one match of every token kind."""
    return (
        _draw_run(rng, _UPPER, 1) + _draw_run(rng, _LOWER, 1) + _draw_run(rng, _DIGITS, 1)
    )


# Conservative spacing facts per token kind: the minimum length of one match
# and the minimum distance between starts of consecutive matches.
_MIN_MATCH_LEN = {kind: 2 if kind is RegexToken.PROPCASE else 1 for kind in RegexToken}
_MIN_STRIDE = {
    kind: 1 if kind in (RegexToken.DIGIT, RegexToken.CHAR) else 2 for kind in RegexToken
}


def _min_span(token: Union[RegexToken, str], count: int) -> int:
    """Lower bound on input length holding `count` matches of `token`."""
    if isinstance(token, str):
        return count * len(token)
    return (count - 1) * _MIN_STRIDE[token] + _MIN_MATCH_LEN[token]


def _min_boundary(pos: RegexPos) -> int:
    """Lower bound on the boundary index this position can resolve to."""
    k = pos.index
    if k < 0:
        k = 1  # with exactly |k| matches the k-th from the end is the first
    lo = (k - 1) * (len(pos.token) if isinstance(pos.token, str) else _MIN_STRIDE[pos.token])
    if pos.boundary is Boundary.END:
        lo += len(pos.token) if isinstance(pos.token, str) else _MIN_MATCH_LEN[pos.token]
    return lo


@dataclass(frozen=True)
class _InputSpec:
    """Static requirements an input must meet for the program to run."""

    needs: tuple[tuple[Union[RegexToken, str], int], ...]  # token -> match count
    min_len: int
    max_len: int
    feasible: bool
    order_hint: tuple[Union[RegexToken, str], ...]  # earlier tokens lean left


def _input_requirements(program: Program) -> _InputSpec:
    """Derive match counts, length bounds, and static contradictions.

    A RegexPos with index k needs at least |k| matches of its token; paired
    positions over the same token can demand more (k-th from the left must
    precede j-th from the right) or contradict outright. ConstPos boundaries
    pin length bounds, and a start boundary that provably resolves at or
    after a constant end boundary can never execute.
    """
    needs: dict[Union[RegexToken, str], int] = {}
    max_counts: dict[Union[RegexToken, str], int] = {}
    hints: list[Union[RegexToken, str]] = []
    min_len, max_len, feasible = 0, MAX_IO_LENGTH, True
    for expr in program.expressions:
        if isinstance(expr, ConstStr):
            continue
        start, end = expr.start, expr.end
        if start == end:
            feasible = False
        for pos in (start, end):
            if isinstance(pos, ConstPos):
                min_len = max(min_len, pos.index if pos.index >= 0 else -pos.index - 1)
            else:
                if pos.index == 0:
                    feasible = False
                needs[pos.token] = max(needs.get(pos.token, 0), abs(pos.index))
        if isinstance(start, ConstPos):
            if start.index == -1:
                feasible = False  # start at len leaves no room for the end
            if isinstance(end, ConstPos):
                a, b = start.index, end.index
                if (a >= 0) == (b >= 0):
                    if a >= b:
                        feasible = False
                elif a >= 0:
                    min_len = max(min_len, a - b)  # a < len + b + 1
                else:
                    max_len = min(max_len, b - a - 2)  # len + a + 1 < b
        elif isinstance(end, ConstPos):
            b = end.index
            if b >= 0:
                if _min_boundary(start) >= b:
                    feasible = False
            else:
                min_len = max(min_len, _min_boundary(start) - b)
        elif start.token == end.token:
            ka, kb = start.index, end.index
            if (ka > 0) == (kb > 0):
                if ka > kb or (ka == kb and not (
                        start.boundary is Boundary.START and end.boundary is Boundary.END)):
                    feasible = False
            elif ka > 0:
                needs[start.token] = max(needs[start.token], ka - kb)
            else:
                limit = kb - ka - 1  # count + ka + 1 must stay below kb
                prev = max_counts.get(start.token, MAX_IO_LENGTH)
                max_counts[start.token] = min(prev, limit)
        else:
            hints.extend((start.token, end.token))
    for token, count in needs.items():
        if count > max_counts.get(token, MAX_IO_LENGTH):
            feasible = False
        if _min_span(token, count) > max_len:
            feasible = False
    if min_len > max_len:
        feasible = False
    return _InputSpec(tuple(needs.items()), min_len, max_len, feasible, tuple(hints))


def _order_snippets(rng: SplitMix64, spec: _InputSpec, snippets: list) -> None:
    """Shuffle (token, text) snippets, biased toward the SubStr order hints.

    Start-position tokens lean left of end-position tokens so fewer attempts
    die on inverted substrings; jitter (and the occasional unbiased shuffle)
    keeps layouts diverse.
    """
    rng.shuffle(snippets)
    if not spec.order_hint or rng.randrange(4) == 0:
        return
    score: dict[Union[RegexToken, str], float] = {}
    for i in range(0, len(spec.order_hint), 2):
        left, right = spec.order_hint[i], spec.order_hint[i + 1]
        score[left] = score.get(left, 0.0) - 1.0
        score[right] = score.get(right, 0.0) + 1.0
    snippets.sort(key=lambda s: score.get(s[0], 0.0) + rng.random() * 1.5)


def _constrained_text(rng: SplitMix64, spec: _InputSpec, cap: int, minimal: bool) -> str:
    kinds = [(t, c) for t, c in spec.needs if not isinstance(t, str)]
    delims = [(t, c) for t, c in spec.needs if isinstance(t, str)]
    snippets: list[tuple[Union[RegexToken, str], str]] = []
    # one upper+lower+digit snippet covers every kind at once; use that when
    # squeezing several kinds into a tight budget, or now and then for variety
    universal = kinds and (len(kinds) >= 2 if minimal else rng.randrange(4) == 0)
    if universal:
        count = max(c for _, c in kinds)
        snippets.extend((RegexToken.CHAR, _universal_snippet(rng)) for _ in range(count))
    else:
        for token, count in kinds:
            snippets.extend(
                (token, _snippet_for(rng, token, minimal)) for _ in range(count)
            )
    if minimal:
        # delimiter occurrences are literal, so their snippets pack adjacently
        for token, count in delims:
            snippets.append((token, token * count))
    else:
        for token, count in delims:
            snippets.extend((token, token) for _ in range(count))
    _order_snippets(rng, spec, snippets)
    parts = []
    filler_stop = (len(snippets) + 1) // 2  # keep the tail quiet: filler after
    # the midpoint would shift which match of a token is last
    for i, (token, text) in enumerate(snippets):
        if i:
            # spaces end every run-class match, so snippet counts survive
            if minimal or i > filler_stop or rng.randrange(3):
                parts.append(" ")
            else:
                parts.append(" " + _draw_run(rng, _LOWER_DIGITS, 1 + rng.randrange(3)) + " ")
        parts.append(text)
    text = "".join(parts)
    if not text and spec.min_len == 0:
        return _random_text(rng, cap)
    if spec.min_len and len(text) < cap:
        # pad with spaces only (they never shift which match is last) to a
        # random viable length, split across both ends: constant positions
        # may need room before the matches as much as after them
        target = max(len(text), spec.min_len)
        if rng.randrange(2):
            target += rng.randrange(cap - target + 1)
        front = rng.randrange(target - len(text) + 1)
        text = " " * front + text + " " * (target - len(text) - front)
    return text


def _random_text(rng: SplitMix64, cap: int) -> str:
    return _draw_run(rng, _RANDOM_ALPHABET, 1 + rng.randrange(min(40, cap)))


def _sample_example(
    rng: SplitMix64, program: Program, spec: _InputSpec, max_io_len: int
) -> tuple[str, str] | None:
    cap = min(max_io_len, spec.max_len)
    if not spec.feasible or spec.min_len > cap:
        return None
    for attempt in range(INPUT_ATTEMPTS):
        if attempt % 5 == 4:
            text = _random_text(rng, cap)
        else:
            text = _constrained_text(rng, spec, cap, minimal=False)
            if len(text) > cap:
                text = _constrained_text(rng, spec, cap, minimal=True)
        if len(text) > cap:
            continue
        try:
            out = execute(program, text)
        except ExecError:
            continue
        if len(out) <= max_io_len:
            return text, out
    return None


def sample_compatible_input(
    rng: SplitMix64, program: Program, max_io_len: int = MAX_IO_LENGTH
) -> str | None:
    """Input on which the program executes with output <= max_io_len.

    Builds inputs constraint-first from the program's static requirements,
    mixing in fully random draws as a fallback, and validates by execution.
    Returns None (give up) once the requirements are contradictory or after
    INPUT_ATTEMPTS rejected attempts, so the caller can resample the program.
    """
    found = _sample_example(rng, program, _input_requirements(program), max_io_len)
    return None if found is None else found[0]


def generate_task(rng: SplitMix64, config: GenConfig) -> Task:
    """Task whose four examples all re-execute exactly; retries internally."""
    while True:
        program = sample_program(rng, config)
        spec = _input_requirements(program)
        examples = []
        for _ in range(EXAMPLES_PER_TASK):
            found = _sample_example(rng, program, spec, config.max_io_len)
            if found is None:
                break
            examples.append(found)
        if len(examples) == EXAMPLES_PER_TASK:
            return Task(program, tuple(examples))


def generate_tasks(
    config: GenConfig, count: int, domain: str = "gen", start: int = 0
) -> list[Task]:
    """Tasks start..start+count-1 of the (config.seed, domain) stream.

    Each task gets its own derived rng, so any slice of the stream can be
    produced independently (by parallel workers, or when resuming training
    from a task counter).
    """
    return [
        generate_task(task_rng(config.seed, domain, start + i), config)
        for i in range(count)
    ]


# --- corpus files ------------------------------------------------------------

class CorpusError(Exception):
    """Schema violation in a corpus file, reported with its line number."""

    def __init__(self, message: str, line_no: int):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


def write_corpus(tasks: Iterable[Task], path: str) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for task in tasks:
            record = {
                "program": render(task.program),
                "examples": [{"i": i, "o": o} for i, o in task.examples],
            }
            fh.write(json.dumps(record) + "\n")


def _task_from_record(record, line_no: int) -> Task:
    if not isinstance(record, dict):
        raise CorpusError("record is not a JSON object", line_no)
    text = record.get("program")
    if not isinstance(text, str):
        raise CorpusError("missing or non-string 'program'", line_no)
    try:
        program = parse(text)
    except ParseError as err:
        raise CorpusError(f"bad program: {err}", line_no) from None
    examples = record.get("examples")
    if not isinstance(examples, list) or len(examples) != EXAMPLES_PER_TASK:
        raise CorpusError(f"'examples' must be a list of {EXAMPLES_PER_TASK}", line_no)
    pairs = []
    for ex in examples:
        if not isinstance(ex, dict) or not isinstance(ex.get("i"), str) \
                or not isinstance(ex.get("o"), str):
            raise CorpusError("each example needs string fields 'i' and 'o'", line_no)
        if len(ex["i"]) > MAX_IO_LENGTH or len(ex["o"]) > MAX_IO_LENGTH:
            raise CorpusError(f"example strings are capped at {MAX_IO_LENGTH} chars", line_no)
        pairs.append((ex["i"], ex["o"]))
    return Task(program, tuple(pairs))


def read_corpus(path: str) -> list[Task]:
    tasks = []
    with open(path, encoding="ascii") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise CorpusError(f"invalid JSON: {err.msg}", line_no) from None
            tasks.append(_task_from_record(record, line_no))
    return tasks
