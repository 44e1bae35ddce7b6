"""Token and character vocabularies bridging programs and the network.

Programs linearize to a prefix token sequence (constructor followed by its
arguments, expressions back to back, EOS terminated — no Concat or
parenthesis tokens, since every constructor has fixed arity). IO strings are
encoded character-wise into fixed-width id vectors; executed-output slots may
instead hold a DUMMY fill (first-round encoding) or a FAIL marker (execution
or decode error).

Both vocabularies are closed and ordered; ``TOKEN_STRINGS``/``CHAR_STRINGS``
are the canonical manifests embedded in checkpoints.
"""

from __future__ import annotations

import enum
from typing import Iterable, Sequence, Union

import numpy as np

from pbefix.dsl import (
    Boundary,
    ConstPos,
    ConstStr,
    DELIMITERS,
    Expression,
    MAX_CONST_POSITION,
    MAX_EXPRESSIONS,
    MAX_MATCH_INDEX,
    Position,
    Program,
    RegexPos,
    RegexToken,
    SubStr,
)

DEFAULT_T_MAX = 128
IO_WIDTH = 80
TRIPLET_WIDTH = 3 * IO_WIDTH

TokenSeq = tuple[int, ...]


class EncodeError(ValueError):
    """String or program cannot be encoded (too long / invalid character)."""


class TokenDecodeError(ValueError):
    """Token sequence is not the linearization of any valid program."""


# --- token vocabulary -------------------------------------------------------

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
CONSTSTR_ID = 3
SUBSTR_ID = 4
REGEX_ID = 5
CONSTPOS_ID = 6
START_ID = 7
END_ID = 8

_REGEX_KINDS = tuple(RegexToken)
_REGEX_BASE = 9
_DELIM_BASE = _REGEX_BASE + len(_REGEX_KINDS)
_INT_BASE = _DELIM_BASE + len(DELIMITERS)
_INT_MIN, _INT_MAX = -MAX_CONST_POSITION, MAX_CONST_POSITION

TOKEN_STRINGS: tuple[str, ...] = (
    ("<pad>", "<bos>", "<eos>", "ConstStr", "SubStr", "Regex", "ConstPos", "Start", "End")
    + tuple(t.value for t in _REGEX_KINDS)
    + tuple(f'"{d}"' for d in DELIMITERS)
    + tuple(str(n) for n in range(_INT_MIN, _INT_MAX + 1))
)
TOKEN_COUNT = len(TOKEN_STRINGS)

_REGEX_ID = {tok: _REGEX_BASE + i for i, tok in enumerate(_REGEX_KINDS)}
_DELIM_ID = {d: _DELIM_BASE + i for i, d in enumerate(DELIMITERS)}


def _int_id(n: int) -> int:
    return _INT_BASE + (n - _INT_MIN)


def _tokenize_position(pos: Position, out: list[int]) -> None:
    if isinstance(pos, ConstPos):
        out.append(CONSTPOS_ID)
        out.append(_int_id(pos.index))
        return
    out.append(REGEX_ID)
    if isinstance(pos.token, RegexToken):
        out.append(_REGEX_ID[pos.token])
    else:
        out.append(_DELIM_ID[pos.token])
    out.append(_int_id(pos.index))
    out.append(START_ID if pos.boundary is Boundary.START else END_ID)


def program_to_tokens(program: Program, t_max: int = DEFAULT_T_MAX) -> TokenSeq:
    """Linearize a program to token ids ending with EOS (BOS is implicit)."""
    out: list[int] = []
    for expr in program.expressions:
        if isinstance(expr, ConstStr):
            out.append(CONSTSTR_ID)
            out.append(_DELIM_ID[expr.value])
        else:
            out.append(SUBSTR_ID)
            _tokenize_position(expr.start, out)
            _tokenize_position(expr.end, out)
    out.append(EOS_ID)
    if len(out) > t_max:
        raise EncodeError(f"program linearizes to {len(out)} tokens, above the cap {t_max}")
    return tuple(out)


class _TokenCursor:
    def __init__(self, ids: Sequence[int]):
        self.ids = ids
        self.at = 0

    def next(self, what: str) -> int:
        if self.at >= len(self.ids):
            raise TokenDecodeError(f"sequence truncated, expected {what}")
        tok = self.ids[self.at]
        self.at += 1
        if not 0 <= tok < TOKEN_COUNT:
            raise TokenDecodeError(f"token id {tok} outside the vocabulary")
        return tok


def _decode_int(tok: int, bound: int, what: str) -> int:
    if not _INT_BASE <= tok < TOKEN_COUNT:
        raise TokenDecodeError(f"expected an integer token for {what}, got {TOKEN_STRINGS[tok]!r}")
    n = (tok - _INT_BASE) + _INT_MIN
    if abs(n) > bound:
        raise TokenDecodeError(f"{what} {n} outside ±{bound}")
    return n


def _decode_position(cur: _TokenCursor) -> Position:
    tok = cur.next("a position constructor")
    if tok == CONSTPOS_ID:
        return ConstPos(_decode_int(cur.next("a position"), MAX_CONST_POSITION, "position"))
    if tok != REGEX_ID:
        raise TokenDecodeError(f"expected Regex or ConstPos, got {TOKEN_STRINGS[tok]!r}")
    rtok = cur.next("a regex token or delimiter")
    if _REGEX_BASE <= rtok < _DELIM_BASE:
        token: Union[RegexToken, str] = _REGEX_KINDS[rtok - _REGEX_BASE]
    elif _DELIM_BASE <= rtok < _INT_BASE:
        token = DELIMITERS[rtok - _DELIM_BASE]
    else:
        raise TokenDecodeError(f"expected a regex token or delimiter, got {TOKEN_STRINGS[rtok]!r}")
    k = _decode_int(cur.next("a match index"), MAX_MATCH_INDEX, "match index")
    btok = cur.next("Start or End")
    if btok not in (START_ID, END_ID):
        raise TokenDecodeError(f"expected Start or End, got {TOKEN_STRINGS[btok]!r}")
    return RegexPos(token, k, Boundary.START if btok == START_ID else Boundary.END)


def tokens_to_program(ids: Sequence[int]) -> Program:
    """Invert `program_to_tokens`; raises TokenDecodeError on anything else.

    Raw decoder output goes through here, so truncation, constructor misuse,
    out-of-range literals, and trailing tokens all surface as errors rather
    than programs.
    """
    cur = _TokenCursor(ids)
    exprs: list[Expression] = []
    while True:
        tok = cur.next("an expression or <eos>")
        if tok == EOS_ID:
            break
        if tok == CONSTSTR_ID:
            dtok = cur.next("a delimiter")
            if not _DELIM_BASE <= dtok < _INT_BASE:
                raise TokenDecodeError(f"expected a delimiter, got {TOKEN_STRINGS[dtok]!r}")
            exprs.append(ConstStr(DELIMITERS[dtok - _DELIM_BASE]))
        elif tok == SUBSTR_ID:
            start = _decode_position(cur)
            end = _decode_position(cur)
            exprs.append(SubStr(start, end))
        else:
            raise TokenDecodeError(f"expected ConstStr or SubStr, got {TOKEN_STRINGS[tok]!r}")
        if len(exprs) > MAX_EXPRESSIONS:
            raise TokenDecodeError(f"more than {MAX_EXPRESSIONS} expressions")
    if cur.at != len(ids):
        raise TokenDecodeError("trailing tokens after <eos>")
    if not exprs:
        raise TokenDecodeError("empty program")
    return Program(tuple(exprs))


# --- character vocabulary ---------------------------------------------------

CHAR_PAD_ID = 0
_CHAR_BASE = 1
_CHAR_MIN, _CHAR_MAX = 0x20, 0x7E
DUMMY_ID = _CHAR_BASE + (_CHAR_MAX - _CHAR_MIN + 1)
FAIL_ID = DUMMY_ID + 1

CHAR_STRINGS: tuple[str, ...] = (
    ("<pad>",)
    + tuple(chr(c) for c in range(_CHAR_MIN, _CHAR_MAX + 1))
    + ("<dummy>", "<fail>")
)
CHAR_COUNT = len(CHAR_STRINGS)


class ExecMarker(enum.Enum):
    """Placeholder for the executed-output slot of a triplet."""

    DUMMY = "dummy"  # first-round encoding: no program executed yet
    FAIL = "fail"    # candidate crashed (exec error) or did not decode


def encode_string(s: str, width: int = IO_WIDTH) -> np.ndarray:
    """Encode printable-ASCII text as char ids right-padded to `width`."""
    if len(s) > width:
        raise EncodeError(f"string of length {len(s)} exceeds width {width}")
    out = np.zeros(width, dtype=np.int32)
    for i, ch in enumerate(s):
        code = ord(ch)
        if not _CHAR_MIN <= code <= _CHAR_MAX:
            raise EncodeError(f"character {ch!r} is not printable ASCII")
        out[i] = _CHAR_BASE + (code - _CHAR_MIN)
    return out


def encode_triplet(
    input_str: str,
    output_str: str,
    exec_out: Union[str, ExecMarker],
    width: int = IO_WIDTH,
) -> np.ndarray:
    """Encode one (input, output, executed output) triple, 3*width wide.

    ExecMarker.DUMMY fills the whole third block; ExecMarker.FAIL sets its
    first slot (rest padding) so a crash stays distinguishable from any
    legitimate output, including the empty string.
    """
    out = np.zeros(3 * width, dtype=np.int32)
    out[:width] = encode_string(input_str, width)
    out[width:2 * width] = encode_string(output_str, width)
    if exec_out is ExecMarker.DUMMY:
        out[2 * width:] = DUMMY_ID
    elif exec_out is ExecMarker.FAIL:
        out[2 * width] = FAIL_ID
    else:
        out[2 * width:] = encode_string(exec_out, width)
    return out


def encode_example_set(
    examples: Iterable[tuple[str, str]],
    exec_outs: Sequence[Union[str, ExecMarker]] | None = None,
    width: int = IO_WIDTH,
) -> np.ndarray:
    """Stack per-example triplets into the (N, 3*width) encoder input."""
    examples = list(examples)
    if exec_outs is None:
        exec_outs = [ExecMarker.DUMMY] * len(examples)
    rows = [
        encode_triplet(i, o, ex, width)
        for (i, o), ex in zip(examples, exec_outs, strict=True)
    ]
    return np.stack(rows)
