"""String-transformation DSL: AST, parser, renderer, and interpreter.

A program is a ``Concat`` of 1..10 expressions. Each expression either emits
a constant string drawn from a small delimiter vocabulary or extracts a
substring of the input between two position expressions. Positions are either
constants (negative values count boundaries from the right) or boundaries of
the k-th match of a regex token / literal delimiter (negative k counts
matches from the right).

Everything here is immutable and side-effect free; the concrete syntax is
function-call style with double-quoted, backslash-escaped string literals,
e.g. ``Concat(SubStr(ConstPos(0), ConstPos(1)), ConstStr(". "))``.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Union

# Grammar bounds. Inputs/outputs are capped at 80 printable-ASCII chars.
MAX_EXPRESSIONS = 10
MAX_MATCH_INDEX = 5     # |k| for Regex positions
MAX_CONST_POSITION = 10  # |n| for ConstPos
MAX_IO_LENGTH = 80


class RegexToken(enum.Enum):
    """Fixed inventory of regex character classes usable in positions."""

    WORD = "Word"
    NUM = "Num"
    ALPHANUM = "Alphanum"
    ALLCAPS = "AllCaps"
    PROPCASE = "PropCase"
    LOWER = "Lower"
    DIGIT = "Digit"
    CHAR = "Char"


_TOKEN_PATTERNS = {
    RegexToken.WORD: re.compile(r"[A-Za-z]+"),
    RegexToken.NUM: re.compile(r"[0-9]+"),
    RegexToken.ALPHANUM: re.compile(r"[A-Za-z0-9]+"),
    RegexToken.ALLCAPS: re.compile(r"[A-Z]+"),
    RegexToken.PROPCASE: re.compile(r"[A-Z][a-z]+"),
    RegexToken.LOWER: re.compile(r"[a-z]+"),
    RegexToken.DIGIT: re.compile(r"[0-9]"),
    RegexToken.CHAR: re.compile(r"\S"),  # any single non-space char
}

# Closed constant/delimiter vocabulary; order is canonical (token ids, CLI
# docs and sampling all follow it). Includes ". " and " : " so the worked
# name-and-phone example is expressible.
DELIMITERS = (" ", ".", ". ", ",", ", ", "-", ":", " : ", ";", "/", "(", ")", "@")
_DELIMITER_SET = frozenset(DELIMITERS)


class Boundary(enum.Enum):
    START = "Start"
    END = "End"


class ExecErrorKind(enum.Enum):
    NO_SUCH_MATCH = "NoSuchMatch"
    POSITION_OUT_OF_RANGE = "PositionOutOfRange"
    EMPTY_OR_INVERTED_SUBSTRING = "EmptyOrInvertedSubstring"
    ZERO_MATCH_INDEX = "ZeroMatchIndex"


class ExecError(Exception):
    """Raised by execution only; grammatical programs never fail to parse.

    ``expr_index`` is the index of the failing top-level expression once the
    error has propagated out of `execute` (None inside `eval_position`).
    """

    def __init__(self, kind: ExecErrorKind, expr_index: int | None = None):
        self.kind = kind
        self.expr_index = expr_index
        loc = "" if expr_index is None else f" at expression {expr_index}"
        super().__init__(f"{kind.value}{loc}")


class ParseError(Exception):
    """Syntax or vocabulary violation, with byte offset into the source."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at offset {offset})")


def _check_delimiter(value: str) -> None:
    if value not in _DELIMITER_SET:
        raise ValueError(f"{value!r} is not in the delimiter vocabulary")


@dataclass(frozen=True)
class RegexPos:
    """Boundary of the k-th match of `token` (k<0 counts from the end).

    k = 0 is grammatical but always fails at execution time.
    """

    token: Union[RegexToken, str]
    index: int
    boundary: Boundary

    def __post_init__(self):
        if isinstance(self.token, str):
            _check_delimiter(self.token)
        if abs(self.index) > MAX_MATCH_INDEX:
            raise ValueError(f"match index {self.index} outside ±{MAX_MATCH_INDEX}")


@dataclass(frozen=True)
class ConstPos:
    """Fixed boundary index; n < 0 addresses len(input) + n + 1."""

    index: int

    def __post_init__(self):
        if abs(self.index) > MAX_CONST_POSITION:
            raise ValueError(f"position {self.index} outside ±{MAX_CONST_POSITION}")


Position = Union[RegexPos, ConstPos]


@dataclass(frozen=True)
class ConstStr:
    value: str

    def __post_init__(self):
        _check_delimiter(self.value)


@dataclass(frozen=True)
class SubStr:
    start: Position
    end: Position


Expression = Union[ConstStr, SubStr]


@dataclass(frozen=True)
class Program:
    """Top-level concatenation of 1..10 expressions."""

    expressions: tuple[Expression, ...]

    def __post_init__(self):
        if not isinstance(self.expressions, tuple):
            object.__setattr__(self, "expressions", tuple(self.expressions))
        n = len(self.expressions)
        if not 1 <= n <= MAX_EXPRESSIONS:
            raise ValueError(f"program must have 1..{MAX_EXPRESSIONS} expressions, got {n}")


def program_length(program: Program) -> int:
    """Number of top-level expressions (the reported length measure)."""
    return len(program.expressions)


def regex_matches(token: Union[RegexToken, str], text: str) -> list[tuple[int, int]]:
    """Leftmost, non-overlapping, maximal-munch matches as (start, end) pairs.

    For a delimiter string, returns literal occurrences scanned left to right
    without overlap. Always sorted by start; empty list when nothing matches.
    """
    if isinstance(token, RegexToken):
        return [m.span() for m in _TOKEN_PATTERNS[token].finditer(text)]
    _check_delimiter(token)
    spans = []
    pos = 0
    while True:
        found = text.find(token, pos)
        if found < 0:
            return spans
        pos = found + len(token)
        spans.append((found, pos))


def eval_position(pos: Position, text: str) -> int:
    """Resolve a position expression to a boundary index in [0, len(text)].

    Raises ExecError (NO_SUCH_MATCH, ZERO_MATCH_INDEX, POSITION_OUT_OF_RANGE)
    when the position does not exist on this input.
    """
    if isinstance(pos, ConstPos):
        n = pos.index
        resolved = n if n >= 0 else len(text) + n + 1
        if not 0 <= resolved <= len(text):
            raise ExecError(ExecErrorKind.POSITION_OUT_OF_RANGE)
        return resolved
    k = pos.index
    if k == 0:
        raise ExecError(ExecErrorKind.ZERO_MATCH_INDEX)
    spans = regex_matches(pos.token, text)
    if abs(k) > len(spans):
        raise ExecError(ExecErrorKind.NO_SUCH_MATCH)
    span = spans[k - 1] if k > 0 else spans[len(spans) + k]
    return span[0] if pos.boundary is Boundary.START else span[1]


def execute(program: Program, text: str) -> str:
    """Run the program on one input string.

    Expression values are concatenated in order; the first failing expression
    aborts with an ExecError carrying its index. A substring whose boundaries
    collapse or invert (start >= end) is an error, not the empty string.
    """
    parts = []
    for i, expr in enumerate(program.expressions):
        if isinstance(expr, ConstStr):
            parts.append(expr.value)
            continue
        try:
            lo = eval_position(expr.start, text)
            hi = eval_position(expr.end, text)
        except ExecError as err:
            raise ExecError(err.kind, expr_index=i) from None
        if lo >= hi:
            raise ExecError(ExecErrorKind.EMPTY_OR_INVERTED_SUBSTRING, expr_index=i)
        parts.append(text[lo:hi])
    return "".join(parts)


# --- concrete syntax -------------------------------------------------------

def _escape(value: str) -> str:
    return value.replace("\\", "\\\\").replace('"', '\\"')


def _render_pos(pos: Position) -> str:
    if isinstance(pos, ConstPos):
        return f"ConstPos({pos.index})"
    tok = pos.token.value if isinstance(pos.token, RegexToken) else f'"{_escape(pos.token)}"'
    return f"Regex({tok}, {pos.index}, {pos.boundary.value})"


def render(program: Program) -> str:
    """Canonical single-line text; `parse(render(p))` equals `p`."""
    parts = []
    for expr in program.expressions:
        if isinstance(expr, ConstStr):
            parts.append(f'ConstStr("{_escape(expr.value)}")')
        else:
            parts.append(f"SubStr({_render_pos(expr.start)}, {_render_pos(expr.end)})")
    return f"Concat({', '.join(parts)})"


_IDENT_RE = re.compile(r"[A-Za-z]+")
_INT_RE = re.compile(r"-?[0-9]+")
_TOKEN_BY_NAME = {t.value: t for t in RegexToken}


class _Scanner:
    """Whitespace-insensitive tokenizer over the program surface syntax."""

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def _skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos] in " \t\r\n":
            self.pos += 1

    def peek(self) -> tuple[str, str, int]:
        """Return (kind, value, offset) of the next token without consuming."""
        self._skip_ws()
        at = self.pos
        if at >= len(self.text):
            return ("eof", "", at)
        ch = self.text[at]
        if ch in "(),":
            return ({"(": "lparen", ")": "rparen", ",": "comma"}[ch], ch, at)
        if ch == '"':
            value, _ = self._scan_string(at)
            return ("string", value, at)
        m = _INT_RE.match(self.text, at)
        if m and (ch == "-" or ch.isdigit()):
            return ("int", m.group(), at)
        m = _IDENT_RE.match(self.text, at)
        if m:
            return ("ident", m.group(), at)
        raise ParseError(f"unexpected character {ch!r}", at)

    def next(self) -> tuple[str, str, int]:
        kind, value, at = self.peek()
        if kind == "string":
            _, end = self._scan_string(at)
            self.pos = end
        elif kind != "eof":
            self.pos = at + len(value)
        return (kind, value, at)

    def _scan_string(self, at: int) -> tuple[str, int]:
        chars = []
        i = at + 1
        while i < len(self.text):
            ch = self.text[i]
            if ch == '"':
                return ("".join(chars), i + 1)
            if ch == "\\":
                if i + 1 >= len(self.text) or self.text[i + 1] not in '"\\':
                    raise ParseError("bad escape in string literal", i)
                chars.append(self.text[i + 1])
                i += 2
            else:
                chars.append(ch)
                i += 1
        raise ParseError("unterminated string literal", at)

    def expect(self, kind: str, what: str) -> tuple[str, int]:
        got_kind, value, at = self.next()
        if got_kind != kind:
            raise ParseError(f"expected {what}, found {value or 'end of input'!r}", at)
        return value, at


def parse(text: str) -> Program:
    """Parse program text, enforcing the closed vocabularies and ranges.

    Raises ParseError with a byte offset and an expected-token description.
    Note k = 0 is accepted here (the grammar lists it) and only fails when
    executed.
    """
    sc = _Scanner(text)
    name, at = sc.expect("ident", "'Concat'")
    if name != "Concat":
        raise ParseError(f"expected 'Concat', found {name!r}", at)
    sc.expect("lparen", "'('")
    exprs = [_parse_expression(sc)]
    while True:
        kind, value, at = sc.next()
        if kind == "rparen":
            break
        if kind != "comma":
            raise ParseError(f"expected ',' or ')', found {value or 'end of input'!r}", at)
        exprs.append(_parse_expression(sc))
    kind, value, at = sc.next()
    if kind != "eof":
        raise ParseError(f"expected end of input, found {value!r}", at)
    if len(exprs) > MAX_EXPRESSIONS:
        raise ParseError(f"Concat takes at most {MAX_EXPRESSIONS} expressions", 0)
    return Program(tuple(exprs))


def _parse_expression(sc: _Scanner) -> Expression:
    kind, name, at = sc.next()
    if kind != "ident" or name not in ("ConstStr", "SubStr"):
        raise ParseError(f"expected 'ConstStr' or 'SubStr', found {name or 'end of input'!r}", at)
    sc.expect("lparen", "'('")
    if name == "ConstStr":
        value, at = sc.expect("string", "a string literal")
        if value not in _DELIMITER_SET:
            raise ParseError(f"{value!r} is not in the constant-string vocabulary", at)
        sc.expect("rparen", "')'")
        return ConstStr(value)
    p1 = _parse_position(sc)
    sc.expect("comma", "','")
    p2 = _parse_position(sc)
    sc.expect("rparen", "')'")
    return SubStr(p1, p2)


def _parse_int(sc: _Scanner, bound: int, what: str) -> int:
    value, at = sc.expect("int", what)
    n = int(value)
    if abs(n) > bound:
        raise ParseError(f"{what} {n} outside ±{bound}", at)
    return n


def _parse_position(sc: _Scanner) -> Position:
    kind, name, at = sc.next()
    if kind != "ident" or name not in ("Regex", "ConstPos"):
        raise ParseError(f"expected 'Regex' or 'ConstPos', found {name or 'end of input'!r}", at)
    sc.expect("lparen", "'('")
    if name == "ConstPos":
        n = _parse_int(sc, MAX_CONST_POSITION, "position")
        sc.expect("rparen", "')'")
        return ConstPos(n)
    kind, value, at = sc.next()
    if kind == "ident":
        token: Union[RegexToken, str] | None = _TOKEN_BY_NAME.get(value)
        if token is None:
            raise ParseError(f"unknown regex token {value!r}", at)
    elif kind == "string":
        if value not in _DELIMITER_SET:
            raise ParseError(f"{value!r} is not in the delimiter vocabulary", at)
        token = value
    else:
        raise ParseError(f"expected a regex token or delimiter, found {value or 'end of input'!r}", at)
    sc.expect("comma", "','")
    k = _parse_int(sc, MAX_MATCH_INDEX, "match index")
    sc.expect("comma", "','")
    bname, at = sc.expect("ident", "'Start' or 'End'")
    if bname not in ("Start", "End"):
        raise ParseError(f"expected 'Start' or 'End', found {bname!r}", at)
    sc.expect("rparen", "')'")
    return RegexPos(token, k, Boundary.START if bname == "Start" else Boundary.END)
