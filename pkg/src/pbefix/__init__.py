"""Programming-by-example string transformation synthesis with a neural fixer."""

from pbefix.dsl import (
    Boundary,
    ConstPos,
    ConstStr,
    ExecError,
    ParseError,
    Program,
    RegexPos,
    RegexToken,
    SubStr,
    execute,
    parse,
    program_length,
    render,
)

__version__ = "0.1.0"

__all__ = [
    "Boundary",
    "ConstPos",
    "ConstStr",
    "ExecError",
    "ParseError",
    "Program",
    "ProgramSynthesizer",
    "RegexPos",
    "RegexToken",
    "SubStr",
    "execute",
    "parse",
    "program_length",
    "render",
]


def __getattr__(name):
    # Deferred so that importing the DSL never pulls in numpy/sklearn.
    if name == "ProgramSynthesizer":
        from pbefix.estimator import ProgramSynthesizer

        return ProgramSynthesizer
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
