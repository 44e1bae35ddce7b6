"""Scikit-learn style facade over training and synthesis.

`ProgramSynthesizer` follows the estimator contract: constructor arguments
are stored verbatim, `fit` trains a model on internally generated tasks and
sets trailing-underscore attributes, `predict` maps example sets to program
text (or None when the search budget is exhausted), and `score` reports the
solved fraction. `from_checkpoint` wraps an already-trained checkpoint in a
fitted estimator.

A sample is one example set: a sequence of (input, output) string pairs.
The encoder wants exactly `examples` pairs per set; fewer are padded by
repeating the last pair (max-pooling over the set makes exact duplicates
semantically neutral), more than `examples` is an error.
"""

from __future__ import annotations

import tempfile
from pathlib import Path
from typing import Sequence

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .model import ModelConfig
from .search import (
    FixTrace,
    SearchConfig,
    run_beam_baseline,
    run_fixer_search,
)
from .taskgen import GenConfig
from .train import TrainConfig, load_checkpoint, train

ExampleSet = Sequence[tuple[str, str]]

_METHODS = ("beam", "fixer")


def pad_examples(pairs: ExampleSet, n: int) -> tuple[tuple[str, str], ...]:
    """Exactly n pairs: fewer repeat the last pair, more is an error."""
    pairs = tuple((str(i), str(o)) for i, o in pairs)
    if not pairs:
        raise ValueError("need at least one example pair")
    if len(pairs) > n:
        raise ValueError(f"at most {n} example pairs supported, "
                         f"got {len(pairs)}")
    return pairs + (pairs[-1],) * (n - len(pairs))


class ProgramSynthesizer(BaseEstimator):
    """Learns to synthesize string-transformation programs from examples.

    fit() trains the seq2seq model on freshly sampled tasks; predict() runs
    the configured search per example set and returns the first program that
    reproduces every given output (rendered as text), or None within budget.
    """

    def __init__(self, method="fixer", steps=50000, batch_size=128,
                 lr=1e-3, lr_final=None, clip_norm=5.0, eval_every=2500,
                 eval_tasks=200, hidden=64, e_char=16, e_tok=32, t_max=128,
                 io_width=80, max_expressions=10, max_io_len=80,
                 length_distribution=None, s=10, inner_beam=10, seed=0,
                 out_dir=None):
        self.method = method
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.lr_final = lr_final
        self.clip_norm = clip_norm
        self.eval_every = eval_every
        self.eval_tasks = eval_tasks
        self.hidden = hidden
        self.e_char = e_char
        self.e_tok = e_tok
        self.t_max = t_max
        self.io_width = io_width
        self.max_expressions = max_expressions
        self.max_io_len = max_io_len
        self.length_distribution = length_distribution
        self.s = s
        self.inner_beam = inner_beam
        self.seed = seed
        self.out_dir = out_dir

    # -- configuration plumbing --------------------------------------------

    def _train_config(self) -> TrainConfig:
        dist = self.length_distribution
        return TrainConfig(
            batch_size=self.batch_size,
            steps=self.steps,
            eval_every=self.eval_every,
            eval_tasks=self.eval_tasks,
            seed=self.seed,
            lr=self.lr,
            lr_final=self.lr_final,
            clip_norm=self.clip_norm,
            model=ModelConfig(hidden=self.hidden, e_char=self.e_char,
                              e_tok=self.e_tok, t_max=self.t_max,
                              io_width=self.io_width),
            gen=GenConfig(max_expressions=self.max_expressions,
                          max_io_len=self.max_io_len, seed=self.seed,
                          length_distribution=None if dist is None
                          else tuple(dist)),
            search=SearchConfig(s=self.s, inner_beam=self.inner_beam),
        )

    def _check_method(self) -> str:
        if self.method not in _METHODS:
            raise ValueError(f"method must be one of {_METHODS}, "
                             f"got {self.method!r}")
        return self.method

    # -- estimator API ------------------------------------------------------

    def fit(self, X=None, y=None):
        """Train on internally sampled tasks; X and y are ignored.

        The training corpus is generated from the configured task
        distribution, so unlike most estimators there is nothing to pass in.
        """
        self._check_method()
        config = self._train_config()
        if self.out_dir is None:
            with tempfile.TemporaryDirectory(prefix="pbefix-fit-") as tmp:
                result = train(config, tmp)
        else:
            result = train(config, self.out_dir)
        self.state_ = result.state
        self.store_ = result.state.store
        self.model_ = config.model
        self.search_ = config.search
        self.metrics_ = result.metrics
        return self

    @classmethod
    def from_checkpoint(cls, path: str | Path, method: str = "fixer"
                        ) -> "ProgramSynthesizer":
        """A fitted estimator around an existing training checkpoint."""
        state = load_checkpoint(path)
        config = state.config
        est = cls(method=method, steps=config.steps,
                  batch_size=config.batch_size, lr=config.lr,
                  lr_final=config.lr_final,
                  clip_norm=config.clip_norm, eval_every=config.eval_every,
                  eval_tasks=config.eval_tasks, hidden=config.model.hidden,
                  e_char=config.model.e_char, e_tok=config.model.e_tok,
                  t_max=config.model.t_max, io_width=config.model.io_width,
                  max_expressions=config.gen.max_expressions,
                  max_io_len=config.gen.max_io_len,
                  length_distribution=config.gen.length_distribution,
                  s=config.search.s, inner_beam=config.search.inner_beam,
                  seed=config.seed)
        est.state_ = state
        est.store_ = state.store
        est.model_ = config.model
        est.search_ = config.search
        est.metrics_ = []
        return est

    def _require_fitted(self):
        if not hasattr(self, "store_"):
            raise NotFittedError(
                "this ProgramSynthesizer is not fitted yet; call fit() or "
                "ProgramSynthesizer.from_checkpoint()")

    def solve(self, pairs: ExampleSet) -> FixTrace:
        """Full search trace for one example set (padded to the model's N)."""
        self._require_fitted()
        method = self._check_method()
        padded = pad_examples(pairs, self.model_.examples)
        params = self.store_.tensors(None)
        runner = run_fixer_search if method == "fixer" else run_beam_baseline
        return runner(params, self.model_, padded, self.search_)

    def predict(self, X: Sequence[ExampleSet]) -> list:
        """Program text per example set, None where the budget ran out."""
        out = []
        for pairs in X:
            trace = self.solve(pairs)
            solved_at = trace.solved_at
            out.append(None if solved_at is None
                       else trace.steps[solved_at - 1].program)
        return out

    def score(self, X: Sequence[ExampleSet], y=None) -> float:
        """Fraction of example sets solved (y is ignored: the targets are
        the output strings already inside each example set)."""
        predictions = self.predict(X)
        return sum(p is not None for p in predictions) / len(predictions)
