"""Shared fixtures. The overfit fixture is deliberately session-scoped:
several modules (model, search, cli) need a model that reliably solves one
known task, and 500 optimizer steps are worth paying for once."""

from types import SimpleNamespace

import numpy as np
import pytest

from pbefix.autodiff import Tape, adam_step
from pbefix.model import ModelConfig, batch_task_loss, init_params
from pbefix.taskgen import GenConfig, generate_tasks


def collect_grads(store, params):
    return {
        name: (params[name].grad if params[name].grad is not None
               else np.zeros_like(store[name]))
        for name in store.names()
    }


@pytest.fixture(scope="session")
def overfit_setup():
    """A small model trained 500 steps on one fixed task."""
    config = ModelConfig(hidden=32, e_char=8, e_tok=16, t_max=32, io_width=30)
    task = generate_tasks(
        GenConfig(max_expressions=2, max_io_len=30, seed=11), 1)[0]
    store = init_params(config, seed=0)
    losses = []
    for _ in range(500):
        tape = Tape()
        params = store.tensors(tape)
        loss, _ = batch_task_loss(params, config, [task])
        tape.backward(loss)
        adam_step(store, collect_grads(store, params), lr=1e-2)
        losses.append(float(loss.data))
    return SimpleNamespace(config=config, store=store, task=task,
                           losses=losses)


@pytest.fixture(scope="session")
def overfit_checkpoint(tmp_path_factory, overfit_setup):
    """The overfit model saved as a real checkpoint directory."""
    from pbefix.search import SearchConfig
    from pbefix.train import TrainConfig, TrainState, save_checkpoint

    cfg = TrainConfig(
        batch_size=1, steps=500, eval_every=500, eval_tasks=1, seed=0,
        model=overfit_setup.config,
        gen=GenConfig(max_expressions=2, max_io_len=30, seed=11),
        search=SearchConfig(s=3, inner_beam=3),
    )
    state = TrainState(cfg, overfit_setup.store, step=500, task_counter=500)
    path = tmp_path_factory.mktemp("overfit") / "checkpoint"
    save_checkpoint(state, path)
    return SimpleNamespace(path=path, task=overfit_setup.task,
                           config=cfg)
