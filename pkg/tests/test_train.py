"""Training-loop, checkpoint, and evaluation tests."""

import dataclasses
import json

import numpy as np
import pytest

from pbefix import train as train_mod
from pbefix.autodiff import Tape, Tensor
from pbefix.model import ModelConfig, batch_task_loss
from pbefix.search import SearchConfig
from pbefix.taskgen import GenConfig, generate_tasks
from pbefix.train import (
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    eval_corpus,
    evaluate,
    init_state,
    load_checkpoint,
    lr_at,
    run_method,
    save_checkpoint,
    train,
    train_config_from_dict,
    train_config_to_dict,
)

TINY_MODEL = ModelConfig(hidden=16, e_char=4, e_tok=8, t_max=32, io_width=30)
TINY_GEN = GenConfig(max_expressions=2, max_io_len=30, seed=7)


def tiny_config(**overrides) -> TrainConfig:
    base = dict(batch_size=4, steps=6, eval_every=3, eval_tasks=6,
                model=TINY_MODEL, gen=TINY_GEN,
                search=SearchConfig(s=3, inner_beam=3))
    base.update(overrides)
    return TrainConfig(**base)


# --- config -------------------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ValueError, match="batch_size"):
        tiny_config(batch_size=0)
    with pytest.raises(ValueError, match="steps"):
        tiny_config(steps=0)
    with pytest.raises(ValueError, match="eval_every"):
        tiny_config(eval_every=0)


def test_train_config_json_round_trip():
    cfg = tiny_config(gen=GenConfig(max_expressions=3, max_io_len=30, seed=2,
                                    length_distribution=(0.0, 1.0, 2.0)))
    encoded = json.dumps(train_config_to_dict(cfg))
    assert train_config_from_dict(json.loads(encoded)) == cfg


# --- learning signal ------------------------------------------------------------

def test_loss_on_frozen_probe_batch_decreases():
    cfg = tiny_config(batch_size=16, steps=200, eval_every=1000,
                      model=ModelConfig(hidden=32, e_char=8, e_tok=16,
                                        t_max=32, io_width=30))
    probe = eval_corpus(cfg, 16)

    def probe_loss(store):
        loss, _ = batch_task_loss(store.tensors(Tape()), cfg.model, probe)
        return float(loss.data)

    state = init_state(cfg)
    before = probe_loss(state.store)
    result = train(cfg, "/tmp/pbefix-test-frozen", state=state)
    after = probe_loss(result.state.store)
    assert after < before * 0.8
    # smoothed training loss trends down as well
    first, last = result.losses[:50], result.losses[-50:]
    assert sum(last) / 50 < sum(first) / 50


def test_train_determinism(tmp_path):
    a = train(tiny_config(), tmp_path / "a")
    b = train(tiny_config(), tmp_path / "b")
    assert a.losses == b.losses
    assert a.metrics == b.metrics
    for name in a.state.store.names():
        assert np.array_equal(a.state.store[name], b.state.store[name])


def test_lr_schedule_endpoints_and_monotonicity():
    constant = tiny_config(steps=100)
    assert lr_at(constant, 0) == lr_at(constant, 99) == constant.lr

    cfg = tiny_config(steps=100, lr=1e-3, lr_final=1e-4)
    assert lr_at(cfg, 0) == 1e-3
    assert lr_at(cfg, 50) == pytest.approx((1e-3 + 1e-4) / 2)
    assert lr_at(cfg, 100) == pytest.approx(1e-4)
    rates = [lr_at(cfg, s) for s in range(101)]
    assert rates == sorted(rates, reverse=True)


def test_lr_final_above_lr_rejected():
    with pytest.raises(ValueError, match="lr_final"):
        tiny_config(lr=1e-3, lr_final=2e-3)


def test_lr_schedule_survives_checkpoint_round_trip(tmp_path):
    cfg = tiny_config(steps=6, lr_final=1e-4)
    result = train(cfg, tmp_path)
    state = load_checkpoint(tmp_path / "checkpoint")
    assert state.config.lr_final == 1e-4
    # the restored config reproduces the remaining schedule exactly
    assert lr_at(state.config, 5) == lr_at(cfg, 5)
    assert result.state.step == 6


def test_resume_is_bitwise_identical(tmp_path):
    cfg6 = tiny_config(steps=6)
    full = train(cfg6, tmp_path / "full")

    cfg3 = dataclasses.replace(cfg6, steps=3)
    train(cfg3, tmp_path / "half")
    state = load_checkpoint(tmp_path / "half" / "checkpoint")
    state.config = cfg6
    resumed = train(cfg6, tmp_path / "resumed", state=state)

    assert resumed.state.step == full.state.step
    assert resumed.state.task_counter == full.state.task_counter
    for name in full.state.store.names():
        assert np.array_equal(full.state.store[name],
                              resumed.state.store[name])
        assert np.array_equal(full.state.store.m[name],
                              resumed.state.store.m[name])
    assert full.metrics[-1] == resumed.metrics[-1]


def test_training_diverged_after_skip_streak(tmp_path, monkeypatch):
    def bad_loss(params, model, tasks, frozen_exec_outs=None):
        return Tensor(np.array(np.inf, dtype=np.float32)), None

    monkeypatch.setattr(train_mod, "batch_task_loss", bad_loss)
    cfg = tiny_config(batch_size=1, steps=500, eval_every=1000)
    with pytest.raises(TrainingDiverged, match="100 consecutive"):
        train(cfg, tmp_path / "div")


# --- metrics log -----------------------------------------------------------------

def test_metrics_jsonl_schema(tmp_path):
    result = train(tiny_config(), tmp_path / "m")
    lines = (tmp_path / "m" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == len(result.metrics) == 2
    for line in lines:
        record = json.loads(line)
        assert set(record) == {"step", "loss", "greedy_acc", "beam_acc",
                               "fixer_acc"}


# --- checkpoints ----------------------------------------------------------------

def test_checkpoint_save_load_save_identical_bytes(tmp_path):
    state = train(tiny_config(), tmp_path / "run").state
    p1, p2 = tmp_path / "c1", tmp_path / "c2"
    save_checkpoint(state, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    for name in ("manifest.json", "params.bin", "opt.bin"):
        assert (p1 / name).read_bytes() == (p2 / name).read_bytes()


def test_checkpoint_restores_counters(tmp_path):
    state = train(tiny_config(), tmp_path / "run").state
    loaded = load_checkpoint(tmp_path / "run" / "checkpoint")
    assert loaded.step == state.step
    assert loaded.task_counter == state.task_counter
    assert loaded.config == state.config
    assert loaded.store.step_count == state.store.step_count


def test_checkpoint_token_vocab_mismatch_names_first_token(tmp_path):
    state = init_state(tiny_config())
    path = tmp_path / "ck"
    save_checkpoint(state, path)
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["token_vocab"][17] = "<bogus>"
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))
    with pytest.raises(CheckpointError, match=r"id 17.*'<bogus>'"):
        load_checkpoint(path)


def test_checkpoint_char_vocab_size_mismatch(tmp_path):
    state = init_state(tiny_config())
    path = tmp_path / "ck"
    save_checkpoint(state, path)
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["char_vocab"].append("extra")
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))
    with pytest.raises(CheckpointError, match="char vocab size"):
        load_checkpoint(path)


def test_checkpoint_truncated_params_blob(tmp_path):
    state = init_state(tiny_config())
    path = tmp_path / "ck"
    save_checkpoint(state, path)
    blob = (path / "params.bin").read_bytes()
    (path / "params.bin").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch_names_param(tmp_path):
    state = init_state(tiny_config())
    path = tmp_path / "ck"
    save_checkpoint(state, path)
    manifest = json.loads((path / "manifest.json").read_text())
    entry = next(p for p in manifest["params"] if p["name"] == "dec.out.w")
    entry["shape"] = [1, 1]
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))
    with pytest.raises(CheckpointError, match="dec.out.w"):
        load_checkpoint(path)


# --- evaluation ------------------------------------------------------------------

def test_evaluate_overfit_model_perfect_on_its_task(overfit_setup):
    s = overfit_setup
    search = SearchConfig(s=5, inner_beam=5)
    for method in ("greedy", "beam", "fixer"):
        report = evaluate(s.store, s.config, [s.task], search, method)
        assert report.accuracy == 1.0
        assert report.mean_steps == 1.0
        assert report.by_length == {1: (1, 1)}


def test_evaluate_untrained_params_near_zero():
    cfg = tiny_config(gen=GenConfig(max_expressions=3, max_io_len=30, seed=9,
                                    length_distribution=(0.0, 1.0, 1.0)))
    state = init_state(cfg)
    tasks = eval_corpus(cfg, 60)
    report = evaluate(state.store, cfg.model, tasks, cfg.search, "greedy")
    assert report.accuracy < 0.05


def test_evaluate_greedy_not_above_beam(overfit_setup):
    s = overfit_setup
    tasks = [s.task] + generate_tasks(
        GenConfig(max_expressions=2, max_io_len=30, seed=77), 10,
        domain="eval")
    search = SearchConfig(s=4, inner_beam=4)
    greedy = evaluate(s.store, s.config, tasks, search, "greedy")
    beam = evaluate(s.store, s.config, tasks, search, "beam")
    assert greedy.solved <= beam.solved
    assert beam.solved >= 1  # the memorized task stays solved


def test_eval_stream_disjoint_from_train_stream():
    cfg = tiny_config()
    train_batch = generate_tasks(cfg.gen, 5, domain="train", start=0)
    eval_batch = generate_tasks(cfg.gen, 5, domain="eval", start=0)
    assert [t.program for t in train_batch] != [t.program for t in eval_batch]


def test_run_method_rejects_unknown(overfit_setup):
    s = overfit_setup
    with pytest.raises(ValueError, match="unknown method"):
        run_method(s.store, s.config, [s.task], SearchConfig(), "magic")
