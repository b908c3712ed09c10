import json
import math

import numpy as np
import pytest

from posmask import numerics as nx
from posmask import training
from posmask.checkpoint import load_checkpoint, save_checkpoint
from posmask.masking import MaskConfig
from posmask.model import system_config
from posmask.synthetic import layout_corpus
from posmask.training import (
    AdamState, NonFiniteError, TrainConfig, TrainingHalted, adamw_step, clip_gradients,
    linear_schedule, pretrain, RunLog,
)

TINY = dict(hidden_size=16, num_layers=1, num_heads=2, max_seq_len=16, grid_max=100)


def test_train_config_invariants():
    for bad in (dict(learning_rate=0), dict(batch_size=0), dict(grad_clip_norm=0), dict(objective="x")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    c = TrainConfig()
    assert (c.learning_rate, c.weight_decay, c.epochs, c.grad_clip_norm) == (5e-5, 0.0, 6, 1.0)


def test_linear_schedule():
    assert linear_schedule(0, 100, 5e-5) == 5e-5
    assert linear_schedule(100, 100, 5e-5) == 0.0
    assert linear_schedule(50, 100, 5e-5) == pytest.approx(2.5e-5, abs=0)
    with pytest.raises(ValueError):
        linear_schedule(0, 0, 1.0)


def test_clip_gradients():
    g = {"a": np.array([0.3, 0.4])}
    out, norm = clip_gradients(g, 1.0)
    assert norm == pytest.approx(0.5) and np.array_equal(out["a"], g["a"])
    g = {"a": np.array([2.0, 2.0]), "b": np.array([[2.0, 2.0]])}
    out, norm = clip_gradients(g, 1.0)
    assert norm == pytest.approx(4.0)
    np.testing.assert_allclose(out["a"], 0.25 * g["a"], rtol=1e-15)
    assert training.global_norm(out) == pytest.approx(1.0, abs=1e-9)
    flat = np.concatenate([out["a"], out["b"].ravel()])
    ref = np.concatenate([g["a"], g["b"].ravel()])
    assert flat @ ref / (np.linalg.norm(flat) * np.linalg.norm(ref)) == pytest.approx(1.0, abs=1e-15)


def test_adamw_hand_recurrence():
    cfg = TrainConfig(learning_rate=0.1)
    p = {"w": np.array([1.0])}
    state = AdamState.zeros(p)
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    w, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate([0.5, -1.5], start=1):
        p, state = adamw_step(p, {"w": np.array([g])}, state, lr, cfg)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    assert p["w"][0] == pytest.approx(w, abs=1e-15)
    assert state.step == 2


def test_adamw_zero_gradient_and_determinism():
    cfg = TrainConfig()
    p = {"w": np.arange(3.0)}
    s = AdamState.zeros(p)
    out, _ = adamw_step(p, {"w": np.zeros(3)}, s, 1e-3, cfg)
    assert np.array_equal(out["w"], p["w"])
    g = {"w": np.array([0.1, -0.2, 0.3])}
    a, _ = adamw_step(p, g, s, 1e-3, cfg)
    b, _ = adamw_step(p, g, s, 1e-3, cfg)
    assert a["w"].tobytes() == b["w"].tobytes()


def test_adamw_weight_decay_skips_exempt_names():
    cfg = TrainConfig(weight_decay=0.1)
    p = {"w": np.array([1.0]), "ln.bias": np.array([1.0])}
    out, _ = adamw_step(p, {k: np.zeros(1) for k in p}, AdamState.zeros(p), 0.5, cfg)
    assert out["w"][0] == pytest.approx(0.95) and out["ln.bias"][0] == 1.0


def test_adamw_rejects_non_finite():
    p = {"w": np.zeros(2)}
    with pytest.raises(NonFiniteError, match="w"):
        adamw_step(p, {"w": np.array([np.nan, 0])}, AdamState.zeros(p), 1e-3, TrainConfig())


def _run(vocab, system, tmp=None, steps=12, **train):
    pages = layout_corpus(6, vocab, m=100, tokens_per_page=10, seed=1)
    cfg = system_config(system, vocab_size=len(vocab), **TINY)
    mc = MaskConfig(variant=cfg.pm_variant)
    tc = TrainConfig(learning_rate=1e-3, batch_size=4, max_steps=steps, **train)
    return pretrain(pages, vocab, cfg, mc, tc, out_dir=tmp)


def test_runlog_schedule_and_clipping(vocab, tmp_path):
    res = _run(vocab, "x1_ce", tmp_path, steps=10)
    steps = res.runlog.steps()
    assert [r["step"] for r in steps] == list(range(10))
    assert [r["lr"] for r in steps] == [linear_schedule(i, 10, 1e-3) for i in range(10)]
    assert res.runlog.records[-1]["type"] == "end" and res.runlog.records[-1]["lr"] == 0.0
    assert all(r["grad_norm"] <= 1.0 + 1e-6 for r in steps)
    assert RunLog.read(tmp_path / "runlog.jsonl") == json.loads(json.dumps(res.runlog.records))
    assert res.runlog.records[0]["type"] == "config"
    for name in ("init.npz", "best.npz", "final.npz", "checkpoint-epoch000.npz"):
        assert (tmp_path / name).exists()


def test_pretrain_is_deterministic(vocab, tmp_path):
    _run(vocab, "full_reg", tmp_path / "a")
    _run(vocab, "full_reg", tmp_path / "b")
    assert (tmp_path / "a/final.npz").read_bytes() == (tmp_path / "b/final.npz").read_bytes()


def test_lambda_zero_equals_mlm_only(vocab):
    from dataclasses import replace
    pages = layout_corpus(6, vocab, m=100, tokens_per_page=10, seed=1)
    cfg = system_config("full_ce", vocab_size=len(vocab), **TINY)
    mc = MaskConfig(variant="full")
    tc = TrainConfig(learning_rate=1e-3, batch_size=4, max_steps=8)
    a = pretrain(pages, vocab, replace(cfg, lam=0.0), mc, tc)
    b = pretrain(pages, vocab, cfg, mc, replace(tc, objective="mlm"))
    assert any(r["loss_pm"] > 0 for r in a.runlog.steps())
    for k in a.params:
        assert a.params[k].value.tobytes() == b.params[k].value.tobytes(), k


def test_non_finite_loss_halts_with_last_checkpoint(vocab, tmp_path, monkeypatch):
    real = training.pretrain_losses
    calls = {"n": 0}

    def flaky(*args, **kw):
        calls["n"] += 1
        mlm, pm = real(*args, **kw)
        return (nx.constant(np.nan), pm) if calls["n"] == 4 else (mlm, pm)

    monkeypatch.setattr(training, "pretrain_losses", flaky)
    with pytest.raises(TrainingHalted) as info:
        _run(vocab, "baseline", tmp_path, steps=10)
    # two steps per epoch: step 3 fails, so epoch 0 is the last completed one
    assert info.value.last_checkpoint.name == "checkpoint-epoch000.npz"


def test_empty_corpus_and_vocab_mismatch(vocab):
    cfg = system_config("baseline", vocab_size=len(vocab), **TINY)
    with pytest.raises(ValueError):
        pretrain([], vocab, cfg, MaskConfig(), TrainConfig())
    with pytest.raises(ValueError, match="vocab_size"):
        pretrain(layout_corpus(1, vocab, m=100), vocab, system_config("baseline", vocab_size=7, **TINY),
                 MaskConfig(), TrainConfig())


def test_checkpoint_roundtrip(tmp_path):
    params = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1.5])}
    save_checkpoint(tmp_path / "c.npz", {"step": 3}, params, {"m/a": np.zeros((2, 3))})
    ck = load_checkpoint(tmp_path / "c.npz")
    assert ck.meta["step"] == 3
    assert all(np.array_equal(ck.params[k], params[k]) for k in params)
    assert ck.optim["m/a"].shape == (2, 3)
    save_checkpoint(tmp_path / "d.npz", {"step": 3}, params, {"m/a": np.zeros((2, 3))})
    assert (tmp_path / "c.npz").read_bytes() == (tmp_path / "d.npz").read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    np.savez(tmp_path / "x.npz", a=np.zeros(2))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.npz")
