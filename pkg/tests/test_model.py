from dataclasses import replace

import numpy as np
import pytest

from posmask import numerics as nx
from posmask.masking import MaskConfig
from posmask.model import (
    ModelConfig, SYSTEMS, embed, encode, init_params, pretrain_losses, system_config,
)
from posmask.training import SpecialIds, make_pretrain_batch
from posmask.synthetic import layout_corpus, synthetic_vocab

SMALL = dict(vocab_size=45, hidden_size=16, num_layers=1, num_heads=2, max_seq_len=32, grid_max=100)


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(hidden_size=10, num_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(pm_variant="x1", use_height_width=True)
    with pytest.raises(ValueError):
        ModelConfig(lam=-1)
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"bogus": 1})
    c = system_config("full_reg", **SMALL)
    assert ModelConfig.from_dict(c.to_dict()) == c


def test_height_width_tables_only_when_enabled():
    p = init_params(system_config("baseline", **SMALL), np.random.default_rng(0))
    assert "embeddings.width" in p and "embeddings.height" in p
    p = init_params(system_config("x1_ce", **SMALL), np.random.default_rng(0))
    assert "embeddings.width" not in p and "pm.x1.weight" in p and "pm.y1.weight" not in p


def test_embedding_is_sum_of_components():
    cfg = system_config("baseline", **SMALL)
    params = init_params(cfg, np.random.default_rng(0))
    ids = np.array([[2, 7, 3]])
    boxes = np.array([[[0, 0, 0, 0], [10, 20, 40, 25], [100, 100, 100, 100]]])
    got = embed(params, cfg, ids, boxes).value
    e = {k.split(".")[1]: v.value for k, v in params.items() if k.startswith("embeddings.")}
    b = boxes[0]
    want = (e["token"][ids[0]] + e["position"][:3] + e["segment"][0] + e["x"][b[:, 0]] + e["y"][b[:, 1]]
            + e["x"][b[:, 2]] + e["y"][b[:, 3]] + e["width"][b[:, 2] - b[:, 0]] + e["height"][b[:, 3] - b[:, 1]])
    np.testing.assert_allclose(got, want, atol=1e-14)


def test_embedding_rejects_out_of_grid():
    cfg = system_config("x1_ce", **SMALL)
    params = init_params(cfg, np.random.default_rng(0))
    with pytest.raises(IndexError, match="embeddings.x"):
        embed(params, cfg, np.array([[2]]), np.array([[[101, 0, 101, 0]]]))


def test_padding_does_not_change_real_positions():
    cfg = system_config("baseline", **SMALL)
    params = init_params(cfg, np.random.default_rng(1))
    ids = np.array([[2, 7, 8, 3, 0, 0]])
    boxes = np.zeros((1, 6, 4), dtype=np.int64)
    attn = np.array([[1, 1, 1, 1, 0, 0]], bool)
    h1 = encode(params, cfg, embed(params, cfg, ids, boxes), attn).value[:4]
    ids2 = ids.copy()
    ids2[0, 4:] = 9
    h2 = encode(params, cfg, embed(params, cfg, ids2, boxes), attn).value[:4]
    np.testing.assert_allclose(h1, h2, atol=1e-12)


def test_zero_layers_is_identity():
    cfg = system_config("baseline", **{**SMALL, "num_layers": 0})
    params = init_params(cfg, np.random.default_rng(0))
    x = nx.constant(np.random.default_rng(1).standard_normal((4, 16)))
    assert encode(params, cfg, x, np.ones((1, 4), bool)).value is x.value or np.array_equal(
        encode(params, cfg, x, np.ones((1, 4), bool)).value, x.value)


def _batch(cfg, seed=0, variant=None):
    v = synthetic_vocab(40)
    pages = layout_corpus(4, v, m=cfg.grid_max, tokens_per_page=12, seed=seed)
    mc = MaskConfig(variant=cfg.pm_variant if variant is None else variant)
    return make_pretrain_batch(pages, cfg, mc, SpecialIds.from_vocab(v), np.random.default_rng(seed))


@pytest.mark.parametrize("name", sorted(SYSTEMS))
def test_pretrain_losses_finite(name):
    cfg = system_config(name, **SMALL)
    params = init_params(cfg, np.random.default_rng(0))
    batch, _ = _batch(cfg)
    mlm, pm = pretrain_losses(params, cfg, batch)
    assert np.isfinite(mlm.item()) and np.isfinite(pm.item())
    if cfg.pm_variant == "none":
        assert pm.item() == 0.0


def test_lambda_zero_removes_position_gradient():
    cfg = system_config("full_ce", **{**SMALL, "lam": 0.0})
    params = init_params(cfg, np.random.default_rng(0))
    batch, _ = _batch(cfg)
    mlm, pm = pretrain_losses(params, cfg, batch)
    from posmask.model import combined_loss
    nx.backward(combined_loss(mlm, pm, cfg.lam))
    assert not params["pm.x1.weight"].grad.any()


def test_regression_predictions_inside_grid():
    from posmask.model import pm_predictions
    cfg = system_config("full_reg", **SMALL)
    params = init_params(replace(cfg, init_std=3.0), np.random.default_rng(0))
    h = nx.constant(np.random.default_rng(2).standard_normal((20, 16)) * 10)
    for y in pm_predictions(params, cfg, h).values():
        assert (y.value >= 0).all() and (y.value <= cfg.grid_max).all()


def test_zeroing_a_table_removes_its_contribution():
    cfg = system_config("baseline", **SMALL)
    params = init_params(cfg, np.random.default_rng(0))
    ids = np.array([[2, 7, 3]])
    boxes = np.array([[[0, 0, 0, 0], [10, 20, 40, 25], [100, 100, 100, 100]]])
    full = embed(params, cfg, ids, boxes).value
    w = params["embeddings.width"].value.copy()
    params["embeddings.width"].value = np.zeros_like(w)
    part = embed(params, cfg, ids, boxes).value
    np.testing.assert_allclose(full - part, w[boxes[0, :, 2] - boxes[0, :, 0]], atol=1e-15)


def test_full_variant_is_mean_of_single_coordinates():
    from posmask.model import pm_coordinate_losses, pm_loss
    cfg = system_config("full_ce", **SMALL)
    params = init_params(cfg, np.random.default_rng(0))
    h = nx.constant(np.random.default_rng(1).standard_normal((6, 16)))
    rows = np.array([0, 2, 5])
    targets = np.random.default_rng(2).integers(0, 101, size=(3, 4))
    parts = [x.item() for x in pm_coordinate_losses(params, cfg, h, rows, targets)]
    assert len(parts) == 4
    assert pm_loss(params, cfg, h, rows, targets).item() == pytest.approx(np.mean(parts), abs=1e-14)
    assert pm_loss(params, cfg, h, np.zeros(0, np.int64), np.zeros((0, 4))).item() == 0.0


@pytest.mark.parametrize("name", ["x1_ce", "full_reg"])
def test_combined_loss_linear_in_lambda(name):
    from posmask.model import combined_loss
    cfg = system_config(name, **SMALL)
    params = init_params(cfg, np.random.default_rng(0))
    batch, _ = _batch(cfg)
    mlm, pm = pretrain_losses(params, cfg, batch)
    l0, l1, l2 = (combined_loss(mlm, pm, lam).item() for lam in (0.0, 1.0, 2.0))
    assert l0 == mlm.item()
    assert l2 - l1 == pytest.approx(l1 - l0, abs=1e-12)
    assert combined_loss(nx.constant(2.0), nx.constant(3.0), 0.5).item() == 3.5


def test_position_masked_systems_never_read_height_width():
    cfg = system_config("x1_reg", **SMALL)
    params = init_params(cfg, np.random.default_rng(0))
    assert not any(k in params for k in ("embeddings.width", "embeddings.height"))


def test_classifier_head_gradient_reaches_encoder():
    from posmask.model import add_classifier_head, token_classifier_logits
    cfg = system_config("baseline", **SMALL)
    rng = np.random.default_rng(0)
    params = init_params(cfg, rng)
    add_classifier_head(params, cfg, 9, rng)
    ids = np.array([[2, 7, 8, 3]])
    h = encode(params, cfg, embed(params, cfg, ids, np.zeros((1, 4, 4), np.int64)), np.ones((1, 4), bool))
    logits = token_classifier_logits(params, h)
    assert logits.value.shape == (4, 9)
    nx.backward(nx.softmax_cross_entropy(logits, np.array([-100, 1, 2, -100])))
    assert np.abs(params["layer0.attn.q.weight"].grad).sum() > 0


def test_layer_norm_constant_row():
    x = nx.constant(np.full((2, 5), 3.0))
    out = nx.layer_norm(x, nx.constant(np.ones(5)), nx.constant(np.zeros(5)))
    assert not out.value.any()
