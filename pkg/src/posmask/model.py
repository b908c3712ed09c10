"""Layout-aware transformer encoder with MLM, position-prediction and tagging heads.

Activations are kept flat as ``(batch * seq, hidden)`` nodes; attention
reshapes to ``(batch * heads, seq, head_dim)`` internally.
"""
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from posmask import numerics as nx
from posmask.masking import COORDS, VARIANTS

PM_LOSSES = ("classification", "regression")
IGNORE = -100
NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 4
    intermediate_size: int = 0  # 0 -> 4 * hidden_size
    max_seq_len: int = 128
    grid_max: int = 1000
    use_height_width: bool = True
    pm_variant: str = "none"
    pm_loss: str = "classification"
    lam: float = 1.0
    dropout: float = 0.0
    tie_mlm_weights: bool = False
    smooth_l1_beta: float = 1.0
    init_std: float = 0.02
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ValueError(f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.pm_variant not in VARIANTS:
            raise ValueError(f"unknown pm_variant {self.pm_variant!r}")
        if self.pm_loss not in PM_LOSSES:
            raise ValueError(f"pm_loss must be one of {PM_LOSSES}")
        if self.pm_variant != "none" and self.use_height_width:
            raise ValueError("position masking requires use_height_width = false")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        for name in ("vocab_size", "hidden_size", "num_heads", "max_seq_len", "grid_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")

    @property
    def ffn_size(self):
        return self.intermediate_size or 4 * self.hidden_size

    @property
    def pm_coords(self):
        return VARIANTS[self.pm_variant]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


# Named systems: the four position-masking conditions, the baseline and the
# no-height/width ablation.
SYSTEMS = {
    "baseline": dict(pm_variant="none", use_height_width=True),
    "no_hw": dict(pm_variant="none", use_height_width=False),
    "x1_ce": dict(pm_variant="x1", pm_loss="classification", use_height_width=False),
    "x1_reg": dict(pm_variant="x1", pm_loss="regression", use_height_width=False),
    "full_ce": dict(pm_variant="full", pm_loss="classification", use_height_width=False),
    "full_reg": dict(pm_variant="full", pm_loss="regression", use_height_width=False),
}


def system_config(name, **overrides):
    return ModelConfig(**{**SYSTEMS[name], **overrides})


# ------------------------------------------------------------------ parameters


def truncated_normal(rng, shape, std):
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


def init_params(config, rng):
    """All parameters as an insertion-ordered ``{name: Node}`` dict."""
    d, m, std = config.hidden_size, config.grid_max, config.init_std
    shapes = [
        ("embeddings.token", (config.vocab_size, d)),
        ("embeddings.position", (config.max_seq_len, d)),
        ("embeddings.segment", (2, d)),
        ("embeddings.x", (m + 1, d)),
        ("embeddings.y", (m + 1, d)),
        ("embeddings.width", (m + 1, d)),
        ("embeddings.height", (m + 1, d)),
    ]
    params = {name: nx.parameter(truncated_normal(rng, shape, std), name) for name, shape in shapes}
    # drawn regardless so every other parameter starts identical across systems
    if not config.use_height_width:
        del params["embeddings.width"], params["embeddings.height"]

    def dense(prefix, n_in, n_out):
        params[f"{prefix}.weight"] = nx.parameter(truncated_normal(rng, (n_in, n_out), std), f"{prefix}.weight")
        params[f"{prefix}.bias"] = nx.parameter(np.zeros(n_out), f"{prefix}.bias")

    def norm(prefix):
        params[f"{prefix}.gain"] = nx.parameter(np.ones(d), f"{prefix}.gain")
        params[f"{prefix}.bias"] = nx.parameter(np.zeros(d), f"{prefix}.bias")

    for i in range(config.num_layers):
        for proj in ("q", "k", "v", "o"):
            dense(f"layer{i}.attn.{proj}", d, d)
        norm(f"layer{i}.attn_ln")
        dense(f"layer{i}.ffn.in", d, config.ffn_size)
        dense(f"layer{i}.ffn.out", config.ffn_size, d)
        norm(f"layer{i}.ffn_ln")

    if config.tie_mlm_weights:
        params["mlm.bias"] = nx.parameter(np.zeros(config.vocab_size), "mlm.bias")
    else:
        dense("mlm", d, config.vocab_size)
    out_dim = m + 1 if config.pm_loss == "classification" else 1
    for c in config.pm_coords:
        dense(f"pm.{COORDS[c]}", d, out_dim)
    return params


def add_classifier_head(params, config, num_labels, rng):
    d = config.hidden_size
    params["cls.weight"] = nx.parameter(truncated_normal(rng, (d, num_labels), config.init_std), "cls.weight")
    params["cls.bias"] = nx.parameter(np.zeros(num_labels), "cls.bias")
    return params


# ------------------------------------------------------------------ forward


def _check_range(name, idx, n):
    lo, hi = int(idx.min()), int(idx.max())
    if lo < 0 or hi >= n:
        bad = lo if lo < 0 else hi
        raise IndexError(f"{name} index {bad} out of range [0, {n})")


def embed(params, config, token_ids, boxes, segments=None):
    """Sum of token, 1-D position, segment and 2-D coordinate embeddings.

    ``token_ids`` is ``(B, T)`` and ``boxes`` ``(B, T, 4)``; returns a
    ``(B * T, d)`` node.  Width and height tables join the sum only when
    ``config.use_height_width`` is set.
    """
    token_ids = np.asarray(token_ids, dtype=np.int64)
    boxes = np.asarray(boxes, dtype=np.int64)
    B, T = token_ids.shape
    if T > config.max_seq_len:
        raise IndexError(f"sequence length {T} exceeds max_seq_len {config.max_seq_len}")
    if segments is None:
        segments = np.zeros_like(token_ids)
    positions = np.broadcast_to(np.arange(T), (B, T))
    m1 = config.grid_max + 1
    x1, y1, x2, y2 = (boxes[..., c].ravel() for c in range(4))
    lookups = [
        ("embeddings.token", token_ids.ravel(), config.vocab_size),
        ("embeddings.position", positions.ravel(), config.max_seq_len),
        ("embeddings.segment", np.asarray(segments).ravel(), 2),
        ("embeddings.x", x1, m1),
        ("embeddings.y", y1, m1),
        ("embeddings.x", x2, m1),
        ("embeddings.y", y2, m1),
    ]
    if config.use_height_width:
        lookups += [("embeddings.width", x2 - x1, m1), ("embeddings.height", y2 - y1, m1)]
    total = None
    for name, idx, n in lookups:
        if idx.size:
            _check_range(name, idx, n)
        term = nx.gather_rows(params[name], idx)
        total = term if total is None else nx.add(total, term)
    return total


def _attention(params, prefix, x, config, key_mask, B, T, rng):
    H = config.num_heads
    dh = config.hidden_size // H

    def heads(name):
        y = nx.linear(x, params[f"{prefix}.{name}.weight"], params[f"{prefix}.{name}.bias"])
        y = nx.transpose(nx.reshape(y, (B, T, H, dh)), (0, 2, 1, 3))
        return nx.reshape(y, (B * H, T, dh))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    probs = nx.softmax(scores, key_mask)
    probs = nx.dropout(probs, config.dropout, rng)
    ctx = nx.matmul(probs, v)
    ctx = nx.reshape(nx.transpose(nx.reshape(ctx, (B, H, T, dh)), (0, 2, 1, 3)), (B * T, config.hidden_size))
    return nx.linear(ctx, params[f"{prefix}.o.weight"], params[f"{prefix}.o.bias"])


def encode(params, config, x, attention_mask, rng=None):
    """Post-norm transformer layers over flat ``(B * T, d)`` embeddings.

    ``attention_mask`` is ``(B, T)`` with True for real tokens; padded keys are
    excluded from every attention distribution.
    """
    attention_mask = np.asarray(attention_mask, dtype=bool)
    B, T = attention_mask.shape
    H = config.num_heads
    key_mask = np.where(attention_mask, 0.0, NEG_INF)[:, None, None, :]
    key_mask = np.broadcast_to(key_mask, (B, H, 1, T)).reshape(B * H, 1, T)
    eps = config.layer_norm_eps
    for i in range(config.num_layers):
        p = f"layer{i}"
        attn = nx.dropout(_attention(params, f"{p}.attn", x, config, key_mask, B, T, rng), config.dropout, rng)
        x = nx.layer_norm(nx.add(x, attn), params[f"{p}.attn_ln.gain"], params[f"{p}.attn_ln.bias"], eps)
        h = nx.gelu(nx.linear(x, params[f"{p}.ffn.in.weight"], params[f"{p}.ffn.in.bias"]))
        h = nx.dropout(nx.linear(h, params[f"{p}.ffn.out.weight"], params[f"{p}.ffn.out.bias"]), config.dropout, rng)
        x = nx.layer_norm(nx.add(x, h), params[f"{p}.ffn_ln.gain"], params[f"{p}.ffn_ln.bias"], eps)
    return x


def _zero():
    return nx.constant(0.0)


def mlm_logits(params, config, h):
    if config.tie_mlm_weights:
        w = nx.transpose(params["embeddings.token"], (1, 0))
        return nx.add_rowvec(nx.matmul(h, w), params["mlm.bias"])
    return nx.linear(h, params["mlm.weight"], params["mlm.bias"])


def mlm_loss(params, config, h, targets):
    """Mean cross entropy over rows whose target is not ``IGNORE``."""
    targets = np.asarray(targets, dtype=np.int64).ravel()
    rows = np.nonzero(targets != IGNORE)[0]
    if rows.size == 0:
        return _zero()
    logits = mlm_logits(params, config, nx.gather_rows(h, rows))
    return nx.softmax_cross_entropy(logits, targets[rows])


def pm_predictions(params, config, h_rows):
    """Per masked coordinate: logits over [0, m] or a regressed coordinate in [0, m]."""
    out = {}
    for c in config.pm_coords:
        name = COORDS[c]
        y = nx.linear(h_rows, params[f"pm.{name}.weight"], params[f"pm.{name}.bias"])
        if config.pm_loss == "regression":
            y = nx.scale(nx.sigmoid(y), config.grid_max)
        out[name] = y
    return out


def pm_coordinate_losses(params, config, h, rows, targets):
    """One loss node per masked coordinate, each averaged over the rows in K."""
    rows = np.asarray(rows, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64).reshape(len(rows), -1)
    h_rows = nx.gather_rows(h, rows)
    losses = []
    for j, c in enumerate(config.pm_coords):
        name = COORDS[c]
        y = nx.linear(h_rows, params[f"pm.{name}.weight"], params[f"pm.{name}.bias"])
        if config.pm_loss == "classification":
            losses.append(nx.softmax_cross_entropy(y, targets[:, j]))
        else:
            pred = nx.reshape(nx.sigmoid(y), (len(rows),))
            losses.append(nx.smooth_l1(pred, targets[:, j] / config.grid_max, config.smooth_l1_beta))
    return losses


def pm_loss(params, config, h, rows, targets):
    """Position loss averaged over K and over the variant's coordinates."""
    if config.pm_variant == "none":
        raise ValueError("pm_loss called on a configuration without position masking")
    if len(rows) == 0:
        return _zero()
    losses = pm_coordinate_losses(params, config, h, rows, targets)
    total = losses[0]
    for extra in losses[1:]:
        total = nx.add(total, extra)
    return nx.scale(total, 1.0 / len(losses))


def combined_loss(mlm, pm, lam):
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return nx.add(mlm, nx.scale(pm, lam))


def token_classifier_logits(params, h):
    return nx.linear(h, params["cls.weight"], params["cls.bias"])


@dataclass
class PretrainBatch:
    input_ids: np.ndarray  # (B, T) after token masking
    boxes: np.ndarray  # (B, T, 4) after position masking
    attention_mask: np.ndarray  # (B, T) bool
    mlm_targets: np.ndarray  # (B, T) original id on J, IGNORE elsewhere
    pm_rows: np.ndarray  # flat row indices of K
    pm_targets: np.ndarray  # (|K|, n_coords) original coordinates


def pretrain_losses(params, config, batch, rng=None):
    """Return ``(L_MLM, L_PM)``; L_PM is a zero constant for the baseline systems."""
    x = embed(params, config, batch.input_ids, batch.boxes)
    h = encode(params, config, x, batch.attention_mask, rng)
    mlm = mlm_loss(params, config, h, batch.mlm_targets)
    if config.pm_variant == "none":
        return mlm, _zero()
    return mlm, pm_loss(params, config, h, batch.pm_rows, batch.pm_targets)
