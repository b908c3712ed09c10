"""Central finite-difference verification of every parameter gradient."""
from dataclasses import dataclass, field, replace

import numpy as np

from posmask import numerics as nx
from posmask.masking import MaskConfig
from posmask.model import combined_loss, init_params, pretrain_losses
from posmask.training import SpecialIds, make_pretrain_batch

# Denominator floor for elementwise relative error.  Central differences at
# h=1e-5 carry ~1e-10 absolute roundoff, so entries below this scale are judged
# on an absolute basis (|a - n| < 1e-4 * floor = 1e-9).
REL_FLOOR = 1e-5


@dataclass
class ParamCheck:
    name: str
    size: int
    max_rel_err: float  # elementwise |a - n| / max(|a|, |n|, REL_FLOOR)
    norm_rel_err: float  # ||analytic - numeric|| / max(||analytic||, ||numeric||)
    max_abs_err: float


@dataclass
class GradcheckReport:
    checks: list = field(default_factory=list)
    loss: float = 0.0

    @property
    def max_rel_err(self):
        return max((max(c.max_rel_err, c.norm_rel_err) for c in self.checks), default=0.0)

    def passed(self, tol=1e-4):
        return self.max_rel_err < tol


def random_pages(config, n_pages, seq_len, rng):
    """Pages of random tokens and valid random boxes, [CLS]/[SEP] at the ends."""
    from posmask.corpus import PageDocument

    m = config.grid_max
    pages = []
    for p in range(n_pages):
        n = seq_len - (p % 3)  # unequal lengths exercise padding
        ids = rng.integers(5, config.vocab_size, size=n)
        ids[0], ids[-1] = 2, 3
        a = rng.integers(0, m + 1, size=(n, 2))
        b = rng.integers(0, m + 1, size=(n, 2))
        boxes = np.concatenate([np.minimum(a, b), np.maximum(a, b)], axis=1)
        boxes[0], boxes[-1] = (0, 0, 0, 0), (m, m, m, m)
        pages.append(PageDocument(f"rand{p}", m, m, ids.astype(np.int64), boxes.astype(np.int64)))
    return pages


def loss_closure(params, config, batch, objective="combined"):
    def f():
        mlm, pm = pretrain_losses(params, config, batch)
        return combined_loss(mlm, pm, config.lam) if objective == "combined" else mlm
    return f


def check_gradients(loss_fn, params, h=1e-5, names=None, max_elements=None, rng=None):
    """Compare ``backward()`` against central differences for the named parameters."""
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    nx.backward(loss)
    report = GradcheckReport(loss=loss.item())
    for name in names or list(params):
        node = params[name]
        analytic = node.grad.copy()
        flat = node.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.zeros(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric[n] = (up - down) / (2 * h)
        a = analytic.reshape(-1)[idx]
        err = np.abs(a - numeric)
        scale = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), REL_FLOOR)
        max_rel = float((err / scale).max(initial=0.0))
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), REL_FLOOR)
        norm_rel = float(np.linalg.norm(a - numeric) / denom)
        report.checks.append(ParamCheck(name, len(idx), max_rel, norm_rel, float(err.max(initial=0.0))))
    return report


def gradcheck_config(config, *, seed=0, n_pages=2, seq_len=16, token_rate=0.3, position_rate=0.3,
                     h=1e-5, max_elements=None, param_std=0.3):
    """Full-parameter gradient check of ``L = L_MLM + lambda * L_PM`` on random pages.

    Parameters are drawn with std ``param_std`` rather than the training init
    (0.02): at the training init the attention gradients are ~1e-7, below
    what central differences in float64 can resolve to 1e-4 relative.
    """
    rng = np.random.default_rng(seed)
    params = init_params(replace(config, init_std=param_std), np.random.default_rng([seed, 0]))
    pages = random_pages(config, n_pages, seq_len, rng)
    specials = SpecialIds(pad=0, unk=1, cls=2, sep=3, mask=4)
    mask_cfg = MaskConfig(token_rate=token_rate, position_rate=position_rate, variant=config.pm_variant)
    batch, _ = make_pretrain_batch(pages, config, mask_cfg, specials, rng)
    return check_gradients(loss_closure(params, config, batch), params, h=h,
                           max_elements=max_elements, rng=rng)
