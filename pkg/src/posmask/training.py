"""Pre-training: AdamW, linear decay to zero, global-norm clipping, run logs."""
import json
import logging
import math
import subprocess
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from posmask import __version__
from posmask import numerics as nx
from posmask.checkpoint import save_checkpoint
from posmask.masking import MaskConfig, apply_position_mask, apply_token_mask, sample_mask_plan
from posmask.model import IGNORE, PretrainBatch, combined_loss, init_params, pretrain_losses

log = logging.getLogger(__name__)

OBJECTIVES = ("combined", "mlm")


class NonFiniteError(FloatingPointError):
    pass


class TrainingHalted(RuntimeError):
    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    weight_decay: float = 0.0
    epochs: int = 6
    batch_size: int = 8
    grad_clip_norm: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int = 0  # 0 -> epochs * batches per epoch
    objective: str = "combined"
    no_decay: str = "bias,gain"  # parameter-name suffixes exempt from weight decay

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be > 0")
        if self.epochs < 0 or self.max_steps < 0:
            raise ValueError("epochs and max_steps must be >= 0")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------ optimizer pieces


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros(cls, params):
        return cls(0, {k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})

    def to_arrays(self):
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, step, arrays):
        m = {k[2:]: v for k, v in arrays.items() if k.startswith("m/")}
        v = {k[2:]: v for k, v in arrays.items() if k.startswith("v/")}
        return cls(step, m, v)


def _decays(name, config):
    suffixes = [s for s in config.no_decay.split(",") if s]
    return not any(name.endswith(s) for s in suffixes)


def adamw_step(params, grads, state, lr, config):
    """One AdamW update with bias correction and decoupled weight decay.

    ``params``/``grads`` map names to arrays; returns ``(new_params, new_state)``
    without mutating the inputs.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {k}")
    b1, b2, eps = config.beta1, config.beta2, config.adam_eps
    t = state.step + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        if config.weight_decay and _decays(k, config):
            p = p * (1.0 - lr * config.weight_decay)
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(t, new_m, new_v)


def linear_schedule(step, total_steps, base_lr):
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps)


def global_norm(grads):
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_gradients(grads, max_norm):
    """Scale all gradients by ``max_norm / norm`` when the global L2 norm exceeds it."""
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


def optimizer_update(params, state, lr, config):
    """Clip, then AdamW, in place on the ``Node`` parameters. Returns (state, raw, clipped norm)."""
    grads = {k: p.grad for k, p in params.items()}
    clipped, raw = clip_gradients(grads, config.grad_clip_norm)
    values = {k: p.value for k, p in params.items()}
    new_values, state = adamw_step(values, clipped, state, lr, config)
    for k, p in params.items():
        p.value = new_values[k]
    return state, raw, global_norm(clipped)


# ------------------------------------------------------------------ batching


@dataclass(frozen=True)
class SpecialIds:
    pad: int
    cls: int
    sep: int
    mask: int
    unk: int

    @classmethod
    def from_vocab(cls, vocab):
        return cls(vocab.pad_id, vocab.cls_id, vocab.sep_id, vocab.mask_id, vocab.unk_id)

    @property
    def all(self):
        return (self.pad, self.cls, self.sep, self.mask, self.unk)


def fit_length(token_ids, boxes, max_len, specials):
    """Truncate to ``max_len`` keeping a trailing [SEP]."""
    if len(token_ids) <= max_len:
        return token_ids, boxes
    ids = np.concatenate([token_ids[: max_len - 1], [specials.sep]])
    bx = np.concatenate([boxes[: max_len - 1], boxes[-1:]])
    return ids, bx


def make_pretrain_batch(pages, model_config, mask_config, specials, rng):
    """Mask each page with a fresh plan and pad to the longest page in the batch."""
    seqs = [fit_length(p.token_ids, p.boxes, model_config.max_seq_len, specials) for p in pages]
    B, T = len(seqs), max(len(s[0]) for s in seqs)
    ncoord = len(mask_config.coords)
    input_ids = np.full((B, T), specials.pad, dtype=np.int64)
    boxes = np.zeros((B, T, 4), dtype=np.int64)
    attention = np.zeros((B, T), dtype=bool)
    mlm_targets = np.full((B, T), IGNORE, dtype=np.int64)
    pm_rows, pm_targets, plans = [], [], []
    special = np.array(specials.all)
    for b, (ids, bx) in enumerate(seqs):
        n = len(ids)
        eligible = ~np.isin(ids, special)
        plan = sample_mask_plan(ids, bx, eligible, mask_config, rng, model_config.vocab_size)
        plans.append(plan)
        input_ids[b, :n] = apply_token_mask(ids, plan, specials.mask)
        boxes[b, :n] = apply_position_mask(bx, plan, model_config.grid_max)
        attention[b, :n] = True
        mlm_targets[b, plan.token_idx] = plan.token_targets
        pm_rows.append(b * T + plan.position_idx)
        pm_targets.append(plan.position_targets.reshape(len(plan.position_idx), ncoord))
    batch = PretrainBatch(
        input_ids, boxes, attention, mlm_targets,
        np.concatenate(pm_rows).astype(np.int64),
        np.concatenate(pm_targets).astype(np.int64),
    )
    return batch, plans


# ------------------------------------------------------------------ run log


def code_version():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class RunLog:
    """Append-only list of records, mirrored to a JSON-lines file when a path is given."""

    def __init__(self, path=None):
        self.records = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.write_text("", encoding="utf-8")

    def append(self, record):
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def steps(self):
        return [r for r in self.records if r["type"] == "step"]

    @staticmethod
    def read(path):
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


# ------------------------------------------------------------------ pre-training loop


@dataclass
class PretrainResult:
    params: dict
    runlog: RunLog
    checkpoint: Path | None
    opt_state: AdamState


def checkpoint_meta(model_config, mask_config, train_config, vocab_tokens, tokenizer, step, rng_state,
                    **extra):
    meta = {
        "kind": "pretrain",
        "model": model_config.to_dict(),
        "mask": asdict(mask_config),
        "train": train_config.to_dict(),
        "vocab": list(vocab_tokens),
        "tokenizer": tokenizer,
        "step": step,
        "rng_state": rng_state,
        "code_version": code_version(),
    }
    meta.update(extra)
    return meta


def pretrain(pages, vocab, model_config, mask_config, train_config, out_dir=None,
             tokenizer=None, on_step=None):
    """Run masked pre-training and return the trained parameters and run log.

    Each step: draw a batch of whole pages, sample a mask plan per page, compute
    ``L = L_MLM + lambda * L_PM``, backpropagate, clip, and take an AdamW step
    at the linearly decayed learning rate.  With ``out_dir`` set, a checkpoint
    is written at the end of every epoch plus ``best.npz`` and ``final.npz``.
    """
    if not pages:
        raise ValueError("pre-training corpus is empty")
    if model_config.vocab_size != len(vocab):
        raise ValueError(f"model vocab_size {model_config.vocab_size} != vocabulary size {len(vocab)}")
    if mask_config.variant != model_config.pm_variant:
        raise ValueError(f"mask variant {mask_config.variant!r} != model pm_variant {model_config.pm_variant!r}")
    tokenizer = tokenizer or {"name": "wordpiece", "lowercase": True}
    specials = SpecialIds.from_vocab(vocab)
    seed = train_config.seed
    params = init_params(model_config, np.random.default_rng([seed, 0]))
    data_rng = np.random.default_rng([seed, 1])
    drop_rng = np.random.default_rng([seed, 2]) if model_config.dropout > 0 else None
    state = AdamState.zeros({k: p.value for k, p in params.items()})

    n, bs = len(pages), train_config.batch_size
    per_epoch = math.ceil(n / bs)
    total = train_config.max_steps or train_config.epochs * per_epoch
    if total <= 0:
        raise ValueError("no optimizer steps to run (epochs and max_steps are zero)")

    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    runlog = RunLog(out / "runlog.jsonl" if out else None)
    runlog.append({
        "type": "config", "model": model_config.to_dict(), "mask": asdict(mask_config),
        "train": train_config.to_dict(), "total_steps": total, "pages": n,
        "code_version": code_version(),
    })

    def save(name, step):
        if out is None:
            return None
        path = out / name
        meta = checkpoint_meta(model_config, mask_config, train_config, vocab.tokens, tokenizer,
                               step, data_rng.bit_generator.state)
        save_checkpoint(path, meta, {k: p.value for k, p in params.items()}, state.to_arrays())
        return path

    step, epoch = 0, 0
    last_good = save("init.npz", 0)
    best = math.inf
    while step < total:
        order = data_rng.permutation(n)
        sums = np.zeros(3)
        count = 0
        for start in range(0, n, bs):
            if step >= total:
                break
            batch, _ = make_pretrain_batch([pages[i] for i in order[start:start + bs]],
                                           model_config, mask_config, specials, data_rng)
            for p in params.values():
                p.zero_grad()
            mlm, pm = pretrain_losses(params, model_config, batch, drop_rng)
            if train_config.objective == "combined":
                loss = combined_loss(mlm, pm, model_config.lam)
            else:
                loss = mlm
            values = (mlm.item(), pm.item(), loss.item())
            if not all(math.isfinite(v) for v in values):
                raise TrainingHalted(f"non-finite loss at step {step}: {values}", last_good)
            nx.backward(loss)
            lr = linear_schedule(step, total, train_config.learning_rate)
            try:
                state, raw, clipped = optimizer_update(params, state, lr, train_config)
            except NonFiniteError as exc:
                raise TrainingHalted(f"step {step}: {exc}", last_good) from exc
            rec = {
                "type": "step", "step": step, "epoch": epoch, "lr": lr,
                "loss_mlm": values[0], "loss_pm": values[1], "loss": values[2],
                "grad_norm": clipped, "grad_norm_raw": raw,
                "masked_tokens": int((batch.mlm_targets != IGNORE).sum()),
                "masked_positions": int(len(batch.pm_rows)),
            }
            runlog.append(rec)
            if on_step:
                on_step(rec)
            sums += values
            count += 1
            step += 1
        mean = sums / max(count, 1)
        runlog.append({"type": "epoch", "epoch": epoch, "steps": count, "loss_mlm": mean[0],
                       "loss_pm": mean[1], "loss": mean[2]})
        last_good = save(f"checkpoint-epoch{epoch:03d}.npz", step) or last_good
        if mean[2] < best:
            best = mean[2]
            save("best.npz", step)
        epoch += 1
    runlog.append({"type": "end", "step": step, "lr": linear_schedule(total, total, train_config.learning_rate)})
    final = save("final.npz", step)
    return PretrainResult(params, runlog, final, state)
