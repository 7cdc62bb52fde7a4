"""Weighted multi-head L2 objective, AdamW, and the early-stopping train loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import pad_batch
from .errors import ConfigError, ContractError, NumericError
from .model import forward
from .tensor import Tensor, add, backward, mul, no_grad, sub

log = logging.getLogger("mmml.training")


@dataclass
class TrainConfig:
    """Optimization settings.

    `alphas` weights the (audio, text, fused) squared-error terms; in
    "single" loss mode the effective weights are (0, 0, 1) regardless.
    """

    learning_rate: float = 1e-3
    batch_size: int = 16
    patience: int = 8
    max_epochs: int = 100
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    alphas: tuple = (1.0, 1.0, 1.0)
    loss_mode: str = "multi"
    seed: int = 0

    def validate(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning rate and weight decay must be nonnegative")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size, patience and max_epochs must be positive")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if len(self.alphas) != 3 or any(a < 0 for a in self.alphas):
            raise ConfigError(f"alphas must be three nonnegative weights, got {self.alphas}")
        if self.loss_mode not in ("multi", "single"):
            raise ConfigError(f"unknown loss mode {self.loss_mode!r}")

    def effective_alphas(self):
        return (0.0, 0.0, 1.0) if self.loss_mode == "single" else tuple(self.alphas)


@dataclass
class TrainHistory:
    """Per-epoch curves plus the selection outcome."""

    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    best_epoch: int = 0  # 1-based
    stop_reason: str = ""

    def num_epochs(self):
        return len(self.train_loss)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "val_mae"])
            for i in range(self.num_epochs()):
                writer.writerow(
                    [i + 1, repr(self.train_loss[i]), repr(self.val_loss[i]), repr(self.val_mae[i])]
                )


def multi_loss(preds, targets, alphas):
    """Mean over the batch of the weighted per-head squared errors.

    `targets` is the (audio, text, fused) triple of per-sample target arrays;
    zero-weighted heads are skipped, so they contribute neither value nor
    gradient.
    """
    target_a, target_t, target_f = targets
    n = len(preds)
    if n == 0:
        raise ContractError("loss over an empty batch")
    if not (len(target_a) == len(target_t) == len(target_f) == n):
        raise ContractError(
            f"targets/predictions length mismatch: {len(target_a)}/{len(target_t)}/{len(target_f)} vs {n}"
        )
    if any(a < 0 for a in alphas):
        raise ContractError(f"loss weights must be nonnegative, got {alphas}")
    if all(a == 0 for a in alphas):
        raise ContractError("at least one loss weight must be positive")
    total = None
    for i, pred in enumerate(preds):
        for alpha, y, tgt in (
            (alphas[0], pred.y_audio, target_a[i]),
            (alphas[1], pred.y_text, target_t[i]),
            (alphas[2], pred.y_fused, target_f[i]),
        ):
            if alpha == 0:
                continue
            if y is None:
                raise ContractError("a weighted head is missing from the prediction")
            r = sub(y, float(tgt))
            term = mul(r, r)
            if alpha != 1.0:
                term = mul(term, float(alpha))
            total = term if total is None else add(total, term)
    return mul(total, 1.0 / n)


def adamw_step(params, grads, state, config):
    """Decoupled weight decay plus a bias-corrected Adam update, in place.

    Parameters without a gradient entry are left untouched.  `state` maps
    parameter names to their step counter and moment buffers and is created
    lazily.
    """
    lr, wd = config.learning_rate, config.weight_decay
    b1, b2 = config.betas
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        st = state.get(name)
        if st is None:
            st = state[name] = {
                "step": 0,
                "m": np.zeros_like(p.array),
                "v": np.zeros_like(p.array),
            }
        if wd:
            p.array -= (lr * wd) * p.array
        st["step"] += 1
        t = st["step"]
        m, v = st["m"], st["v"]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.array -= lr * m_hat / (np.sqrt(v_hat) + config.eps)


def _batch_grads(model):
    return {name: t.grad for name, t in model.params.items()}


def evaluate_loss(model, batches, alphas):
    """(mean loss, primary-head MAE) over prepared batches, without a graph."""
    total_loss = 0.0
    abs_err = 0.0
    n = 0
    with no_grad():
        for batch in batches:
            preds = forward(model, batch)
            loss = multi_loss(preds, batch.targets(), alphas)
            total_loss += loss.item() * len(batch)
            for pred, target in zip(preds, batch.target_f):
                abs_err += abs(pred.primary().item() - target)
            n += len(batch)
    return total_loss / n, abs_err / n


def train(model, train_set, val_set, config):
    """Shuffled-epoch loop with best-snapshot early stopping.

    Returns the model restored to its best-validation-loss parameters plus
    the recorded history.  Deterministic given (seed, data, config).
    """
    config.validate()
    if not train_set or not val_set:
        raise ContractError("train and validation splits must be nonempty")
    alphas = config.effective_alphas()
    rng = np.random.default_rng(config.seed)
    state = {}
    history = TrainHistory()
    val_batches = pad_batch(val_set, config.batch_size)
    best_val = float("inf")
    best_snap = model.snapshot()
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_set))
        batches = pad_batch([train_set[i] for i in order], config.batch_size)
        running = 0.0
        for batch in batches:
            model.zero_grads()
            preds = forward(model, batch)
            loss = multi_loss(preds, batch.targets(), alphas)
            backward(loss)
            adamw_step(model.params, _batch_grads(model), state, config)
            running += loss.item() * len(batch)
        train_loss = running / len(train_set)
        val_loss, val_mae = evaluate_loss(model, val_batches, alphas)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.val_mae.append(val_mae)
        log.info("epoch %d train %.6f val %.6f mae %.6f", epoch, train_loss, val_loss, val_mae)
        if val_loss < best_val:
            best_val = val_loss
            best_snap = model.snapshot()
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                history.stop_reason = "early_stopping"
                break
    if not history.stop_reason:
        history.stop_reason = "max_epochs"
    model.restore(best_snap)
    return model, history


def grads_equal_under_alpha_zero(model, batch, tol=1e-12):
    """True when multi-loss gradients at weights (0, 0, 1) equal the gradients
    of a directly-built fused-only L2 loss, parameter by parameter."""

    def fused_only_loss(preds):
        total = None
        for pred, target in zip(preds, batch.target_f):
            r = sub(pred.y_fused, float(target))
            term = mul(r, r)
            total = term if total is None else add(total, term)
        return mul(total, 1.0 / len(preds))

    def grads_for(loss_fn):
        model.zero_grads()
        preds = forward(model, batch)
        backward(loss_fn(preds))
        return {
            name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.array))
            for name, t in model.params.items()
        }

    multi = grads_for(lambda preds: multi_loss(preds, batch.targets(), (0.0, 0.0, 1.0)))
    single = grads_for(fused_only_loss)
    return all(np.max(np.abs(multi[name] - single[name])) <= tol for name in multi)
