"""Direct training from scratch: AdamW, cosine schedule, dual-loss loop, metrics CSV."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .model import ConfigError, coerce, save_checkpoint
from .tensor import no_grad

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "lr", "train_loss", "loss1", "loss2", "eval_acc")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainRecipe:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 5e-3
    weight_decay: float = 0.06
    schedule: str = "cosine"
    warmup_epochs: int = 5
    alpha: float = -1.0  # negative: use the model config value
    seed: int = 0
    grad_clip: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError("schedule must be 'cosine' or 'constant'")

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def from_kv(cls, kv, base=None):
        base = base or cls()
        values = {f.name: getattr(base, f.name) for f in fields(cls)}
        for key, raw in kv.items():
            if key not in values:
                raise ConfigError(f"unknown recipe key {key!r}; valid keys: {', '.join(cls.keys())}")
            values[key] = coerce(raw, type(values[key]), key)
        return cls(**values)


# the small-image recipe from the CIFAR experiments
CIFAR_RECIPE = TrainRecipe(epochs=400, batch_size=64, base_lr=1e-3, weight_decay=6e-2, warmup_epochs=0)


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params, grads, state: OptimState, decay=None, names=None):
    """One decoupled-weight-decay Adam update, in place on ``params[i].data``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    names = names or [f"param{i}" for i in range(len(params))]
    for g, name, p in zip(grads, names, params):
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        if g is not None and g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
    state.step += 1
    b1, b2, lr = state.beta1, state.beta2, state.lr
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if state.weight_decay and (decay is None or decay[i]):
            p.data *= 1 - lr * state.weight_decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


def cosine_lr(epoch, recipe: TrainRecipe):
    if not 0 <= epoch < recipe.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {recipe.epochs})")
    warm = min(recipe.warmup_epochs, recipe.epochs - 1)
    if epoch < warm:
        return recipe.base_lr * (epoch + 1) / (warm + 1)
    if recipe.schedule == "constant":
        return recipe.base_lr
    span = recipe.epochs - warm
    return recipe.base_lr * 0.5 * (1 + math.cos(math.pi * (epoch - warm) / span))


def clip_grad_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads if g is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-6)
        grads = [None if g is None else g * g.dtype.type(scale) for g in grads]
    return grads, total


def augment_batch(x, rng, pad=2):
    """Random horizontal flip plus pad-and-crop on (B, C, H, W) images."""
    x = x.copy()
    flip = rng.random(len(x)) < 0.5
    x[flip] = x[flip][..., ::-1]
    h, w = x.shape[-2:]
    padded = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)])
    for i in range(len(x)):
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        x[i] = padded[i, ..., dy:dy + h, dx:dx + w]
    return x


def evaluate(model, dataset, batch_size=64, threads=1):
    """Top-1 accuracy of the deployed prediction path (eval-mode batch norm)."""
    model.eval()
    chunks = [(dataset.inputs[i:i + batch_size], dataset.labels[i:i + batch_size])
              for i in range(0, len(dataset), batch_size)]

    def run(chunk):
        with no_grad():
            return int(np.sum(model.predict(chunk[0]) == chunk[1]))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            correct = sum(pool.map(run, chunks))
    else:
        correct = sum(run(c) for c in chunks)
    return correct / len(dataset)


def train_loop(model, train_set, recipe: TrainRecipe, eval_set=None, csv_path=None, checkpoint_dir=None):
    """Train ``model`` in place; returns the per-epoch metric rows."""
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    alpha = model.cfg.alpha if recipe.alpha < 0 else recipe.alpha
    named = model.trainable_parameters()
    names = [n for n, _ in named]
    params = [p for _, p in named]
    decay = [p.ndim >= 2 for p in params]
    state = OptimState(beta1=recipe.beta1, beta2=recipe.beta2, eps=recipe.eps, weight_decay=recipe.weight_decay)
    rng = np.random.default_rng(recipe.seed)
    eval_set = eval_set if eval_set is not None else train_set
    history = []
    for epoch in range(recipe.epochs):
        state.lr = cosine_lr(epoch, recipe)
        model.train()
        sums = {"train_loss": 0.0, "loss1": 0.0, "loss2": 0.0}
        seen = 0
        for xb, yb in train_set.batches(recipe.batch_size, rng):
            if recipe.augment:
                xb = augment_batch(xb, rng)
            for p in params:
                p.grad = None
            loss, l1, l2 = model.loss(xb, yb, alpha)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} (loss1={l1.item()})")
            loss.backward()
            grads, _ = clip_grad_norm([p.grad for p in params], recipe.grad_clip)
            adamw_step(params, grads, state, decay, names)
            n = len(yb)
            seen += n
            sums["train_loss"] += loss.item() * n
            sums["loss1"] += l1.item() * n
            sums["loss2"] += (l2.item() if l2 is not None else float("nan")) * n
        row = {"epoch": epoch, "lr": state.lr}
        row.update({k: v / seen for k, v in sums.items()})
        row["eval_acc"] = evaluate(model, eval_set)
        history.append(row)
        log.info("epoch %d lr %.3g loss %.4f (l1 %.4f l2 %.4f) acc %.4f", epoch, row["lr"], row["train_loss"],
                 row["loss1"], row["loss2"], row["eval_acc"])
    if csv_path is not None:
        write_metrics(csv_path, history)
    if checkpoint_dir is not None:
        save_checkpoint(model, checkpoint_dir, {"epochs": recipe.epochs, "seed": recipe.seed})
    return history


def write_metrics(path, history):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in METRIC_COLUMNS})
