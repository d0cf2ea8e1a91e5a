"""White-box FGSM / PGD attacks through the surrogate-differentiable two-pass model."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, cross_entropy


@dataclass
class AttackConfig:
    kind: str = "fgsm"
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    iterations: int = 10
    random_start: bool = False

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.kind == "pgd" and (self.step_size <= 0 or self.iterations < 1):
            raise ValueError("pgd needs step_size > 0 and iterations >= 1")


@contextlib.contextmanager
def _frozen_weights(model):
    params = model.parameters()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def input_gradient(model, x, y):
    """d CE(deployed logits, y) / d x, with batch norm in eval mode."""
    model.eval()
    xt = Tensor(np.asarray(x, dtype=np.float32), requires_grad=True)
    with _frozen_weights(model):
        loss = cross_entropy(model.infer(xt), y)
        loss.backward()
    g = xt.grad
    if g is None:
        g = np.zeros_like(xt.data)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite input gradient")
    return g


def linf_ball(x, eps):
    """float32 bounds [lo, hi] lying inside the real interval [x - eps, x + eps]."""
    lo64 = x.astype(np.float64) - eps
    hi64 = x.astype(np.float64) + eps
    lo, hi = lo64.astype(np.float32), hi64.astype(np.float32)
    # rounding to float32 can land just outside the ball; step back by one ulp
    lo = np.where(lo < lo64, np.nextafter(lo, np.float32(np.inf)), lo)
    hi = np.where(hi > hi64, np.nextafter(hi, np.float32(-np.inf)), hi)
    return lo, hi


def _project(x_adv, lo, hi):
    return np.clip(np.minimum(np.maximum(x_adv, lo), hi), 0.0, 1.0)


def fgsm(x, y, model, eps):
    """x + eps * sign(grad), kept in the eps-ball and in [0, 1]; sign(0) = 0."""
    x = np.asarray(x, dtype=np.float32)
    if eps == 0:
        return x.copy()
    g = input_gradient(model, x, y)
    lo, hi = linf_ball(x, eps)
    return _project(x + np.float32(eps) * np.sign(g).astype(np.float32), lo, hi)


def pgd(x, y, model, cfg: AttackConfig, rng=None, on_step=None):
    """Iterated signed-gradient steps, projected onto the eps-ball around x and onto [0, 1]."""
    x = np.asarray(x, dtype=np.float32)
    eps = cfg.epsilon
    lo, hi = linf_ball(x, eps)
    x_adv = x.copy()
    if cfg.random_start:
        rng = rng or np.random.default_rng(0)
        x_adv = _project(x + rng.uniform(-eps, eps, size=x.shape).astype(np.float32), lo, hi)
    step = np.float32(cfg.step_size)
    for it in range(cfg.iterations):
        g = input_gradient(model, x_adv, y)
        x_adv = _project(x_adv + step * np.sign(g).astype(np.float32), lo, hi)
        if on_step is not None:
            on_step(it, x_adv)
    return x_adv


def attack(x, y, model, cfg: AttackConfig):
    if cfg.kind == "fgsm":
        return fgsm(x, y, model, cfg.epsilon)
    return pgd(x, y, model, cfg)


def adversarial_accuracy(model, dataset, cfg: AttackConfig, batch_size=64):
    """Accuracy of the deployed prediction on attacked inputs (cfg.epsilon = 0 gives clean accuracy)."""
    correct = 0
    for i in range(0, len(dataset), batch_size):
        xb, yb = dataset.inputs[i:i + batch_size], dataset.labels[i:i + batch_size]
        xa = attack(xb, yb, model, cfg) if cfg.epsilon > 0 else xb
        model.eval()
        correct += int(np.sum(model.predict(xa) == yb))
    return correct / len(dataset)


def robustness_sweep(model, dataset, configs, batch_size=64):
    """Rows of (kind, eps, step, iters, clean_acc, adv_acc) for each attack setting."""
    clean = adversarial_accuracy(model, dataset, AttackConfig("fgsm", 0.0), batch_size)
    rows = []
    for cfg in configs:
        acc = adversarial_accuracy(model, dataset, cfg, batch_size) if cfg.epsilon > 0 else clean
        rows.append({"kind": cfg.kind, "eps": cfg.epsilon, "step": cfg.step_size,
                     "iters": cfg.iterations if cfg.kind == "pgd" else 1, "clean_acc": clean, "adv_acc": acc})
    return rows
