import numpy as np
import pytest

from conftest import toy_config, weights_digest
from lidiff.adversarial import (AttackConfig, adversarial_accuracy, attack, fgsm, input_gradient, pgd,
                                robustness_sweep)
from lidiff.model import SpiLiFormer


@pytest.fixture(scope="module")
def fresh_model():
    return SpiLiFormer(toy_config(base_channels=8), seed=1)


def sample(rng, n=6):
    return rng.uniform(0, 1, (n, 1, 16, 16)).astype(np.float32), rng.integers(0, 2, n)


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig("cw")
    with pytest.raises(ValueError):
        AttackConfig("fgsm", epsilon=-0.1)
    with pytest.raises(ValueError):
        AttackConfig("pgd", step_size=0.0)
    with pytest.raises(ValueError):
        AttackConfig("pgd", iterations=0)
    assert AttackConfig().epsilon == 8 / 255


def test_fgsm_zero_eps_is_identity(fresh_model, rng):
    x, y = sample(rng)
    assert fgsm(x, y, fresh_model, 0.0).tobytes() == x.tobytes()


@pytest.mark.parametrize("eps", [0.01, 0.1, 0.5])
def test_fgsm_budget_and_box(fresh_model, rng, eps):
    x, y = sample(rng)
    xa = fgsm(x, y, fresh_model, eps)
    assert np.max(np.abs(xa.astype(np.float64) - x)) <= eps
    assert xa.min() >= 0 and xa.max() <= 1


def test_one_step_pgd_equals_fgsm(fresh_model, rng):
    x, y = sample(rng)
    a = fgsm(x, y, fresh_model, 0.1)
    b = pgd(x, y, fresh_model, AttackConfig("pgd", 0.1, 0.1, 1))
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("random_start", [False, True])
def test_pgd_projection_every_iterate(fresh_model, rng, random_start):
    x, y = sample(rng)
    x64 = x.astype(np.float64)
    seen = []

    def check(it, xa):
        seen.append(it)
        assert np.all(np.abs(xa - x64) <= 0.05)
        assert xa.min() >= 0 and xa.max() <= 1

    pgd(x, y, fresh_model, AttackConfig("pgd", 0.05, 0.02, 6, random_start=random_start), on_step=check)
    assert seen == list(range(6))


def test_attacks_leave_weights_alone(fresh_model, rng):
    before = weights_digest(fresh_model)
    flags = [p.requires_grad for p in fresh_model.parameters()]
    x, y = sample(rng)
    attack(x, y, fresh_model, AttackConfig("pgd", 0.1, 0.03, 3))
    assert weights_digest(fresh_model) == before
    assert [p.requires_grad for p in fresh_model.parameters()] == flags
    assert all(p.grad is None for p in fresh_model.parameters())


def test_input_gradient_shape_and_sign_zero(fresh_model):
    x = np.zeros((2, 1, 16, 16), dtype=np.float32)
    g = input_gradient(fresh_model, x, np.array([0, 1]))
    assert g.shape == x.shape and np.all(np.isfinite(g))
    # an all-zero input gives no spikes, hence zero gradient and no perturbation
    if not g.any():
        assert fgsm(x, np.array([0, 1]), fresh_model, 0.3).tobytes() == x.tobytes()


def test_fgsm_sweep_degrades_monotonically(trained_toy, blobs):
    model, _ = trained_toy
    accs = [adversarial_accuracy(model, blobs[1], AttackConfig("fgsm", e)) for e in (0, 0.05, 0.1, 0.2, 0.4)]
    assert accs[0] >= 0.95
    assert all(a >= b for a, b in zip(accs, accs[1:])), accs


def test_more_pgd_steps_hurt_at_least_as_much(trained_toy, blobs):
    model, _ = trained_toy
    ev = blobs[1]
    five = adversarial_accuracy(model, ev, AttackConfig("pgd", 0.2, 0.05, 5))
    ten = adversarial_accuracy(model, ev, AttackConfig("pgd", 0.2, 0.05, 10))
    assert ten <= five


def test_sweep_rows(trained_toy, blobs):
    model, _ = trained_toy
    rows = robustness_sweep(model, blobs[1].subset(np.arange(16)), [AttackConfig("fgsm", 0.0),
                                                                     AttackConfig("pgd", 0.1, 0.05, 2)])
    assert [r["kind"] for r in rows] == ["fgsm", "pgd"]
    assert rows[0]["adv_acc"] == rows[0]["clean_acc"]
    assert rows[1]["iters"] == 2
