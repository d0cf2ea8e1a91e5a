import csv
import math

import numpy as np
import pytest

from conftest import toy_config
from lidiff.data import make_toy_dataset
from lidiff.model import SpiLiFormer, load_checkpoint
from lidiff.tensor import Tensor
from lidiff.train import (METRIC_COLUMNS, OptimState, TrainingDiverged, TrainRecipe, adamw_step, augment_batch,
                          clip_grad_norm, cosine_lr, evaluate, train_loop)


def P(v):
    return Tensor(np.array(v, dtype=np.float64), requires_grad=True)


# -- AdamW --------------------------------------------------------------------------
def test_adamw_zero_gradient_no_decay():
    w = P([1.0, -2.0])
    adamw_step([w], [np.zeros(2)], OptimState(lr=0.1))
    np.testing.assert_array_equal(w.data, [1.0, -2.0])


def test_adamw_first_step():
    w = P([1.0])
    adamw_step([w], [np.array([1.0])], OptimState(lr=0.1))
    # m_hat = 1, v_hat = 1 -> step = lr * 1 / (1 + eps)
    assert w.data[0] == pytest.approx(1.0 - 0.1 / (1 + 1e-8), abs=1e-12)


def test_adamw_pure_decay():
    w = P([2.0])
    st = OptimState(lr=0.1, weight_decay=0.5)
    for _ in range(3):
        before = w.data[0]
        adamw_step([w], [np.zeros(1)], st)
        assert w.data[0] == pytest.approx(before - 0.1 * 0.5 * before)


def test_adamw_decay_mask():
    a, b = P([1.0]), P([1.0])
    adamw_step([a, b], [np.zeros(1), np.zeros(1)], OptimState(lr=0.1, weight_decay=0.5), decay=[True, False])
    assert a.data[0] == 0.95 and b.data[0] == 1.0


def test_adamw_errors_name_parameter():
    with pytest.raises(FloatingPointError, match="blk.w"):
        adamw_step([P([1.0])], [np.array([np.nan])], OptimState(), names=["blk.w"])
    with pytest.raises(ValueError, match="shape"):
        adamw_step([P([1.0])], [np.zeros(2)], OptimState())


def test_clip_grad_norm():
    grads, norm = clip_grad_norm([np.array([3.0]), np.array([4.0])], 1.0)
    assert norm == 5.0
    assert math.hypot(grads[0][0], grads[1][0]) == pytest.approx(1.0, rel=1e-5)
    same, _ = clip_grad_norm([np.array([0.3])], 1.0)
    assert same[0][0] == 0.3


# -- schedule --------------------------------------------------------------------------
def test_cosine_examples():
    r = TrainRecipe(epochs=10, base_lr=0.1, warmup_epochs=0)
    assert cosine_lr(0, r) == 0.1
    assert cosine_lr(5, r) == pytest.approx(0.05)
    lrs = [cosine_lr(e, r) for e in range(10)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_lr(10, r)


def test_cosine_warmup():
    r = TrainRecipe(epochs=30, base_lr=0.05, warmup_epochs=5)
    lrs = [cosine_lr(e, r) for e in range(30)]
    assert lrs[:5] == pytest.approx([0.05 * (e + 1) / 6 for e in range(5)])
    assert lrs[5] == 0.05
    assert all(a >= b for a, b in zip(lrs[5:], lrs[6:]))


def test_recipe_validation_and_kv():
    with pytest.raises(ValueError):
        TrainRecipe(epochs=0)
    r = TrainRecipe.from_kv({"epochs": "7", "augment": "true"})
    assert r.epochs == 7 and r.augment
    with pytest.raises(ValueError, match="valid keys"):
        TrainRecipe.from_kv({"lr": "1"})


# -- loop ------------------------------------------------------------------------------
def small(seed=0):
    return make_toy_dataset("blobs", 32, seed=seed)


def test_lr_zero_keeps_parameters(tmp_path):
    model = SpiLiFormer(toy_config(base_channels=8), seed=0)
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    # one full batch per epoch so every epoch sees identical batch statistics
    hist = train_loop(model, small(), TrainRecipe(epochs=3, base_lr=0.0, weight_decay=0.0, batch_size=32), small(1))
    for n, p in model.named_parameters():
        np.testing.assert_array_equal(p.data, before[n])
    assert len({h["eval_acc"] for h in hist}) == 1
    losses = [h["train_loss"] for h in hist]
    assert max(losses) - min(losses) < 1e-5  # only summation order differs


def test_runs_are_reproducible(tmp_path):
    hists = []
    for i in range(2):
        model = SpiLiFormer(toy_config(base_channels=8), seed=3)
        hists.append(train_loop(model, small(), TrainRecipe(epochs=2, batch_size=8, seed=5), small(1),
                                csv_path=tmp_path / f"m{i}.csv"))
    assert hists[0] == hists[1]
    assert (tmp_path / "m0.csv").read_bytes() == (tmp_path / "m1.csv").read_bytes()


def test_metrics_csv_and_checkpoint(tmp_path):
    model = SpiLiFormer(toy_config(base_channels=8), seed=0)
    train_loop(model, small(), TrainRecipe(epochs=2, batch_size=16), csv_path=tmp_path / "m.csv",
               checkpoint_dir=tmp_path / "ck")
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert tuple(rows[0]) == METRIC_COLUMNS and len(rows) == 2
    back, meta = load_checkpoint(tmp_path / "ck")
    assert meta["epochs"] == "2"


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_divergence_aborts():
    model = SpiLiFormer(toy_config(base_channels=8), seed=0)
    model.head.fc.weight.data[:] = np.inf
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train_loop(model, small(), TrainRecipe(epochs=1, batch_size=16))


def test_empty_dataset():
    ds = small()
    with pytest.raises(ValueError, match="empty"):
        train_loop(SpiLiFormer(toy_config(base_channels=8)), ds.subset([]), TrainRecipe(epochs=1))


def test_loss_falls_over_first_ten_epochs(trained_toy):
    _, hist = trained_toy
    losses = np.array([h["train_loss"] for h in hist[:10]])
    avg = np.convolve(losses, np.ones(3) / 3, mode="valid")
    assert np.all(np.diff(avg) < 0)
    assert all(math.isfinite(h["loss2"]) for h in hist)


def test_threaded_evaluation_matches(trained_toy, blobs):
    model, _ = trained_toy
    assert evaluate(model, blobs[1], batch_size=16, threads=3) == evaluate(model, blobs[1], batch_size=16)


def test_augment_batch():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (6, 1, 8, 8)).astype(np.float32)
    out = augment_batch(x, rng)
    assert out.shape == x.shape and out.dtype == x.dtype
    assert 0 <= out.min() and out.max() <= 1
