import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidiff.data import (CIFAR_RECORD, Dataset, EventStream, make_toy_dataset, rasterize_events, read_cifar10_batches,
                         read_events, write_events)


def write_cifar(path, labels, rng):
    recs = np.zeros((len(labels), CIFAR_RECORD), dtype=np.uint8)
    recs[:, 0] = labels
    recs[:, 1:] = rng.integers(0, 256, size=(len(labels), 3072))
    recs.tofile(path)
    return recs


def test_cifar_record_count_and_scaling(tmp_path):
    rng = np.random.default_rng(0)
    recs = write_cifar(tmp_path / "b.bin", np.arange(20) % 10, rng)
    ds = read_cifar10_batches(tmp_path / "b.bin")
    assert len(ds) == 20 and ds.input_shape == (3, 32, 32)
    np.testing.assert_array_equal(ds.labels, np.arange(20) % 10)
    # channel-major layout: the first 1024 bytes after the label are the red plane
    assert ds.inputs[3, 0, 0, 1] == np.float32(recs[3, 2] / 255.0)
    assert ds.inputs[3, 2, 31, 31] == np.float32(recs[3, 3072] / 255.0)
    assert 0.0 <= ds.inputs.min() and ds.inputs.max() <= 1.0


def test_standard_batch_size_arithmetic():
    assert 30730000 // CIFAR_RECORD == 10000 and 30730000 % CIFAR_RECORD == 0


def test_cifar_bad_label(tmp_path):
    write_cifar(tmp_path / "b.bin", [1, 255], np.random.default_rng(1))
    with pytest.raises(ValueError, match="label 255.*offset 3073"):
        read_cifar10_batches(tmp_path / "b.bin")


def test_cifar_truncated(tmp_path):
    write_cifar(tmp_path / "b.bin", [1, 2], np.random.default_rng(2))
    raw = (tmp_path / "b.bin").read_bytes()
    (tmp_path / "b.bin").write_bytes(raw[:-100])
    with pytest.raises(ValueError, match="truncated record at byte offset 3073"):
        read_cifar10_batches(tmp_path / "b.bin")


def test_cifar_ltf_roundtrip(tmp_path):
    write_cifar(tmp_path / "b.bin", [3, 7, 0], np.random.default_rng(3))
    ds = read_cifar10_batches(tmp_path / "b.bin")
    ds.save_ltf(tmp_path / "ltf")
    back = Dataset.load_ltf(tmp_path / "ltf")
    assert back.inputs.tobytes() == ds.inputs.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.num_classes == 10


@pytest.mark.parametrize("kind", ["blobs", "bars"])
def test_toy_deterministic_and_balanced(kind):
    a = make_toy_dataset(kind, 101, seed=4)
    b = make_toy_dataset(kind, 101, seed=4)
    assert a.inputs.tobytes() == b.inputs.tobytes()
    assert abs(int(np.sum(a.labels == 0)) - int(np.sum(a.labels == 1))) <= 1
    assert a.input_shape == (1, 16, 16)
    assert 0.0 <= a.inputs.min() and a.inputs.max() <= 1.0


def test_toy_ltf_roundtrip(tmp_path):
    ds = make_toy_dataset("bars", 10, seed=0)
    ds.save_ltf(tmp_path)
    assert Dataset.load_ltf(tmp_path).inputs.tobytes() == ds.inputs.tobytes()


def test_blobs_linearly_separable():
    train = make_toy_dataset("blobs", 200, seed=0)
    test = make_toy_dataset("blobs", 200, seed=1)
    flat = train.inputs.reshape(200, -1)
    c0, c1 = flat[train.labels == 0].mean(0), flat[train.labels == 1].mean(0)
    w, b = c1 - c0, -(c1 - c0) @ (c0 + c1) / 2
    pred = (test.inputs.reshape(200, -1) @ w + b > 0).astype(int)
    assert np.mean(pred == test.labels) >= 0.99


def test_toy_errors():
    with pytest.raises(ValueError, match="unknown"):
        make_toy_dataset("circles", 10)
    with pytest.raises(ValueError):
        make_toy_dataset("blobs", 1)


def test_dataset_label_range():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 2, 2)), [0, 5], 2)


# -- events ----------------------------------------------------------------------
def test_rasterize_empty():
    out = rasterize_events(EventStream.from_lists([], [], [], []), 3, 4, 4)
    assert out.shape == (3, 2, 4, 4) and not out.any()


def test_rasterize_single_mid_event():
    ev = EventStream.from_lists([500], [3], [5], [1])
    out = rasterize_events(ev, 2, 8, 8, t_range=(0, 1000))
    assert out.sum() == 1 and out[1, 1, 5, 3] == 1


def test_rasterize_counts_mode():
    ev = EventStream.from_lists([0, 1, 2, 10], [1, 1, 1, 0], [0, 0, 0, 0], [0, 0, 0, 1])
    out = rasterize_events(ev, 2, 2, 2, counts=True)
    assert out[0, 0, 0, 1] == 3 and out[1, 1, 0, 0] == 1


@settings(max_examples=40)
@given(st.integers(0, 2**31 - 1), st.integers(1, 60), st.integers(1, 5))
def test_rasterize_bounds_and_window_permutation(seed, n, T):
    rng = np.random.default_rng(seed)
    window = rng.integers(0, T, size=n)
    t = np.sort(window * 100 + 50)  # every event sits mid-window
    x, y, p = rng.integers(0, 6, n), rng.integers(0, 5, n), rng.integers(0, 2, n)
    ev = EventStream.from_lists(t, x, y, p, width=6, height=5)
    out = rasterize_events(ev, T, 5, 6, t_range=(0, 100 * T))
    assert set(np.unique(out)) <= {0.0, 1.0}
    assert out.sum() <= n
    # shuffle events within each window (timestamps are equal inside one)
    order = np.lexsort((rng.random(n), t))
    shuffled = EventStream.from_lists(t[order], x[order], y[order], p[order])
    np.testing.assert_array_equal(rasterize_events(shuffled, T, 5, 6, t_range=(0, 100 * T)), out)


def test_event_stream_validation():
    with pytest.raises(ValueError, match="non-decreasing"):
        EventStream.from_lists([5, 1], [0, 0], [0, 0], [0, 0])
    with pytest.raises(ValueError, match="polarity"):
        EventStream.from_lists([1], [0], [0], [2])
    with pytest.raises(ValueError, match="outside"):
        EventStream.from_lists([1], [9], [0], [0], width=4)


def test_event_file_roundtrip(tmp_path):
    ev = EventStream.from_lists([1, 2, 70000], [3, 4, 5], [6, 7, 8], [0, 1, 1])
    write_events(tmp_path / "e.bin", ev)
    assert (tmp_path / "e.bin").stat().st_size == 3 * 9
    back = read_events(tmp_path / "e.bin")
    assert back.events.tobytes() == ev.events.tobytes()
    (tmp_path / "bad.bin").write_bytes(b"\x00" * 10)
    with pytest.raises(ValueError, match="9-byte"):
        read_events(tmp_path / "bad.bin")
