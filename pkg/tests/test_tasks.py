import gzip
import os
import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gdu.errors import ConfigurationError, IngestionError, ValidationError
from gdu.numerics import Rng
from gdu.tasks import (
    AddingTask, MergAutomaton, MergTask, TemporalOrderTask, class_index, encode_merg, gen_adding, gen_merg,
    gen_temporal_order, is_merg, is_reber, legal_successors, load_dataset, load_mnist_idx, make_task,
    permute_pixels, random_permutation, save_dataset, sc_lc, shortest_merg, shortest_merg_string,
)
from gdu.tasks.mnist import MnistSet, find_mnist, inverse_permutation, write_idx_images, write_idx_labels
from gdu.tasks.reber import SYMBOLS, step_correct
from gdu.tasks.temporal_order import trigger_windows

# ---------------------------------------------------------------- adding


def test_adding_structure():
    data = gen_adding(Rng(0), 200, 2000)
    assert data.values.shape == (2000, 200)
    assert np.all((data.markers[:, 0] >= 0) & (data.markers[:, 0] < 100))
    assert np.all((data.markers[:, 1] >= 100) & (data.markers[:, 1] < 200))
    assert np.all(data.indicators.sum(axis=1) == 2)
    expected = (data.values * data.indicators).sum(axis=1)
    np.testing.assert_allclose(data.targets, expected, atol=1e-15)
    b = data.to_batch()
    assert b.inputs.shape == (200, 2000, 2) and b.targets.shape == (2000, 1)
    np.testing.assert_array_equal(b.inputs[:, 5, 0], data.values[5])


def test_adding_statistics():
    data = gen_adding(Rng(1), 50, 200_000)
    assert data.targets.mean() == pytest.approx(1.0, abs=0.01)
    # constant-1 predictor: E[(u1 + u2 - 1)^2] = 2 * Var(U) = 1/6
    assert np.mean((data.targets - 1.0) ** 2) == pytest.approx(1 / 6, abs=0.003)


def test_adding_task_fixed_test_set():
    a, b = AddingTask(30, seed=4), AddingTask(30, seed=4)
    np.testing.assert_array_equal(a.test.inputs, b.test.inputs)
    assert len(a.test_data) == 500
    with pytest.raises(ConfigurationError):
        gen_adding(Rng(0), 1, 3)


# ---------------------------------------------------------------- temporal order


def test_temporal_order_windows_and_labels():
    L = 100
    data = gen_temporal_order(Rng(0), L, 5000)
    for k, (lo, hi) in enumerate(trigger_windows(L)):
        assert data.positions[:, k].min() == lo and data.positions[:, k].max() == hi
    assert trigger_windows(L) == [(0, 10), (33, 43), (66, 76)]
    rows = np.arange(len(data))[:, None]
    trig = data.symbols[rows, data.positions]
    assert np.all(trig >= 4)
    mask = np.ones_like(data.symbols, dtype=bool)
    mask[rows, data.positions] = False
    assert np.all(data.symbols[mask] < 4)
    assert np.all((data.symbols >= 4).sum(axis=1) == 3)
    bits = trig - 4
    np.testing.assert_array_equal(data.labels, bits[:, 0] * 4 + bits[:, 1] * 2 + bits[:, 2])


def test_temporal_order_classes():
    assert class_index("XXX") == 0 and class_index("YYY") == 7 and class_index("XYX") == 2
    data = gen_temporal_order(Rng(2), 100, 80_000)
    freq = np.bincount(data.labels, minlength=8) / len(data)
    # a constant predictor scores the frequency of its class
    assert np.all(np.abs(freq - 0.125) < 0.01)
    s = data.strings()[0]
    assert sum(c in "XY" for c in s) == 3 and len(s) == 100


def test_temporal_order_rejects_short():
    with pytest.raises(ConfigurationError):
        gen_temporal_order(Rng(0), 30, 1)
    TemporalOrderTask(33, test_size=5)


# ---------------------------------------------------------------- Reber / mERG

NESTED_EXAMPLE = "BT" + "BPVVE" + "BTSXSE" + "BTXXVVE" + "TE"


def test_reber_strings():
    for s in ("BTXSE", "BPVVE", "BTSXSE", "BTXXVVE", "BPTVPXVVE", "BTSSXXTVVE"):
        assert is_reber(s), s
    for s in ("BTXS", "BTE", "TXSE", "BPVVEE", "BTXXSE"):
        assert not is_reber(s), s


def test_merg_nested_example():
    assert is_merg(NESTED_EXAMPLE, 3)
    assert not is_merg(NESTED_EXAMPLE, 2)
    assert not is_merg(NESTED_EXAMPLE.replace("TE", "PE"), 3)


def test_shortest_lengths():
    assert [shortest_merg(m) for m in (10, 20, 40)] == [54, 104, 204]
    for m in (1, 3, 10, 20, 40):
        s = shortest_merg_string(m)
        assert len(s) == shortest_merg(m) and is_merg(s, m)
        assert shortest_merg_string(m) == s
    # no sampled string is shorter than the minimum
    lens = [len(s) for s in gen_merg(Rng(0), 10, 500)]
    assert min(lens) >= 54


def test_legal_successors():
    assert legal_successors("", 2) == {"B"}
    assert legal_successors("B", 2) == {"T", "P"}
    assert legal_successors("BT", 2) == {"B"}
    assert legal_successors("BTB", 2) == {"T", "P"}
    assert legal_successors("BTBTX", 2) == {"S", "X"}
    assert legal_successors("BTBPVV", 2) == {"E"}
    assert legal_successors("BTBPVVE", 2) == {"B"}
    assert legal_successors("BTBPVVEBTXSE", 2) == {"T"}
    assert legal_successors("BPBPVVEBTXSE", 2) == {"P"}
    assert legal_successors("BPBPVVEBTXSEP", 2) == {"E"}
    assert legal_successors(NESTED_EXAMPLE, 3) == frozenset()
    with pytest.raises(ValidationError):
        legal_successors("BTQ", 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_generated_strings_validate_and_corruptions_reject(seed, m):
    rng = Rng(seed)
    for s in gen_merg(rng, m, 5):
        assert is_merg(s, m)
        auto = MergAutomaton(m)
        # every symbol is among the successors legal after its prefix
        for i, c in enumerate(s):
            assert c in auto.legal_successors(s[:i])
        pos = int(rng.integers(0, len(s)))
        for c in SYMBOLS:
            if c not in auto.legal_successors(s[:pos]):
                assert not is_merg(s[:pos] + c + s[pos + 1:], m)
        assert not is_merg(s[:-1], m)
        assert not is_merg(s + "E", m)


def test_gen_merg_unique_exclude():
    rng = Rng(9)
    train = gen_merg(rng, 2, 200, unique=True)
    test = gen_merg(rng, 2, 50, unique=True, exclude=train)
    assert len(set(train)) == 200 and len(set(test)) == 50
    assert not set(train) & set(test)
    with pytest.raises(ConfigurationError):
        gen_merg(Rng(0), 1, 10_000, unique=True, max_len=9, max_tries=5)


def test_outer_symbol_balanced():
    strings = gen_merg(Rng(3), 2, 4000)
    frac = np.mean([s[1] == "T" for s in strings])
    assert frac == pytest.approx(0.5, abs=0.03)


def test_encode_merg_layout():
    strings = [NESTED_EXAMPLE, shortest_merg_string(3)]
    data = encode_merg(strings, 3)
    T = len(NESTED_EXAMPLE) - 1
    assert data.batch.inputs.shape == (T, 2, 7)
    assert data.batch.mask[:, 0].sum() == T
    assert data.batch.mask[:, 1].sum() == len(strings[1]) - 1
    assert list(data.lc_step) == [len(s) - 3 for s in strings]
    # the long-range step predicts the closing outer symbol
    assert SYMBOLS[data.batch.targets[data.lc_step[0], 0]] == "T"
    assert data.legal[data.lc_step[0], 0].sum() == 1
    with pytest.raises(ValidationError):
        encode_merg([NESTED_EXAMPLE[:-1]], 3)


def test_sc_lc_oracle_and_ties():
    data = encode_merg(gen_merg(Rng(0), 3, 40), 3)
    assert sc_lc(data.legal.astype(float), data) == (1.0, 1.0, 1.0)
    assert sc_lc(np.zeros(data.legal.shape), data)[:2] == (0.0, 0.0)
    # a model that is right everywhere but at the long-range step
    out = data.legal.astype(float)
    cols = np.arange(len(data))
    out[data.lc_step, cols] = 1.0 - out[data.lc_step, cols]
    sc, lc, both = sc_lc(out, data)
    assert (sc, lc, both) == (1.0, 0.0, 0.0)
    # top-|S| rule: two legal symbols must both outrank every illegal one
    legal = np.array([True, True, False, False])
    assert step_correct(np.array([0.5, 0.4, 0.3, 0.0]), legal)
    assert not step_correct(np.array([0.5, 0.3, 0.4, 0.0]), legal)
    assert not step_correct(np.array([0.5, 0.3, 0.3, 0.0]), legal)


def test_random_lc_baseline():
    data = encode_merg(gen_merg(Rng(5), 10, 2000), 10)
    rng = Rng(6)
    out = data.legal.astype(float)
    cols = np.arange(len(data))
    guess = rng.integers(0, 2, size=len(data))
    out[data.lc_step, cols] = 0.0
    out[data.lc_step, cols, np.where(guess == 0, SYMBOLS.index("T"), SYMBOLS.index("P"))] = 1.0
    _, lc, _ = sc_lc(out, data)
    assert lc == pytest.approx(0.5, abs=0.05)


def test_merg_task_sets():
    task = MergTask(2, seed=1, train_size=100, test_size=30)
    assert not set(task.train_strings) & set(task.test_strings)
    b = task.train_batch(Rng(0), 1)
    assert b.inputs.shape[1] == 1 and b.mask[-1, 0] == 1.0


def test_make_task():
    assert make_task("adding", length=20, test_size=5).input_size == 2
    assert make_task("temporal_order", length=40, test_size=5).output_size == 8
    with pytest.raises(ConfigurationError):
        make_task("nope")


# ---------------------------------------------------------------- MNIST IDX


def _write_fake(tmp_path, n=12, rows=4, cols=3, seed=0, gz=False):
    rng = Rng(seed)
    pixels = rng.integers(0, 256, size=(n, rows * cols)).astype(np.uint8)
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx_images(ip, pixels, rows, cols)
    write_idx_labels(lp, labels)
    if gz:
        for p in (ip, lp):
            with open(p, "rb") as src, gzip.open(str(p) + ".gz", "wb") as dst:
                dst.write(src.read())
        ip, lp = tmp_path / "img.idx.gz", tmp_path / "lab.idx.gz"
    return ip, lp, pixels, labels


@pytest.mark.parametrize("gz", [False, True])
def test_idx_round_trip(tmp_path, gz):
    ip, lp, pixels, labels = _write_fake(tmp_path, gz=gz)
    data = load_mnist_idx(ip, lp)
    np.testing.assert_array_equal(data.pixels, pixels)
    np.testing.assert_array_equal(data.labels, labels)
    assert data.images.min() >= 0.0 and data.images.max() <= 1.0
    np.testing.assert_array_equal(data.images, pixels / 255.0)
    b = data.to_batch()
    assert b.inputs.shape == (12, 12, 1)
    np.testing.assert_array_equal(b.inputs[:, 3, 0], pixels[3] / 255.0)


def test_idx_header_is_big_endian(tmp_path):
    ip, _, _, _ = _write_fake(tmp_path, n=7, rows=28, cols=28)
    head = open(ip, "rb").read(16)
    assert head[:4] == b"\x00\x00\x08\x03"
    assert struct.unpack(">I", head[4:8])[0] == 7 and head[8:16] == b"\x00\x00\x00\x1c" * 2


def test_idx_errors(tmp_path):
    ip, lp, _, _ = _write_fake(tmp_path)
    raw = open(ip, "rb").read()
    bad = tmp_path / "bad.idx"
    bad.write_bytes(raw[:-5])
    with pytest.raises(IngestionError) as e:
        load_mnist_idx(bad, lp)
    assert e.value.offset == len(raw) - 5
    bad.write_bytes(raw[:10])
    with pytest.raises(IngestionError):
        load_mnist_idx(bad, lp)
    bad.write_bytes(b"\x00\x00\x08\x01" + raw[4:])
    with pytest.raises(IngestionError) as e:
        load_mnist_idx(bad, lp)
    assert e.value.offset == 0
    bad.write_bytes(raw + b"\x00")
    with pytest.raises(IngestionError) as e:
        load_mnist_idx(bad, lp)
    assert e.value.offset == len(raw)
    short_lab = tmp_path / "short.idx"
    write_idx_labels(short_lab, np.zeros(11))
    with pytest.raises(IngestionError):
        load_mnist_idx(ip, short_lab)
    write_idx_labels(short_lab, np.full(12, 10))
    with pytest.raises(IngestionError):
        load_mnist_idx(ip, short_lab)
    with pytest.raises(IngestionError):
        load_mnist_idx(tmp_path / "missing", lp)


def test_permutation_bijection_and_inverse(tmp_path):
    ip, lp, pixels, _ = _write_fake(tmp_path)
    data = load_mnist_idx(ip, lp)
    perm = random_permutation(Rng(11), 12)
    assert sorted(perm) == list(range(12))
    p = permute_pixels(data, perm)
    for i in range(len(data)):
        assert Counter(p.pixels[i].tolist()) == Counter(pixels[i].tolist())
    back = permute_pixels(p, inverse_permutation(perm))
    np.testing.assert_array_equal(back.pixels, pixels)
    np.testing.assert_array_equal(back.permutation, np.arange(12))
    with pytest.raises(ConfigurationError):
        permute_pixels(data, np.zeros(12, dtype=int))


def test_fisher_yates_uniform():
    rng = Rng(0)
    counts = Counter(tuple(random_permutation(rng, 3)) for _ in range(12_000))
    assert len(counts) == 6
    assert all(abs(c - 2000) < 200 for c in counts.values())
    a, b = random_permutation(Rng(5), 784), random_permutation(Rng(5), 784)
    np.testing.assert_array_equal(a, b)


def test_same_permutation_for_train_and_test():
    from gdu.tasks import PMnistTask

    rng = Rng(1)
    tr = MnistSet(rng.integers(0, 256, size=(20, 16)).astype(np.uint8), np.arange(20) % 10)
    te = MnistSet(rng.integers(0, 256, size=(8, 16)).astype(np.uint8), np.arange(8) % 10)
    task = PMnistTask(tr, te, perm_seed=3)
    np.testing.assert_array_equal(task.train_data.permutation, task.test_data.permutation)
    np.testing.assert_array_equal(task.test_data.pixels, te.pixels[:, task.test_data.permutation])


def test_find_mnist(tmp_path, monkeypatch):
    monkeypatch.delenv("GDU_MNIST_DIR", raising=False)
    assert find_mnist(str(tmp_path)) is None
    for name in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
                 "t10k-labels-idx1-ubyte.gz"):
        (tmp_path / name).write_bytes(b"")
    monkeypatch.setenv("GDU_MNIST_DIR", str(tmp_path))
    found = find_mnist()
    assert found is not None and found[-1].endswith(".gz")


# ---------------------------------------------------------------- dataset cache


def test_dataset_cache_round_trip(tmp_path):
    data = gen_adding(Rng(0), 20, 10)
    path = tmp_path / "adding.npz"
    save_dataset(path, "adding", {"length": 20}, 0, {"values": data.values, "markers": data.markers})
    header, arrays = load_dataset(path)
    assert header["task"] == "adding" and header["params"] == {"length": 20}
    np.testing.assert_array_equal(arrays["values"], data.values)
    assert os.path.exists(tmp_path / "adding.json")
    assert not [p for p in os.listdir(tmp_path) if p.endswith(".tmp")]
