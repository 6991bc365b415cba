import numpy as np
import pytest
from numpy.testing import assert_array_equal

from attackability.data import LabeledDataset, ingest_cifar10, make_synthetic, make_two_scale
from attackability.errors import ConfigError, FormatError, ProvenanceError
from attackability.nn_core import DenseNetSpec, TrainConfig, train


def nearest_mean_accuracy(train_ds, test_ds):
    K = train_ds.n_classes
    means = np.stack([train_ds.samples[train_ds.labels == k].mean(axis=0) for k in range(K)])
    pred = np.argmin(((test_ds.samples[:, None, :] - means) ** 2).sum(axis=-1), axis=1)
    return np.mean(pred == test_ds.labels)


def test_same_seed_same_data():
    a = make_synthetic(4, 5, 30, seed=9)
    b = make_synthetic(4, 5, 30, seed=9)
    for split in a:
        assert_array_equal(a[split].samples, b[split].samples)
        assert a[split].sample_ids == b[split].sample_ids
    c = make_synthetic(4, 5, 30, seed=10)
    assert not np.array_equal(a["train"].samples, c["train"].samples)


def test_split_sizes_and_disjoint_ids():
    s = make_synthetic(3, 4, 60, seed=0)
    assert [len(s[k]) for k in ("train", "validation", "test")] == [3 * 40, 3 * 10, 3 * 10]
    ids = [set(s[k].sample_ids) for k in s]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    for k in s:
        assert s[k].split == k
        assert np.all((s[k].samples >= 0) & (s[k].samples <= 1))


def test_zero_spread_is_perfectly_separable():
    s = make_synthetic(5, 6, 40, spread=0.0, seed=2)
    assert nearest_mean_accuracy(s["train"], s["test"]) == 1.0


def test_default_blobs_are_learnable():
    s = make_synthetic(10, 32, 600, seed=0)
    tr, te = s["train"], s["test"]
    cfg = TrainConfig(batch_size=64, epochs=20, learning_rate=0.05, lr_drop_epochs=(15,), shuffle_seed=0)
    model = train(DenseNetSpec((32, 64, 10), ("relu",), 1), tr.samples, tr.labels, cfg)
    assert np.mean(model.predict(te.samples) == te.labels) >= 0.9


def test_bad_counts_rejected():
    with pytest.raises(ConfigError):
        make_synthetic(1, 5, 30)
    with pytest.raises(ConfigError):
        make_synthetic(3, 5, 0)
    with pytest.raises(ConfigError):
        make_synthetic(3, 5, 30, spread=-1.0)


def test_two_scale_geometry():
    s = make_two_scale(n_classes=4, dim=10, n_per_class=300, seed=1)
    tr = s["train"]
    # class 0 owns coordinates 0-1, class 1 owns 2-3
    m0 = tr.samples[tr.labels == 0].mean(axis=0)
    m1 = tr.samples[tr.labels == 1].mean(axis=0)
    assert m0[:2].min() - m1[:2].max() > 0.3
    # dense classes share the sparse block and differ only beyond it
    m2 = tr.samples[tr.labels == 2].mean(axis=0)
    m3 = tr.samples[tr.labels == 3].mean(axis=0)
    assert np.abs(m2[:4] - m3[:4]).max() < 0.05
    assert np.abs(m2[4:] - m3[4:]).max() > 0.1
    assert nearest_mean_accuracy(tr, s["test"]) > 0.95


def test_two_scale_rejects_crowded_blocks():
    with pytest.raises(ConfigError):
        make_two_scale(n_classes=10, dim=10, n_sparse=5, sparse_width=2)
    with pytest.raises(ConfigError):
        make_two_scale(n_classes=6, dim=4, n_sparse=1, sparse_width=2)


def test_dense_classes_distinct_on_small_shared_block():
    for seed in range(20):
        tr = make_two_scale(n_classes=5, dim=6, n_per_class=60, seed=seed, n_sparse=1)["train"]
        m = np.stack([tr.samples[tr.labels == k].mean(axis=0) for k in range(1, 5)])
        signs = {tuple(np.sign(row[2:] - 0.5)) for row in m}
        assert len(signs) == 4


def test_dataset_invariants():
    with pytest.raises(ValueError):
        LabeledDataset(np.array([[1.5]]), [0], ["a"])
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 1)), [0, 0], ["a", "a"])
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((1, 1)), [3], ["a"], n_classes=2)


def test_save_load_checks_split(tmp_path):
    s = make_synthetic(3, 4, 30, seed=0)
    s["validation"].save(tmp_path / "v.npz")
    back = LabeledDataset.load(tmp_path / "v.npz", expected_split="validation")
    assert_array_equal(back.samples, s["validation"].samples)
    assert back.sample_ids == s["validation"].sample_ids
    with pytest.raises(ProvenanceError):
        LabeledDataset.load(tmp_path / "v.npz", expected_split="test")


def cifar_record(label, fill):
    return bytes([label]) + bytes(fill)


def test_cifar_two_record_fixture(tmp_path):
    first = [0] * 3072
    first[0] = 255          # red plane, pixel (0, 0)
    first[1024 + 33] = 51   # green plane, pixel (1, 1)
    second = [128] * 3072
    path = tmp_path / "data_batch_1.bin"
    path.write_bytes(cifar_record(7, first) + cifar_record(2, second))
    ds = ingest_cifar10(path)
    assert_array_equal(ds.labels, [7, 2])
    assert ds.samples.shape == (2, 3072)
    assert ds.samples[0, 0] == 1.0
    assert ds.samples[0, 1024 + 33] == 0.2
    assert np.count_nonzero(ds.samples[0]) == 2
    assert_array_equal(ds.samples[1], np.full(3072, 128 / 255))
    assert ds.sample_ids == ["data_batch_1.bin:0", "data_batch_1.bin:1"]


def test_cifar_partial_record_reports_offset(tmp_path):
    path = tmp_path / "b.bin"
    path.write_bytes(cifar_record(1, [0] * 3072) + b"\x01\x02\x03")
    with pytest.raises(FormatError, match="offset 3073"):
        ingest_cifar10(path)


def test_cifar_bad_label(tmp_path):
    path = tmp_path / "b.bin"
    path.write_bytes(cifar_record(3, [0] * 3072) + cifar_record(12, [0] * 3072))
    with pytest.raises(FormatError, match="offset 3073"):
        ingest_cifar10(path)
