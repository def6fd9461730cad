import numpy as np
import pytest
from conftest import write_idx

from ditherprop.data import (IMAGES_MAGIC, LABELS_MAGIC, Dataset, IdxFormatError, batches, load_idx,
                             load_mnist, mnist_available, synthetic_gaussian_task)
from ditherprop.model import mlp
from ditherprop.tensor import Rng
from ditherprop.trainer import TrainConfig, evaluate, train

PIXELS = np.array([[[0, 255], [51, 102]], [[255, 0], [0, 153]]], dtype=np.uint8)


def fixture(tmp_path, gz=False):
    ext = ".gz" if gz else ""
    img = write_idx(tmp_path / f"img{ext}", PIXELS, IMAGES_MAGIC, gz)
    lab = write_idx(tmp_path / f"lab{ext}", np.array([3, 7]), LABELS_MAGIC, gz)
    return img, lab


@pytest.mark.parametrize("gz", [False, True])
def test_load_idx_fixture(tmp_path, gz):
    ds = load_idx(*fixture(tmp_path, gz))
    assert len(ds) == 2 and ds.n_features == 4
    np.testing.assert_array_equal(ds.images, [[0, 1, 0.2, 0.4], [1, 0, 0, 0.6]])
    np.testing.assert_array_equal(ds.labels, [3, 7])
    assert ds.image_shape == (1, 2, 2)


def test_truncated_file_names_offset(tmp_path):
    img, lab = fixture(tmp_path)
    img.write_bytes(img.read_bytes()[:-3])
    with pytest.raises(IdxFormatError, match="offset 21"):
        load_idx(img, lab)
    img.write_bytes(img.read_bytes()[:6])
    with pytest.raises(IdxFormatError, match="offset 6"):
        load_idx(img, lab)


def test_bad_magic_and_trailing_bytes(tmp_path):
    img, lab = fixture(tmp_path)
    with pytest.raises(IdxFormatError, match="bad magic"):
        load_idx(lab, img)
    img.write_bytes(img.read_bytes() + b"\0")
    with pytest.raises(IdxFormatError, match="trailing"):
        load_idx(img, lab)


def test_count_mismatch(tmp_path):
    img, _ = fixture(tmp_path)
    lab = write_idx(tmp_path / "lab3", np.array([1, 2, 3]), LABELS_MAGIC)
    with pytest.raises(IdxFormatError, match="count mismatch"):
        load_idx(img, lab)


def test_load_mnist_directory(tmp_path, monkeypatch):
    monkeypatch.delenv("DATA_DIR", raising=False)
    assert not mnist_available()
    with pytest.raises(FileNotFoundError):
        load_mnist(None)
    img = np.zeros((3, 28, 28), dtype=np.uint8)
    write_idx(tmp_path / "train-images-idx3-ubyte", img, IMAGES_MAGIC)
    write_idx(tmp_path / "train-labels-idx1-ubyte", np.array([0, 1, 2]), LABELS_MAGIC)
    write_idx(tmp_path / "t10k-images-idx3-ubyte.gz", img[:2], IMAGES_MAGIC, gz=True)
    write_idx(tmp_path / "t10k-labels-idx1-ubyte.gz", np.array([4, 5]), LABELS_MAGIC, gz=True)
    monkeypatch.setenv("DATA_DIR", str(tmp_path))
    assert mnist_available()
    assert load_mnist(split="train").images.shape == (3, 784)
    assert load_mnist(tmp_path, "test").labels.tolist() == [4, 5]


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), np.array([0, 5]), 3)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), np.array([0]), 3)


def test_synthetic_deterministic_and_balanced():
    a = synthetic_gaussian_task(103, 9, 4, seed=5)
    b = synthetic_gaussian_task(103, 9, 4, seed=5)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    counts = np.bincount(a.labels, minlength=4)
    assert counts.max() - counts.min() <= 1
    assert a.images.min() >= 0 and a.images.max() <= 1
    with pytest.raises(ValueError):
        synthetic_gaussian_task(10, 3, 1)


def test_synthetic_two_class_linearly_separable():
    ds = synthetic_gaussian_task(400, 20, 2, seed=0, separation=20.0, noise=0.1)
    net = mlp([20, 2])
    train(net, ds, TrainConfig(lr=0.1, epochs=5, batch_size=20, weight_decay=0.0))
    assert evaluate(net, ds) > 0.99


def test_batches_sizes_and_cover():
    ds = synthetic_gaussian_task(10, 3, 2)
    assert [len(y) for _, y in batches(ds, 3, Rng(0))] == [3, 3, 3, 1]
    assert len(list(batches(ds, 10, Rng(0)))) == 1
    big = Dataset(np.arange(50.0).reshape(50, 1), np.zeros(50, dtype=np.int64), 2)
    for epoch in range(3):
        seen = np.concatenate([x[:, 0] for x, _ in batches(big, 7, Rng(1, (epoch,)))])
        assert sorted(seen.tolist()) == list(range(50))
    with pytest.raises(ValueError):
        list(batches(ds, 0))
