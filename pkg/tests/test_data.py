import numpy as np
import pytest

from nenni.data import (
    load_idx,
    load_idx_images,
    load_idx_labels,
    save_adversarial_idx,
    save_idx,
    synthetic_bars,
)


def test_idx_uint8_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, size=(7, 5, 4), dtype=np.uint8)
    path = tmp_path / "images.idx"
    save_idx(path, arr)
    back = load_idx(path)
    assert back.dtype == np.uint8
    assert np.array_equal(arr, back)
    # big-endian image magic 0x00000803
    assert path.read_bytes()[:4] == bytes([0, 0, 8, 3])


def test_idx_labels_round_trip(tmp_path):
    labels = np.array([0, 1, 2, 3, 1], dtype=np.uint8)
    path = tmp_path / "labels.idx"
    save_idx(path, labels)
    assert path.read_bytes()[:4] == bytes([0, 0, 8, 1])
    assert np.array_equal(load_idx_labels(path), labels.astype(np.int64))


def test_idx_float32_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    arr = rng.random((3, 6, 6)).astype(np.float32)
    path = tmp_path / "adv.idx"
    save_idx(path, arr)
    assert np.array_equal(load_idx(path), arr)


def test_adversarial_dump_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    x = rng.random((4, 1, 8, 8))
    path = tmp_path / "adv.idx"
    save_adversarial_idx(path, x)
    back = load_idx_images(path)
    assert back.shape == (4, 1, 8, 8)
    assert np.allclose(back, x, atol=1e-7)  # float32 storage


def test_idx_rejects_garbage(tmp_path):
    path = tmp_path / "bad.idx"
    path.write_bytes(b"\x01\x00\x08\x01\x00\x00\x00\x02ab")
    with pytest.raises(ValueError, match="magic"):
        load_idx(path)
    path.write_bytes(bytes([0, 0, 8, 1]) + (2).to_bytes(4, "big") + b"a")
    with pytest.raises(ValueError, match="payload"):
        load_idx(path)
    with pytest.raises(ValueError):
        save_idx(path, np.zeros(3, dtype=np.int32))


def test_uint8_images_normalized():
    import tempfile

    arr = np.array([[[0, 255], [128, 64]]], dtype=np.uint8)
    with tempfile.NamedTemporaryFile(suffix=".idx") as fh:
        save_idx(fh.name, arr)
        x = load_idx_images(fh.name)
    assert x.shape == (1, 1, 2, 2)
    assert x.min() == 0.0 and x.max() == 1.0


def test_synthetic_bars_contract():
    x, y = synthetic_bars(101, image_size=16, classes=4, seed=3)
    assert x.shape == (101, 1, 16, 16) and y.shape == (101,)
    assert x.min() >= 0.0 and x.max() <= 1.0
    counts = np.bincount(y, minlength=4)
    assert counts.max() - counts.min() <= 1  # as balanced as the count allows
    # deterministic in seed
    x2, y2 = synthetic_bars(101, image_size=16, classes=4, seed=3)
    assert np.array_equal(x, x2) and np.array_equal(y, y2)
    x3, _ = synthetic_bars(101, image_size=16, classes=4, seed=4)
    assert not np.array_equal(x, x3)


def test_synthetic_bars_classes_are_separable_by_orientation():
    # noiseless bars of different orientations must differ strongly
    x, y = synthetic_bars(200, image_size=16, classes=4, noise=0.0, seed=5)
    mean_imgs = [x[y == c].mean(axis=0)[0] for c in range(4)]
    # horizontal class varies along rows, vertical along columns
    assert mean_imgs[0].var(axis=0).mean() > mean_imgs[0].var(axis=1).mean()
    assert mean_imgs[1].var(axis=1).mean() > mean_imgs[1].var(axis=0).mean()


def test_synthetic_bars_validation():
    with pytest.raises(ValueError):
        synthetic_bars(10, classes=9)
    with pytest.raises(ValueError):
        synthetic_bars(10, image_size=2)
