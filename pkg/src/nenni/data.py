"""Dataset I/O (IDX files) and the seeded synthetic bar generator.

IDX is the MNIST container format: big-endian magic 0x00000803 for 3-D uint8
image tensors and 0x00000801 for 1-D uint8 label vectors; float32 payloads
(type code 0x0D) are supported for dumping adversarial examples losslessly.
"""

from __future__ import annotations

import struct

import numpy as np

_DTYPE_CODES = {0x08: np.dtype(">u1"), 0x0D: np.dtype(">f4")}
_CODE_FOR = {np.dtype(np.uint8): 0x08, np.dtype(np.float32): 0x0D}


def save_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype not in _CODE_FOR:
        raise ValueError(f"IDX writer supports uint8 and float32, got {arr.dtype}")
    code = _CODE_FOR[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(struct.pack(">BBBB", 0, 0, code, arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack(">I", dim))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def load_idx(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise ValueError("IDX file too short")
    zero1, zero2, code, ndim = struct.unpack(">BBBB", buf[:4])
    if zero1 or zero2 or code not in _DTYPE_CODES:
        raise ValueError(f"bad IDX magic {buf[:4].hex()}")
    dims = struct.unpack(">" + "I" * ndim, buf[4 : 4 + 4 * ndim])
    dtype = _DTYPE_CODES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    data = buf[4 + 4 * ndim :]
    if len(data) != expected:
        raise ValueError(f"IDX payload has {len(data)} bytes, expected {expected}")
    arr = np.frombuffer(data, dtype=dtype).reshape(dims)
    return arr.astype(np.uint8) if code == 0x08 else arr.astype(np.float32)


def load_idx_images(path) -> np.ndarray:
    """IDX image tensor -> float64 batch (N, 1, H, W) normalized into [0, 1]."""
    arr = load_idx(path)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3-D IDX image tensor, got {arr.ndim}-D")
    x = arr.astype(np.float64)
    if arr.dtype == np.uint8:
        x /= 255.0
    return np.clip(x, 0.0, 1.0)[:, None, :, :]


def load_idx_labels(path) -> np.ndarray:
    arr = load_idx(path)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-D IDX label vector, got {arr.ndim}-D")
    return arr.astype(np.int64)


def save_adversarial_idx(path, x: np.ndarray) -> None:
    """Dump a batch (N, 1, H, W) of [0,1] images as a float32 IDX tensor."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError("expected a (N, 1, H, W) batch")
    save_idx(path, x[:, 0].astype(np.float32))


def synthetic_bars(
    n_samples: int,
    image_size: int = 16,
    classes: int = 4,
    noise: float = 0.18,
    contrast: float = 0.55,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded grayscale bars: class = orientation, position varies per sample.

    Classes map to horizontal / vertical / diagonal / anti-diagonal bars of
    width 2 on a flat background, plus Gaussian pixel noise, clipped to [0, 1].
    Labels are as balanced as the sample count allows.
    """
    if classes < 2 or classes > 4:
        raise ValueError("the bar generator supports 2 to 4 classes")
    if image_size < 4:
        raise ValueError("image_size must be at least 4")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), 0xBA55)))
    S = image_size
    reps = -(-n_samples // classes)
    y = np.tile(np.arange(classes), reps)[:n_samples]
    y = y[rng.permutation(n_samples)]

    bg = 0.5 - contrast / 2.0
    hi = 0.5 + contrast / 2.0
    ii, jj = np.meshgrid(np.arange(S), np.arange(S), indexing="ij")
    x = np.full((n_samples, 1, S, S), bg, dtype=np.float64)
    for idx in range(n_samples):
        cls = y[idx]
        if cls == 0:  # horizontal
            r = rng.integers(0, S - 1)
            band = (ii >= r) & (ii <= r + 1)
        elif cls == 1:  # vertical
            c = rng.integers(0, S - 1)
            band = (jj >= c) & (jj <= c + 1)
        elif cls == 2:  # main diagonal
            o = rng.integers(-(S - 3), S - 2)
            band = np.abs(ii - jj - o) <= 1
        else:  # anti-diagonal
            o = rng.integers(2, 2 * S - 3)
            band = np.abs(ii + jj - o) <= 1
        x[idx, 0][band] = hi
    x += rng.normal(0.0, noise, size=x.shape)
    np.clip(x, 0.0, 1.0, out=x)
    return x, y.astype(np.int64)
