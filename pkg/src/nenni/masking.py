"""Essential-neuron selection masks and precise/approximate mixing.

A mask bit of 1 marks an essential position (keep the precise value); 0 marks
a non-essential one (populate with the approximate value). Selection ranks the
approximate pre-activations, by signed value by default: the mask feeds a ReLU
downstream, so large positive values are the ones worth protecting. Ranking by
absolute value is available as a config switch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quant import round_half_away


def keep_count(n: int, ratio: float) -> int:
    """Number of essential positions for an injection ratio: round((1-r)*n)."""
    if not (0.0 <= ratio <= 1.0):
        raise ValueError("injection ratio must lie in [0, 1]")
    return int(round_half_away(np.float64((1.0 - ratio) * n)))


def topk_mask(values, K: int) -> np.ndarray:
    """Ones at the K largest values; ties broken toward the lowest index."""
    v = np.asarray(values, dtype=np.float64).ravel()
    n = v.size
    if not (0 <= K <= n):
        raise ValueError(f"K={K} outside [0, {n}]")
    mask = np.zeros(n, dtype=np.uint8)
    if K:
        order = np.argsort(-v, kind="stable")
        mask[order[:K]] = 1
    return mask


def nm_mask(values, N: int, M: int) -> np.ndarray:
    """Keep the N largest in every aligned group of M consecutive positions.

    A trailing partial group of size g keeps ceil(N*g/M).
    """
    if not (1 <= N <= M):
        raise ValueError(f"need 1 <= N <= M, got N={N}, M={M}")
    v = np.asarray(values, dtype=np.float64).ravel()
    n = v.size
    mask = np.zeros(n, dtype=np.uint8)
    for start in range(0, n, M):
        group = v[start : start + M]
        g = group.size
        keep = N if g == M else -(-N * g // M)  # ceil(N*g/M)
        if keep:
            order = np.argsort(-group, kind="stable")
            mask[start + order[:keep]] = 1
    return mask


def topk_mask_batch(values: np.ndarray, K: int) -> np.ndarray:
    """Row-wise topk_mask over a (B, n) array, identical tie-breaking."""
    B, n = values.shape
    if not (0 <= K <= n):
        raise ValueError(f"K={K} outside [0, {n}]")
    mask = np.zeros((B, n), dtype=np.uint8)
    if K:
        order = np.argsort(-values, axis=1, kind="stable")
        np.put_along_axis(mask, order[:, :K], 1, axis=1)
    return mask


def nm_mask_batch(values: np.ndarray, N: int, M: int) -> np.ndarray:
    """Row-wise nm_mask over a (B, n) array."""
    if not (1 <= N <= M):
        raise ValueError(f"need 1 <= N <= M, got N={N}, M={M}")
    B, n = values.shape
    mask = np.zeros((B, n), dtype=np.uint8)
    for start in range(0, n, M):
        group = values[:, start : start + M]
        g = group.shape[1]
        keep = N if g == M else -(-N * g // M)
        if keep:
            order = np.argsort(-group, axis=1, kind="stable")
            np.put_along_axis(mask[:, start : start + M], order[:, :keep], 1, axis=1)
    return mask


def mix(z, z_tilde, m) -> np.ndarray:
    """Mixed output: precise where the mask is 1, approximate where it is 0.

    Pure selection (no arithmetic), so kept positions are bit-identical to z.
    """
    z = np.asarray(z, dtype=np.float64)
    zt = np.asarray(z_tilde, dtype=np.float64)
    mm = np.asarray(m)
    if z.shape != zt.shape or z.shape != mm.shape:
        raise ValueError(f"mix shapes differ: {z.shape}, {zt.shape}, {mm.shape}")
    return np.where(mm.astype(bool), z, zt)


@dataclass(frozen=True)
class InjectionConfig:
    """Which layers get injected and how the mask is produced.

    mode is ("ratio", r) or ("structured", N, M) with N = essential positions
    kept per aligned group of M. invert targets essential neurons instead,
    at the same realized injection fraction. resample chooses whether the
    projection stays fixed after distillation or is redrawn per forward pass
    from a per-sample seed stream.
    """

    mode: tuple
    target_layers: frozenset = frozenset()
    invert: bool = False
    resample: str = "fixed"  # "fixed" | "per_forward"
    rank_abs: bool = False

    def __post_init__(self):
        if self.mode[0] == "ratio":
            r = float(self.mode[1])
            if not (0.0 <= r <= 1.0):
                raise ValueError("injection ratio must lie in [0, 1]")
            object.__setattr__(self, "mode", ("ratio", r))
        elif self.mode[0] == "structured":
            _, N, M = self.mode
            if not (1 <= N <= M):
                raise ValueError("structured mode needs 1 <= N <= M")
            object.__setattr__(self, "mode", ("structured", int(N), int(M)))
        else:
            raise ValueError(f"unknown injection mode {self.mode[0]!r}")
        if self.resample not in ("fixed", "per_forward"):
            raise ValueError("resample must be 'fixed' or 'per_forward'")
        object.__setattr__(self, "target_layers", frozenset(self.target_layers))

    @classmethod
    def ratio(cls, r: float, target_layers=(), **kw) -> "InjectionConfig":
        return cls(mode=("ratio", r), target_layers=frozenset(target_layers), **kw)

    @classmethod
    def structured(cls, N: int, M: int, target_layers=(), **kw) -> "InjectionConfig":
        return cls(mode=("structured", N, M), target_layers=frozenset(target_layers), **kw)

    @property
    def injected_fraction(self) -> float:
        if self.mode[0] == "ratio":
            return self.mode[1]
        _, N, M = self.mode
        return (M - N) / M


def ratio_mask_batch(values: np.ndarray, ratio: float, invert: bool = False) -> np.ndarray:
    """Per-row ratio mask. Inverted masks inject the top round(r*n) positions
    (the essential ones) instead of the bottom, keeping the realized injected
    fraction at the configured ratio; they are the complement of a top-K mask
    at the complementary keep count.
    """
    n = values.shape[1]
    if invert:
        k_inject = int(round_half_away(np.float64(ratio * n)))
        return (1 - topk_mask_batch(values, k_inject)).astype(np.uint8)
    return topk_mask_batch(values, keep_count(n, ratio))


def structured_mask_batch(values: np.ndarray, N: int, M: int, invert: bool = False) -> np.ndarray:
    """Per-row N:M mask; inverted masks inject the (M-N) largest per group."""
    if invert:
        if N == M:
            return np.ones_like(values, dtype=np.uint8)
        return (1 - nm_mask_batch(values, M - N, M)).astype(np.uint8)
    return nm_mask_batch(values, N, M)


def build_mask_batch(z_tilde: np.ndarray, cfg: InjectionConfig) -> np.ndarray:
    """Mask for a batch of flattened approximate pre-activations (B, n)."""
    ranked = np.abs(z_tilde) if cfg.rank_abs else z_tilde
    if cfg.mode[0] == "ratio":
        return ratio_mask_batch(ranked, cfg.mode[1], cfg.invert)
    _, N, M = cfg.mode
    return structured_mask_batch(ranked, N, M, cfg.invert)
