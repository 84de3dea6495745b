"""Sparse ternary random projection and its distance-preservation diagnostics.

The projection matrix has entries in {-sqrt(s), 0, +sqrt(s)} (each position
nonzero with probability 1/s, sign equiprobable) and is applied together with
a 1/sqrt(k) factor, so the only multiplication is one scalar rescale per
output; everything else is signed accumulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def _sample_sign_matrix(rng: np.random.Generator, k: int, d: int, s: int) -> np.ndarray:
    """Dense {-1, 0, +1} matrix: nonzero w.p. 1/s, sign equiprobable."""
    nonzero = rng.random((k, d)) < (1.0 / s)
    signs = rng.integers(0, 2, size=(k, d)) * 2 - 1
    return np.where(nonzero, signs, 0).astype(np.int8)


@dataclass(frozen=True)
class SparseTernaryProjection:
    """A k x d ternary projection, reproducible from (k, d, s, seed).

    ``signs`` holds the stored ternary pattern; the effective matrix value at
    a nonzero position is sign * sqrt(s) * (1/sqrt(k)) = sign * scale.
    """

    k: int
    d: int
    s: int
    seed: int
    signs: np.ndarray = field(repr=False)  # int8 (k, d) in {-1, 0, +1}

    def __post_init__(self):
        if self.k < 1 or self.d < 1 or self.s < 1:
            raise ValueError("k, d and s must all be >= 1")
        signs = np.ascontiguousarray(self.signs, dtype=np.int8)
        if signs.shape != (self.k, self.d):
            raise ValueError("sign matrix shape does not match (k, d)")
        if signs.size and np.max(np.abs(signs)) > 1:
            raise ValueError("sign matrix entries must be in {-1, 0, +1}")
        object.__setattr__(self, "signs", signs)

    @property
    def scale(self) -> float:
        return math.sqrt(self.s / self.k)

    @property
    def _signs_f64(self) -> np.ndarray:
        cached = self.__dict__.get("_signs_f64_cache")
        if cached is None:
            cached = self.signs.astype(np.float64)
            object.__setattr__(self, "_signs_f64_cache", cached)
        return cached

    @property
    def entries(self) -> list[tuple[int, int, int]]:
        rows, cols = np.nonzero(self.signs)
        return [(int(r), int(c), int(self.signs[r, c])) for r, c in zip(rows, cols)]

    def matrix(self) -> np.ndarray:
        """Effective dense float matrix (k, d); values in {-scale, 0, +scale}."""
        return self.signs.astype(np.float64) * self.scale

    @classmethod
    def from_entries(cls, k, d, s, seed, entries) -> "SparseTernaryProjection":
        signs = np.zeros((k, d), dtype=np.int8)
        seen = set()
        for r, c, sign in entries:
            if (r, c) in seen:
                raise ValueError(f"duplicate entry at ({r}, {c})")
            if not (0 <= r < k and 0 <= c < d):
                raise ValueError(f"entry ({r}, {c}) outside the k x d grid")
            if sign not in (-1, 1):
                raise ValueError("entry signs must be -1 or +1")
            seen.add((r, c))
            signs[r, c] = sign
        return cls(k=k, d=d, s=s, seed=seed, signs=signs)


def sample_projection(k: int, d: int, s: int = 3, seed: int = 0) -> SparseTernaryProjection:
    """Sample the ternary pattern; deterministic in (k, d, s, seed)."""
    if k < 1 or d < 1 or s < 1:
        raise ValueError("k, d and s must all be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), k, d, s)))
    signs = _sample_sign_matrix(rng, k, d, s)
    return SparseTernaryProjection(k=k, d=d, s=s, seed=int(seed), signs=signs)


def project(p: SparseTernaryProjection, x) -> np.ndarray:
    """Apply the projection along the last axis: (…, d) -> (…, k)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.d:
        raise ValueError(f"input length {x.shape[-1]} does not match d={p.d}")
    # signed accumulation, then the single deferred scalar multiply
    return (x @ p._signs_f64.T) * p.scale


def preservation_stats(
    k: int,
    d: int,
    s: int = 3,
    n_points: int = 50,
    eps: float = 0.3,
    seed: int = 0,
    points: np.ndarray | None = None,
) -> dict:
    """Monte-Carlo check of norm and inner-product preservation.

    Samples ``n_points`` standard-normal d-vectors (or uses ``points``),
    projects them, and reports:

    - ``norm_ok_fraction``: points with (1-eps)|Y|^2 <= |f(Y)|^2 <= (1+eps)|Y|^2
      (inclusive, so a zero vector counts as preserved),
    - ``ip_violation_fraction``: unordered pairs whose projected inner product
      deviates from the original by more than (eps/2)(|a|^2 + |b|^2),
    - ``ip_mean_abs_rel_err``: mean of |deviation| / ((|a|^2 + |b|^2)/2), the
      per-pair effective epsilon under the same bound.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if n_points < 2:
        raise ValueError("need at least two points")
    if not (0.0 < eps < 1.0):
        raise ValueError("eps must lie in (0, 1)")
    if points is None:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), 0x9E3779B9)))
        pts = rng.standard_normal((n_points, d))
    else:
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != d:
            raise ValueError("points must have shape (n_points, d)")
        n_points = pts.shape[0]

    proj = sample_projection(k, d, s, seed)
    low = project(proj, pts)

    sq = np.einsum("nd,nd->n", pts, pts)
    sq_low = np.einsum("nk,nk->n", low, low)
    norm_ok = (sq_low >= (1.0 - eps) * sq) & (sq_low <= (1.0 + eps) * sq)

    gram_hi = pts @ pts.T
    gram_lo = low @ low.T
    iu = np.triu_indices(n_points, k=1)
    err = np.abs(gram_lo[iu] - gram_hi[iu])
    bound_halfsum = 0.5 * (sq[iu[0]] + sq[iu[1]])
    violated = err > eps * bound_halfsum
    with np.errstate(invalid="ignore", divide="ignore"):
        eff_eps = np.where(bound_halfsum > 0, err / bound_halfsum, 0.0)

    return {
        "norm_ok_fraction": float(np.mean(norm_ok)),
        "ip_violation_fraction": float(np.mean(violated)),
        "ip_mean_abs_rel_err": float(np.mean(eff_eps)),
    }
