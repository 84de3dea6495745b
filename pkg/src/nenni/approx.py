"""Learned low-rank low-precision approximation of a layer's pre-activations.

For an instrumented layer z = Wx + b, the side computation is
z_approx = Wq (P x) + bq with P a fixed sparse ternary projection and (Wq, bq)
fit by mean-squared-error regression on a calibration batch, then quantized to
INT4 once. Convolutions use the same machinery on their unrolled inner-product
columns, sharing one (Wq, bq, P) across spatial positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .projection import SparseTernaryProjection, project
from .quant import QuantTensor, dequantize, quantize_sym, require_finite


def _f32_snap(x: float) -> float:
    """Round a scale to its float32 value so the model file encodes it exactly."""
    return float(np.float32(x))


@dataclass(frozen=True)
class ApproxParams:
    """Quantized (Wq, bq) bound to one layer and one projection.

    Immutable after construction. Scales are snapped to float32 at
    construction time because the model file stores them as float32; this
    keeps save/load round trips bit-exact.
    """

    layer_id: str
    w_tilde: QuantTensor  # (n, k)
    b_tilde: QuantTensor  # (n,)
    projection: SparseTernaryProjection

    def __post_init__(self):
        if self.w_tilde.codes.ndim != 2:
            raise ValueError("w_tilde must be 2-D (n, k)")
        n, k = self.w_tilde.shape
        if self.b_tilde.codes.shape != (n,):
            raise ValueError("b_tilde length must match the layer output width")
        if k != self.projection.k:
            raise ValueError("w_tilde column count must equal projection.k")
        object.__setattr__(
            self, "w_tilde", QuantTensor(self.w_tilde.codes, _f32_snap(self.w_tilde.scale))
        )
        object.__setattr__(
            self, "b_tilde", QuantTensor(self.b_tilde.codes, _f32_snap(self.b_tilde.scale))
        )

    @property
    def n(self) -> int:
        return self.w_tilde.shape[0]

    @property
    def k(self) -> int:
        return self.w_tilde.shape[1]

    @property
    def w_deq(self) -> np.ndarray:
        cached = self.__dict__.get("_w_deq")
        if cached is None:
            cached = dequantize(self.w_tilde)
            object.__setattr__(self, "_w_deq", cached)
        return cached

    @property
    def b_deq(self) -> np.ndarray:
        cached = self.__dict__.get("_b_deq")
        if cached is None:
            cached = dequantize(self.b_tilde)
            object.__setattr__(self, "_b_deq", cached)
        return cached


@dataclass(frozen=True)
class FitReport:
    layer_id: str
    n_samples: int
    rank: int
    rank_deficient: bool
    mse_pre_quant: float
    mse_post_quant: float
    method: str


def _mse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean(np.sum((pred - target) ** 2, axis=1)))


def fit_approx(
    W,
    b,
    calib,
    projection: SparseTernaryProjection,
    method: str = "closed_form",
    layer_id: str = "",
    epochs: int = 50,
    lr: float | None = None,
    momentum: float = 0.9,
    batch_size: int = 128,
    seed: int = 0,
) -> tuple[ApproxParams, FitReport]:
    """Fit (Wq, bq) to minimize mean ||(Wx+b) - (Wq Px + bq)||^2 over calib.

    closed_form solves the least-squares problem with intercept directly
    (minimum-norm solution when rank deficient, flagged in the report).
    The sgd method runs momentum gradient descent for `epochs` passes; with
    lr=None the step size is set from the Lipschitz constant of the quadratic
    so descent is guaranteed.
    """
    W = require_finite(W, "W")
    b = require_finite(b, "b")
    calib = np.asarray(calib, dtype=np.float64)
    if calib.ndim != 2:
        raise ValueError("calibration batch must be 2-D (samples, d)")
    if calib.shape[0] == 0:
        raise ValueError("calibration set is empty")
    if calib.shape[1] != projection.d:
        raise ValueError("calibration width does not match projection.d")
    if W.shape[1] != projection.d:
        raise ValueError("W width does not match projection.d")
    n = W.shape[0]
    k = projection.k
    B = calib.shape[0]

    targets = calib @ W.T + b  # (B, n)
    U = project(projection, calib)  # (B, k)
    design = np.concatenate([U, np.ones((B, 1))], axis=1)  # (B, k+1)

    if method == "closed_form":
        if B < k:
            raise ValueError(f"closed_form needs >= k={k} calibration samples, got {B}")
        theta, _, rank, _ = np.linalg.lstsq(design, targets, rcond=None)
        rank = int(rank)
        rank_deficient = rank < k + 1
    elif method == "sgd":
        theta = np.zeros((k + 1, n))
        if lr is None:
            # conservative step from the quadratic's curvature; momentum
            # amplifies the effective step by ~1/(1-momentum)
            gram = design.T @ design / B
            lam_max = float(np.linalg.eigvalsh(gram)[-1])
            lr = 1.0 / (10.0 * lam_max) if lam_max > 0 else 1e-3
        rng = np.random.default_rng(seed)
        vel = np.zeros_like(theta)
        bs = min(batch_size, B)
        for _ in range(epochs):
            order = rng.permutation(B)
            for start in range(0, B, bs):
                idx = order[start : start + bs]
                resid = design[idx] @ theta - targets[idx]
                grad = 2.0 * design[idx].T @ resid / idx.size
                vel = momentum * vel - lr * grad
                theta = theta + vel
        rank = min(B, k + 1)
        rank_deficient = B < k + 1
    else:
        raise ValueError(f"unknown fit method {method!r}")

    w_fit = theta[:k].T  # (n, k)
    b_fit = theta[k]  # (n,)
    mse_pre = _mse(design @ theta, targets)

    params = ApproxParams(
        layer_id=layer_id,
        w_tilde=quantize_sym(w_fit),
        b_tilde=quantize_sym(b_fit),
        projection=projection,
    )
    mse_post = _mse(U @ params.w_deq.T + params.b_deq, targets)
    report = FitReport(
        layer_id=layer_id,
        n_samples=B,
        rank=rank,
        rank_deficient=rank_deficient,
        mse_pre_quant=mse_pre,
        mse_post_quant=mse_post,
        method=method,
    )
    return params, report


def fit_mse(W, b, calib, projection, w_fit, b_fit) -> float:
    """Calibration MSE of an arbitrary (w, b) pair, for optimality probes."""
    calib = np.asarray(calib, dtype=np.float64)
    targets = calib @ np.asarray(W, dtype=np.float64).T + np.asarray(b, dtype=np.float64)
    U = project(projection, calib)
    return _mse(U @ np.asarray(w_fit).T + np.asarray(b_fit), targets)


def approx_forward(params: ApproxParams, x) -> np.ndarray:
    """z_approx = dequant(Wq) (P x) + dequant(bq); accepts (d,) or (B, d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.projection.d:
        raise ValueError(
            f"input length {x.shape[-1]} does not match projection.d={params.projection.d}"
        )
    u = project(params.projection, x)
    return u @ params.w_deq.T + params.b_deq
