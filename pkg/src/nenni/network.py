"""Minimal neural-network engine: dense / conv2d (im2col) / relu / flatten,
forward evaluation under noise injection, and exact reverse-mode gradients.

Convolutions are evaluated in their unrolled inner-product form: every output
activation is one dot product between a kernel row and an im2col column, so
the approximate path and the cost model see the same (n, d) geometry as a
dense layer, with one column per spatial position.

Injection semantics per instrumented layer: the approximate pre-activations
are computed first, the essentiality mask is derived from them, and the mixed
output keeps precise values at essential positions while the rest carry the
approximation. Gradients flow only through the precise path at essential
positions; the approximation (and the mask) are treated as constants.

The default execution strategy computes the precise values everywhere and
then mixes, which is vectorized and semantically identical to skipping the
non-essential positions; `skip_nonessential=True` selects the literal sparse
strategy (one dot product per essential position) and is exercised by the
equivalence tests.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .approx import ApproxParams
from .masking import InjectionConfig, build_mask_batch, mix
from .projection import _sample_sign_matrix


class NumericalError(FloatingPointError):
    """A forward or backward pass produced non-finite values."""


# ---------------------------------------------------------------------------
# layers and model


@dataclass
class Dense:
    W: np.ndarray  # (n, d)
    b: np.ndarray  # (n,)
    layer_id: str = ""
    approx: ApproxParams | None = None

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError("Dense needs W (n, d) and b (n,)")


@dataclass
class Conv2D:
    kernel: np.ndarray  # (C_out, C_in, kH, kW)
    b: np.ndarray  # (C_out,)
    stride: int = 1
    padding: int = 0
    layer_id: str = ""
    approx: ApproxParams | None = None

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.kernel.ndim != 4 or self.b.shape != (self.kernel.shape[0],):
            raise ValueError("Conv2D needs kernel (C_out, C_in, kH, kW) and b (C_out,)")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")


@dataclass
class ReLU:
    layer_id: str = ""


@dataclass
class Flatten:
    layer_id: str = ""


Layer = Dense | Conv2D | ReLU | Flatten


def layer_output_shape(layer: Layer, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Dense):
        if in_shape != (layer.W.shape[1],):
            raise ValueError(
                f"layer {layer.layer_id!r}: expected input {(layer.W.shape[1],)}, got {in_shape}"
            )
        return (layer.W.shape[0],)
    if isinstance(layer, Conv2D):
        if len(in_shape) != 3 or in_shape[0] != layer.kernel.shape[1]:
            raise ValueError(f"layer {layer.layer_id!r}: bad conv input shape {in_shape}")
        _, _, kh, kw = layer.kernel.shape
        h = (in_shape[1] + 2 * layer.padding - kh) // layer.stride + 1
        w = (in_shape[2] + 2 * layer.padding - kw) // layer.stride + 1
        if h < 1 or w < 1:
            raise ValueError(f"layer {layer.layer_id!r}: kernel does not fit input {in_shape}")
        return (layer.kernel.shape[0], h, w)
    if isinstance(layer, ReLU):
        return in_shape
    if isinstance(layer, Flatten):
        return (int(np.prod(in_shape)),)
    raise TypeError(f"unknown layer type {type(layer).__name__}")


@dataclass
class Model:
    layers: list
    input_shape: tuple[int, ...]
    n_classes: int

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        ids = [l.layer_id for l in self.layers if isinstance(l, (Dense, Conv2D))]
        if len(ids) != len(set(ids)):
            raise ValueError("dense/conv layer ids must be unique")
        out = self.output_shape()
        if out != (self.n_classes,):
            raise ValueError(f"model output shape {out} does not match {self.n_classes} classes")

    def output_shape(self) -> tuple[int, ...]:
        shape = self.input_shape
        for layer in self.layers:
            shape = layer_output_shape(layer, shape)
        return shape

    def layer_ids(self) -> list[str]:
        return [l.layer_id for l in self.layers if isinstance(l, (Dense, Conv2D))]

    def get_layer(self, layer_id: str):
        for layer in self.layers:
            if isinstance(layer, (Dense, Conv2D)) and layer.layer_id == layer_id:
                return layer
        raise KeyError(f"no dense/conv layer with id {layer_id!r}")


# ---------------------------------------------------------------------------
# stochastic-forward seed streams


class SeedStream:
    """Per-sample deterministic randomness for stochastic forward passes.

    Each forward pass is one query; sample i of query q draws from a
    generator seeded by (root, label, q, i), so results do not depend on how
    many queries ran before construction-time state, and replaying with a
    fresh stream of the same root reproduces them exactly. Callers that want
    batch-order independence must keep sample order fixed.
    """

    def __init__(self, root: int, label: str = ""):
        self.root = int(root)
        self.label_hash = zlib.crc32(label.encode("utf-8"))
        self.query = 0

    def next_query(self, n_samples: int) -> list[np.random.Generator]:
        q = self.query
        self.query += 1
        return [
            np.random.Generator(
                np.random.PCG64(np.random.SeedSequence(entropy=(self.root, self.label_hash, q, i)))
            )
            for i in range(n_samples)
        ]


@dataclass(frozen=True)
class RseConfig:
    """Additive Gaussian noise on pre-activations (RSE-style baseline)."""

    sigma: float
    target_layers: frozenset | None = None  # None = every dense/conv layer

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.target_layers is not None:
            object.__setattr__(self, "target_layers", frozenset(self.target_layers))


# ---------------------------------------------------------------------------
# im2col plumbing


def _pad_input(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> columns (B, C*kh*kw, h_out*w_out)."""
    B, C = x.shape[:2]
    s0, s1, s2, s3 = x.strides
    win = as_strided(
        x,
        shape=(B, C, kh, kw, h_out, w_out),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return win.reshape(B, C * kh * kw, h_out * w_out)


def _col2im_add(dcols, pad_shape, kh, kw, stride, h_out, w_out) -> np.ndarray:
    B, C = pad_shape[:2]
    dxp = np.zeros(pad_shape, dtype=np.float64)
    dwin = dcols.reshape(B, C, kh, kw, h_out, w_out)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, :, ki : ki + stride * h_out : stride, kj : kj + stride * w_out : stride] += dwin[
                :, :, ki, kj
            ]
    return dxp


def conv2d_direct(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int, padding: int):
    """Nested-loop convolution, kept as a slow reference for the im2col path."""
    xp = _pad_input(np.asarray(x, dtype=np.float64), padding)
    B, _, Hp, Wp = xp.shape
    c_out, c_in, kh, kw = kernel.shape
    h_out = (Hp - kh) // stride + 1
    w_out = (Wp - kw) // stride + 1
    out = np.zeros((B, c_out, h_out, w_out))
    for bi in range(B):
        for co in range(c_out):
            for i in range(h_out):
                for j in range(w_out):
                    patch = xp[bi, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[bi, co, i, j] = np.sum(patch * kernel[co]) + bias[co]
    return out


# ---------------------------------------------------------------------------
# injection helpers


def _approx_from_cols(layer, cols: np.ndarray, cfg: InjectionConfig, gens) -> np.ndarray:
    """Approximate pre-activations for (B, d, P) columns -> (B, n, P)."""
    ap = layer.approx
    proj = ap.projection
    if cfg.resample == "fixed":
        u = np.matmul(proj._signs_f64, cols) * proj.scale
    else:
        mats = np.stack([_sample_sign_matrix(g, proj.k, proj.d, proj.s) for g in gens])
        u = np.matmul(mats.astype(np.float64), cols) * proj.scale
    return np.matmul(ap.w_deq, u) + ap.b_deq[None, :, None]


def _mask_from_ztilde(z_tilde: np.ndarray, cfg: InjectionConfig) -> np.ndarray:
    """Mask for (B, n, P) approximate pre-activations.

    Ratio mode ranks all channels x spatial positions of one sample jointly;
    structured N:M groups run along the channel axis at each fixed position.
    """
    B, n, P = z_tilde.shape
    if cfg.mode[0] == "ratio":
        flat = z_tilde.reshape(B, n * P)
        return build_mask_batch(flat, cfg).reshape(B, n, P)
    per_pos = z_tilde.transpose(0, 2, 1).reshape(B * P, n)
    m = build_mask_batch(per_pos, cfg)
    return m.reshape(B, P, n).transpose(0, 2, 1)


def _precise_at_mask(w_mat, bias, cols, z_tilde, mask) -> np.ndarray:
    """Sparse strategy: one dot product per essential position only."""
    out = z_tilde.copy()
    B = cols.shape[0]
    for bi in range(B):
        ch, pos = np.nonzero(mask[bi])
        if ch.size:
            vals = np.einsum("ed,ed->e", w_mat[ch], cols[bi, :, pos]) + bias[ch]
            out[bi, ch, pos] = vals
    return out


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class LayerTrace:
    layer_id: str
    kind: str
    x_in: np.ndarray
    z: np.ndarray | None = None
    z_tilde: np.ndarray | None = None
    mask: np.ndarray | None = None
    z_out: np.ndarray | None = None


@dataclass
class ForwardTrace:
    layers: list = field(default_factory=list)


def _check_cfg(model: Model, cfg) -> None:
    if cfg is None:
        return
    known = set(model.layer_ids())
    if isinstance(cfg, InjectionConfig):
        unknown = set(cfg.target_layers) - known
        if unknown:
            raise ValueError(f"injection config references unknown layer ids {sorted(unknown)}")
        for lid in cfg.target_layers:
            if model.get_layer(lid).approx is None:
                raise ValueError(f"layer {lid!r} has no approximation parameters attached")
    elif isinstance(cfg, RseConfig):
        if cfg.target_layers is not None and set(cfg.target_layers) - known:
            raise ValueError("rse config references unknown layer ids")
    else:
        raise TypeError(f"unsupported forward config {type(cfg).__name__}")


def _wants_stream(cfg) -> bool:
    if isinstance(cfg, InjectionConfig):
        return cfg.resample == "per_forward"
    if isinstance(cfg, RseConfig):
        return cfg.sigma > 0
    return False


def _forward_internal(model, x, cfg, stream, skip_nonessential, want_trace):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.shape == model.input_shape
    if squeeze:
        x = x[None]
    if x.shape[1:] != model.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match model {model.input_shape}")
    _check_cfg(model, cfg)
    gens = None
    if _wants_stream(cfg):
        if stream is None:
            raise ValueError("stochastic forward needs an explicit SeedStream")
        gens = stream.next_query(x.shape[0])

    caches = []
    trace = ForwardTrace() if want_trace else None
    a = x
    for layer in model.layers:
        if isinstance(layer, Dense):
            a_new, cache = _dense_forward(layer, a, cfg, gens, skip_nonessential)
        elif isinstance(layer, Conv2D):
            a_new, cache = _conv_forward(layer, a, cfg, gens, skip_nonessential)
        elif isinstance(layer, ReLU):
            a_new = np.maximum(a, 0.0)
            cache = {"kind": "relu", "gate": a > 0}
        else:  # Flatten
            a_new = a.reshape(a.shape[0], -1)
            cache = {"kind": "flatten", "shape": a.shape}
        if want_trace:
            trace.layers.append(
                LayerTrace(
                    layer_id=layer.layer_id,
                    kind=type(layer).__name__.lower(),
                    x_in=a,
                    z=cache.get("z"),
                    z_tilde=cache.get("z_tilde"),
                    mask=cache.get("mask"),
                    z_out=a_new,
                )
            )
        caches.append(cache)
        a = a_new
    return a, caches, trace, squeeze


def _rse_active(layer, cfg) -> bool:
    return (
        isinstance(cfg, RseConfig)
        and cfg.sigma >= 0
        and (cfg.target_layers is None or layer.layer_id in cfg.target_layers)
    )


def _inj_active(layer, cfg) -> bool:
    return isinstance(cfg, InjectionConfig) and layer.layer_id in cfg.target_layers


def _dense_forward(layer: Dense, a, cfg, gens, skip):
    cache = {"kind": "dense", "layer": layer, "x": a, "mask": None, "z": None}
    if _inj_active(layer, cfg):
        cols = a[:, :, None]  # (B, d, 1)
        z_tilde = _approx_from_cols(layer, cols, cfg, gens)  # (B, n, 1)
        mask = _mask_from_ztilde(z_tilde, cfg)
        if skip:
            z_prime = _precise_at_mask(layer.W, layer.b, cols, z_tilde, mask)
        else:
            z = a @ layer.W.T + layer.b
            cache["z"] = z
            z_prime = mix(z[:, :, None], z_tilde, mask)
        cache.update(z_tilde=z_tilde[:, :, 0], mask=mask[:, :, 0])
        out = z_prime[:, :, 0]
    else:
        out = a @ layer.W.T + layer.b
        if _rse_active(layer, cfg) and cfg.sigma > 0:
            noise = np.stack([g.standard_normal(out.shape[1]) for g in gens])
            out = out + cfg.sigma * noise
        cache["z"] = out
    return out, cache


def _conv_forward(layer: Conv2D, a, cfg, gens, skip):
    c_out, c_in, kh, kw = layer.kernel.shape
    h_out = (a.shape[2] + 2 * layer.padding - kh) // layer.stride + 1
    w_out = (a.shape[3] + 2 * layer.padding - kw) // layer.stride + 1
    xp = _pad_input(a, layer.padding)
    cols = _im2col(xp, kh, kw, layer.stride, h_out, w_out)  # (B, d, P)
    w_mat = layer.kernel.reshape(c_out, -1)
    cache = {
        "kind": "conv",
        "layer": layer,
        "cols": cols,
        "pad_shape": xp.shape,
        "dims": (kh, kw, layer.stride, h_out, w_out),
        "in_shape": a.shape,
        "mask": None,
    }
    if _inj_active(layer, cfg):
        z_tilde = _approx_from_cols(layer, cols, cfg, gens)  # (B, n, P)
        mask = _mask_from_ztilde(z_tilde, cfg)
        if skip:
            z_prime = _precise_at_mask(w_mat, layer.b, cols, z_tilde, mask)
            cache["z"] = None
        else:
            z = np.matmul(w_mat, cols) + layer.b[None, :, None]
            cache["z"] = z
            z_prime = mix(z, z_tilde, mask)
        cache.update(z_tilde=z_tilde, mask=mask)
        out = z_prime
    else:
        out = np.matmul(w_mat, cols) + layer.b[None, :, None]
        if _rse_active(layer, cfg) and cfg.sigma > 0:
            noise = np.stack([g.standard_normal(out.shape[1:]) for g in gens])
            out = out + cfg.sigma * noise
        cache["z"] = out
    return out.reshape(a.shape[0], c_out, h_out, w_out), cache


def forward(model, x, cfg=None, *, stream=None, trace=False, skip_nonessential=False):
    """Evaluate the model; returns logits, or (logits, ForwardTrace)."""
    logits, _, tr, squeeze = _forward_internal(model, x, cfg, stream, skip_nonessential, trace)
    if squeeze:
        logits = logits[0]
    return (logits, tr) if trace else logits


# ---------------------------------------------------------------------------
# loss and gradients


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, y: np.ndarray, reduction: str = "mean"):
    """Softmax cross-entropy loss and its gradient with respect to the logits."""
    y = np.asarray(y)
    B = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    losses = logz - shifted[np.arange(B), y]
    p = softmax(logits)
    dlogits = p.copy()
    dlogits[np.arange(B), y] -= 1.0
    if reduction == "mean":
        return float(losses.mean()), dlogits / B
    if reduction == "sum":
        return float(losses.sum()), dlogits
    raise ValueError("reduction must be 'mean' or 'sum'")


def _backward(model, caches, dlogits):
    grads = [None] * len(model.layers)
    d = dlogits
    for idx in range(len(model.layers) - 1, -1, -1):
        cache = caches[idx]
        kind = cache["kind"]
        if kind == "relu":
            d = d * cache["gate"]
        elif kind == "flatten":
            d = d.reshape(cache["shape"])
        elif kind == "dense":
            layer = cache["layer"]
            if cache["mask"] is not None:
                d = d * cache["mask"]  # stop-gradient through the approximation
            grads[idx] = {"W": d.T @ cache["x"], "b": d.sum(axis=0)}
            d = d @ layer.W
        else:  # conv
            layer = cache["layer"]
            B = d.shape[0]
            c_out = layer.kernel.shape[0]
            kh, kw, stride, h_out, w_out = cache["dims"]
            dz = d.reshape(B, c_out, h_out * w_out)
            if cache["mask"] is not None:
                dz = dz * cache["mask"]
            cols = cache["cols"]
            w_mat = layer.kernel.reshape(c_out, -1)
            dw = np.matmul(dz, cols.transpose(0, 2, 1)).sum(axis=0).reshape(layer.kernel.shape)
            db = dz.sum(axis=(0, 2))
            grads[idx] = {"W": dw, "b": db}
            dcols = np.matmul(w_mat.T, dz)
            dxp = _col2im_add(dcols, cache["pad_shape"], kh, kw, stride, h_out, w_out)
            if layer.padding:
                p = layer.padding
                d = dxp[:, :, p:-p, p:-p]
            else:
                d = dxp
    return d, grads


def loss_and_grads(model, x, y, cfg=None, *, stream=None, reduction="mean", skip_nonessential=False):
    """Loss, input gradient, and per-layer parameter gradients.

    With reduction='sum' each sample's input-gradient slice is the gradient
    of its own loss. Through injected layers the gradient flows only via the
    precise path at essential positions.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.shape == model.input_shape
    logits, caches, _, _ = _forward_internal(model, x, cfg, stream, skip_nonessential, False)
    if not np.all(np.isfinite(logits)):
        raise NumericalError("forward pass produced non-finite logits")
    y_arr = np.atleast_1d(np.asarray(y))
    if np.any(y_arr < 0) or np.any(y_arr >= model.n_classes):
        raise ValueError("label outside the valid class range")
    loss, dlogits = cross_entropy(logits, y_arr, reduction)
    dx, grads = _backward(model, caches, dlogits)
    if not np.all(np.isfinite(dx)):
        raise NumericalError("backward pass produced non-finite input gradients")
    if squeeze:
        dx = dx[0]
    return loss, dx, grads


def input_grad(model, x, y, cfg=None, *, stream=None):
    """Exact gradient of the (per-sample) loss with respect to the input."""
    _, dx, _ = loss_and_grads(model, x, y, cfg, stream=stream, reduction="sum")
    return dx


def predict(model, x, cfg=None, *, stream=None) -> np.ndarray:
    logits = forward(model, x, cfg, stream=stream)
    return np.argmax(np.atleast_2d(logits), axis=1)
