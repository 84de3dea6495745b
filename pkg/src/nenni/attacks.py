"""White-box L-infinity attacks: FGSM, PGD, and momentum-iterative FGSM.

All attacks operate on [0, 1] inputs, respect the epsilon ball around the
original input exactly, and query `input_grad`, which honors the defender's
injection semantics (stop-gradient through the approximation; a fresh
projection realization per gradient query in per-forward resample mode).
The degenerate configurations collapse bitwise: PGD with one step of size
epsilon and no random start equals FGSM, and MIFGSM with zero decay follows
the exact PGD trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import input_grad


@dataclass(frozen=True)
class AttackConfig:
    kind: str  # "fgsm" | "pgd" | "mifgsm"
    epsilon: float
    step_size: float = 0.0
    steps: int = 1
    decay: float = 1.0
    random_start: bool = False

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd", "mifgsm"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.kind != "fgsm" and self.step_size <= 0:
            raise ValueError("iterative attacks need step_size > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.decay < 0:
            raise ValueError("decay must be >= 0")

    @property
    def label(self) -> str:
        if self.kind == "fgsm":
            return "fgsm"
        return f"{self.kind}{self.steps}"


def _ball_step(x0, x, signs, step, eps):
    x_new = x + step * signs
    np.clip(x_new, x0 - eps, x0 + eps, out=x_new)
    np.clip(x_new, 0.0, 1.0, out=x_new)
    return x_new


def _as_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == model.input_shape:
        return x[None], True
    return x, False


def fgsm(model, x, y, cfg: AttackConfig, *, inj=None, stream=None):
    """One signed-gradient step of size epsilon, clipped to the data domain."""
    if cfg.kind != "fgsm":
        raise ValueError("config kind must be 'fgsm'")
    x0, squeeze = _as_batch(model, x)
    g = input_grad(model, x0, y, inj, stream=stream)
    x_adv = _ball_step(x0, x0, np.sign(g), cfg.epsilon, cfg.epsilon)
    return x_adv[0] if squeeze else x_adv


def pgd(model, x, y, cfg: AttackConfig, *, inj=None, stream=None, seed: int = 0):
    """Iterated signed-gradient ascent projected to the epsilon ball and [0,1]."""
    if cfg.kind != "pgd":
        raise ValueError("config kind must be 'pgd'")
    x0, squeeze = _as_batch(model, x)
    x_adv = x0.copy()
    if cfg.random_start and cfg.epsilon > 0:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), 0xAD5)))
        x_adv = np.clip(x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape), 0.0, 1.0)
    for _ in range(cfg.steps):
        g = input_grad(model, x_adv, y, inj, stream=stream)
        x_adv = _ball_step(x0, x_adv, np.sign(g), cfg.step_size, cfg.epsilon)
    return x_adv[0] if squeeze else x_adv


def mifgsm(model, x, y, cfg: AttackConfig, *, inj=None, stream=None):
    """Momentum-accumulated signed-gradient attack (L1-normalized gradients)."""
    if cfg.kind != "mifgsm":
        raise ValueError("config kind must be 'mifgsm'")
    x0, squeeze = _as_batch(model, x)
    x_adv = x0.copy()
    momentum = np.zeros_like(x0)
    axes = tuple(range(1, x0.ndim))
    for _ in range(cfg.steps):
        g = input_grad(model, x_adv, y, inj, stream=stream)
        l1 = np.sum(np.abs(g), axis=axes, keepdims=True)
        denom = np.where(l1 < 1e-12, 1.0, l1)  # guard zero-gradient steps
        momentum = cfg.decay * momentum + g / denom
        x_adv = _ball_step(x0, x_adv, np.sign(momentum), cfg.step_size, cfg.epsilon)
    return x_adv[0] if squeeze else x_adv


def run_attack(model, x, y, cfg: AttackConfig, *, inj=None, stream=None, seed: int = 0):
    if cfg.kind == "fgsm":
        return fgsm(model, x, y, cfg, inj=inj, stream=stream)
    if cfg.kind == "pgd":
        return pgd(model, x, y, cfg, inj=inj, stream=stream, seed=seed)
    return mifgsm(model, x, y, cfg, inj=inj, stream=stream)
