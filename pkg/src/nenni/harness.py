"""Experiment orchestration: adversarial pre-training, MSE distillation of the
approximate path, injection-aware fine-tuning, evaluation under attacks,
entropy diagnostics, ablations, and the additive-Gaussian baseline.

Every stage is deterministic given the config and explicit seeds; stochastic
forward passes draw from labeled per-sample seed streams.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .approx import fit_approx
from .attacks import AttackConfig, pgd, run_attack
from .costmodel import default_k, model_bitops
from .data import load_idx_images, load_idx_labels, synthetic_bars
from .masking import InjectionConfig
from .modelio import model_bytes
from .network import (
    Conv2D,
    Dense,
    Flatten,
    Model,
    NumericalError,
    ReLU,
    RseConfig,
    SeedStream,
    forward,
    loss_and_grads,
    predict,
)
from .projection import sample_projection

EPS_8_255 = 8.0 / 255.0
STEP_2_255 = 2.0 / 255.0


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class PgdTrainConfig:
    epsilon: float = EPS_8_255
    step: float = STEP_2_255
    steps: int = 5


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch: int = 64
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float = 1.0  # global-norm clip; tames early adversarial batches
    lr_decay_epochs: tuple | None = None  # None = decay x0.1 at 50% and 75%
    pgd_train: PgdTrainConfig | None = field(default_factory=PgdTrainConfig)

    def decay_epochs(self) -> tuple:
        if self.lr_decay_epochs is not None:
            return tuple(self.lr_decay_epochs)
        return (self.epochs // 2, (3 * self.epochs) // 4)


@dataclass(frozen=True)
class DistillConfig:
    k_frac: float = 0.25
    k_per_layer: dict = field(default_factory=dict)
    method: str = "closed_form"
    sgd_epochs: int = 50
    calib_size: int = 4096
    seed: int = 0
    projection_s: int = 3


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 1
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass(frozen=True)
class EvalConfig:
    seeds: tuple = (0, 1, 2)
    entropy_samples: int = 64
    entropy_inputs: int = 100


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 4
    image_size: int = 16
    train_samples: int = 2000
    test_samples: int = 512
    noise: float = 0.18
    contrast: float = 0.55
    seed: int = 1


@dataclass(frozen=True)
class IdxSpec:
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass(frozen=True)
class DatasetConfig:
    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    idx: IdxSpec | None = None


@dataclass(frozen=True)
class ModelSpec:
    conv_channels: tuple = (8, 16)
    kernel: int = 3


@dataclass(frozen=True)
class SweepConfig:
    ratios: tuple = ()
    epsilons: tuple = ()
    attack_steps: int = 20


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    training: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    injection: InjectionConfig = field(
        default_factory=lambda: InjectionConfig.ratio(0.9, target_layers={"conv0", "conv1"})
    )
    attacks: tuple = field(
        default_factory=lambda: (
            AttackConfig("pgd", EPS_8_255, STEP_2_255, steps=20, random_start=True),
            AttackConfig("fgsm", EPS_8_255),
            AttackConfig("mifgsm", EPS_8_255, STEP_2_255, steps=5, decay=1.0),
        )
    )
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweeps: SweepConfig = field(default_factory=SweepConfig)
    seed: int = 0


def _dataclass_from_dict(cls, data):
    if data is None:
        return None
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        val = data[f.name]
        sub = {
            "pgd_train": PgdTrainConfig,
            "synthetic": SyntheticSpec,
            "idx": IdxSpec,
        }.get(f.name)
        if sub is not None and isinstance(val, dict):
            val = _dataclass_from_dict(sub, val)
        if isinstance(val, list):
            val = tuple(val)
        kwargs[f.name] = val
    return cls(**kwargs)


def _injection_from_dict(data) -> InjectionConfig:
    mode = data.get("mode", {"ratio": 0.9})
    if "ratio" in mode:
        mode_t = ("ratio", float(mode["ratio"]))
    elif "structured" in mode:
        n, m = mode["structured"]
        mode_t = ("structured", int(n), int(m))
    else:
        raise ValueError(f"injection mode must set 'ratio' or 'structured': {mode}")
    return InjectionConfig(
        mode=mode_t,
        target_layers=frozenset(data.get("target_layers", ("conv0", "conv1"))),
        invert=bool(data.get("invert", False)),
        resample=data.get("resample", "fixed"),
        rank_abs=bool(data.get("rank_abs", False)),
    )


def config_from_dict(data: dict) -> ExperimentConfig:
    kwargs = {}
    if "dataset" in data:
        ds = data["dataset"]
        kwargs["dataset"] = DatasetConfig(
            synthetic=_dataclass_from_dict(SyntheticSpec, ds.get("synthetic"))
            if "synthetic" in ds
            else None,
            idx=_dataclass_from_dict(IdxSpec, ds.get("idx")) if "idx" in ds else None,
        )
    for name, cls in [
        ("model", ModelSpec),
        ("training", TrainConfig),
        ("distill", DistillConfig),
        ("finetune", FinetuneConfig),
        ("eval", EvalConfig),
        ("sweeps", SweepConfig),
    ]:
        if name in data:
            kwargs[name] = _dataclass_from_dict(cls, data[name])
    if "injection" in data:
        kwargs["injection"] = _injection_from_dict(data["injection"])
    if "attacks" in data:
        kwargs["attacks"] = tuple(
            AttackConfig(
                kind=a["kind"],
                epsilon=float(a.get("epsilon", EPS_8_255)),
                step_size=float(a.get("step_size", STEP_2_255 if a["kind"] != "fgsm" else 0.0)),
                steps=int(a.get("steps", 1 if a["kind"] == "fgsm" else 20)),
                decay=float(a.get("decay", 1.0)),
                random_start=bool(a.get("random_start", a["kind"] == "pgd")),
            )
            for a in data["attacks"]
        )
    if "seed" in data:
        kwargs["seed"] = int(data["seed"])
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# data and model construction


def load_dataset(cfg: ExperimentConfig):
    """(x_train, y_train, x_test, y_test) with inputs normalized into [0, 1]."""
    ds = cfg.dataset
    if ds.idx is not None and ds.idx.train_images:
        xtr = load_idx_images(ds.idx.train_images)
        ytr = load_idx_labels(ds.idx.train_labels)
        xte = load_idx_images(ds.idx.test_images)
        yte = load_idx_labels(ds.idx.test_labels)
        return xtr, ytr, xte, yte
    spec = ds.synthetic
    if spec is None:
        raise ValueError("dataset config has neither synthetic nor idx sources")
    xtr, ytr = synthetic_bars(
        spec.train_samples, spec.image_size, spec.classes, spec.noise, spec.contrast, seed=spec.seed
    )
    xte, yte = synthetic_bars(
        spec.test_samples,
        spec.image_size,
        spec.classes,
        spec.noise,
        spec.contrast,
        seed=spec.seed + 1,
    )
    return xtr, ytr, xte, yte


def n_classes_of(cfg: ExperimentConfig) -> int:
    if cfg.dataset.synthetic is not None:
        return cfg.dataset.synthetic.classes
    _, ytr, _, _ = load_dataset(cfg)
    return int(ytr.max()) + 1


def build_model(cfg: ExperimentConfig, seed: int) -> Model:
    """Desk-scale conv net: conv -> relu -> conv -> relu -> flatten -> dense."""
    spec = cfg.model
    if cfg.dataset.synthetic is not None:
        size = cfg.dataset.synthetic.image_size
        classes = cfg.dataset.synthetic.classes
    else:
        xtr, ytr, _, _ = load_dataset(cfg)
        size = xtr.shape[2]
        classes = int(ytr.max()) + 1
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), 0x111)))
    layers = []
    c_in, side = 1, size
    for i, c_out in enumerate(spec.conv_channels):
        fan_in = c_in * spec.kernel * spec.kernel
        std = np.sqrt(2.0 / fan_in)
        kernel = rng.normal(0, std, (c_out, c_in, spec.kernel, spec.kernel)).astype(np.float32)
        # small positive bias keeps ReLUs alive through early adversarial batches
        layers += [
            Conv2D(kernel.astype(np.float64), np.full(c_out, 0.1), layer_id=f"conv{i}"),
            ReLU(),
        ]
        c_in = c_out
        side = side - spec.kernel + 1
    layers.append(Flatten())
    d = c_in * side * side
    std = np.sqrt(2.0 / d)
    W = rng.normal(0, std, (classes, d)).astype(np.float32)
    layers.append(Dense(W.astype(np.float64), np.zeros(classes), layer_id="dense0"))
    return Model(layers=layers, input_shape=(1, size, size), n_classes=classes)


def clone_model(model: Model) -> Model:
    layers = []
    for layer in model.layers:
        if isinstance(layer, Dense):
            layers.append(
                Dense(layer.W.copy(), layer.b.copy(), layer_id=layer.layer_id, approx=layer.approx)
            )
        elif isinstance(layer, Conv2D):
            layers.append(
                Conv2D(
                    layer.kernel.copy(),
                    layer.b.copy(),
                    stride=layer.stride,
                    padding=layer.padding,
                    layer_id=layer.layer_id,
                    approx=layer.approx,
                )
            )
        elif isinstance(layer, ReLU):
            layers.append(ReLU(layer_id=layer.layer_id))
        else:
            layers.append(Flatten(layer_id=layer.layer_id))
    return Model(layers=layers, input_shape=model.input_shape, n_classes=model.n_classes)


# ---------------------------------------------------------------------------
# training


def _clip_grads(model, grads, max_norm):
    if not max_norm or max_norm <= 0:
        return
    total = 0.0
    for g in grads:
        if g is not None:
            total += float(np.sum(g["W"] ** 2)) + float(np.sum(g["b"] ** 2))
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            if g is not None:
                g["W"] *= scale
                g["b"] *= scale


def _sgd_update(model, grads, velocity, lr, momentum, weight_decay):
    for layer, g, vel in zip(model.layers, grads, velocity):
        if g is None:
            continue
        if isinstance(layer, Dense):
            names = [("W", "W"), ("b", "b")]
        else:
            names = [("kernel", "W"), ("b", "b")]
        for attr, key in names:
            param = getattr(layer, attr)
            grad = g[key] + weight_decay * param
            vel[key] = momentum * vel[key] - lr * grad
            param += vel[key]


def _init_velocity(model):
    vel = []
    for layer in model.layers:
        if isinstance(layer, Dense):
            vel.append({"W": np.zeros_like(layer.W), "b": np.zeros_like(layer.b)})
        elif isinstance(layer, Conv2D):
            vel.append({"W": np.zeros_like(layer.kernel), "b": np.zeros_like(layer.b)})
        else:
            vel.append(None)
    return vel


def train_model(
    model: Model,
    x,
    y,
    train_cfg: TrainConfig,
    seed: int,
    inj: InjectionConfig | None = None,
    stream_label: str = "train",
) -> list[float]:
    """In-place momentum-SGD training; returns the per-epoch mean loss.

    With pgd_train set (epsilon > 0) every batch is replaced by PGD
    adversarial examples against the current model. With an injection config
    the forward pass runs injected and gradients stop at the approximation.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), 0x7124)))
    velocity = _init_velocity(model)
    lr = train_cfg.lr
    decay_at = set(train_cfg.decay_epochs())
    n = x.shape[0]
    adv = train_cfg.pgd_train is not None and train_cfg.pgd_train.epsilon > 0
    stream = SeedStream(seed, stream_label) if _needs_stream(inj) else None
    epoch_losses = []
    for epoch in range(train_cfg.epochs):
        if epoch in decay_at and epoch > 0:
            lr *= 0.1
        order = rng.permutation(n)
        losses = []
        for bi, start in enumerate(range(0, n, train_cfg.batch)):
            idx = order[start : start + train_cfg.batch]
            xb, yb = x[idx], y[idx]
            if adv:
                atk = AttackConfig(
                    "pgd",
                    train_cfg.pgd_train.epsilon,
                    train_cfg.pgd_train.step,
                    steps=train_cfg.pgd_train.steps,
                    random_start=True,
                )
                xb = pgd(
                    model, xb, yb, atk, inj=inj, stream=stream,
                    seed=int(rng.integers(0, 2**63)),
                )
            try:
                loss, _, grads = loss_and_grads(model, xb, yb, inj, stream=stream)
            except NumericalError as exc:
                raise NumericalError(f"training diverged at epoch {epoch} batch {bi}") from exc
            if not np.isfinite(loss):
                raise NumericalError(f"training diverged at epoch {epoch} batch {bi}")
            _clip_grads(model, grads, train_cfg.grad_clip)
            _sgd_update(model, grads, velocity, lr, train_cfg.momentum, train_cfg.weight_decay)
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))
    return epoch_losses


def _needs_stream(inj) -> bool:
    return (
        isinstance(inj, InjectionConfig)
        and inj.resample == "per_forward"
        or isinstance(inj, RseConfig)
        and inj.sigma > 0
    )


def adversarial_train(cfg: ExperimentConfig, seed: int | None = None, data=None) -> Model:
    """Train the baseline with PGD adversarial batches per cfg.training."""
    seed = cfg.seed if seed is None else seed
    if data is None:
        data = load_dataset(cfg)
    xtr, ytr, _, _ = data
    model = build_model(cfg, seed)
    if cfg.training.epochs > 0:
        train_model(model, xtr, ytr, cfg.training, seed)
    return model


# ---------------------------------------------------------------------------
# distillation and fine-tuning


def distill_layer_columns(model: Model, x, layer_id: str, max_cols: int, seed: int = 0):
    """Calibration columns (inputs in inner-product form) for one layer.

    Runs the clean forward up to the layer, unrolls conv inputs to im2col
    columns, and subsamples down to max_cols rows deterministically.
    Returns (columns, None); targets are recomputed by the fitter.
    """
    from .network import _im2col, _pad_input

    a = np.asarray(x, dtype=np.float64)
    target_layer = model.get_layer(layer_id)
    for layer in model.layers:
        if layer is target_layer:
            break
        if isinstance(layer, Dense):
            a = a @ layer.W.T + layer.b
        elif isinstance(layer, Conv2D):
            kh, kw = layer.kernel.shape[2:]
            h = (a.shape[2] + 2 * layer.padding - kh) // layer.stride + 1
            w = (a.shape[3] + 2 * layer.padding - kw) // layer.stride + 1
            cols = _im2col(_pad_input(a, layer.padding), kh, kw, layer.stride, h, w)
            z = np.matmul(layer.kernel.reshape(layer.kernel.shape[0], -1), cols)
            a = (z + layer.b[None, :, None]).reshape(a.shape[0], -1, h, w)
        elif isinstance(layer, ReLU):
            a = np.maximum(a, 0.0)
        else:
            a = a.reshape(a.shape[0], -1)
    if isinstance(target_layer, Dense):
        cols = a
    else:
        kh, kw = target_layer.kernel.shape[2:]
        h = (a.shape[2] + 2 * target_layer.padding - kh) // target_layer.stride + 1
        w = (a.shape[3] + 2 * target_layer.padding - kw) // target_layer.stride + 1
        cols3 = _im2col(_pad_input(a, target_layer.padding), kh, kw, target_layer.stride, h, w)
        cols = cols3.transpose(0, 2, 1).reshape(-1, cols3.shape[1])
    if cols.shape[0] > max_cols:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), 0xCA11B)))
        cols = cols[rng.choice(cols.shape[0], size=max_cols, replace=False)]
    return np.ascontiguousarray(cols), None


def distill_approx(cfg_model: Model, cfg: ExperimentConfig, data=None):
    """Fit and attach per-layer approximation params; returns (model, reports).

    Calibration inputs are clean training inputs. The model is returned as a
    modified copy; untargeted layers are untouched, and an empty target set
    returns the model unchanged.
    """
    model = clone_model(cfg_model)
    targets = sorted(cfg.injection.target_layers)
    if not targets:
        return model, {}
    if data is None:
        data = load_dataset(cfg)
    xtr = data[0]
    dc = cfg.distill
    reports = {}
    for lid in targets:
        layer = model.get_layer(lid)
        cols, _ = distill_layer_columns(model, xtr, lid, dc.calib_size, seed=dc.seed)
        if isinstance(layer, Conv2D):
            W = layer.kernel.reshape(layer.kernel.shape[0], -1)
            d = W.shape[1]
        else:
            W = layer.W
            d = W.shape[1]
        k = int(dc.k_per_layer.get(lid, 0)) or default_k(d, dc.k_frac)
        proj = sample_projection(k, d, dc.projection_s, seed=_layer_seed(dc.seed, lid))
        params, report = fit_approx(
            W,
            layer.b,
            cols,
            proj,
            method=dc.method,
            layer_id=lid,
            epochs=dc.sgd_epochs,
            seed=dc.seed,
        )
        layer.approx = params
        reports[lid] = report
    return model, reports


def _layer_seed(seed: int, layer_id: str) -> int:
    import zlib

    return (int(seed) << 16) ^ zlib.crc32(layer_id.encode())


def finetune(model: Model, cfg: ExperimentConfig, data=None) -> Model:
    """Train backbone weights with injection active; approx params frozen."""
    for lid in cfg.injection.target_layers:
        if model.get_layer(lid).approx is None:
            raise ValueError(f"finetune needs approximation params on layer {lid!r}")
    tuned = clone_model(model)
    if cfg.finetune.epochs == 0:
        return tuned
    if data is None:
        data = load_dataset(cfg)
    xtr, ytr, _, _ = data
    ft_train = TrainConfig(
        epochs=cfg.finetune.epochs,
        batch=cfg.training.batch,
        lr=cfg.finetune.lr,
        momentum=cfg.finetune.momentum,
        weight_decay=cfg.finetune.weight_decay,
        lr_decay_epochs=(),
        pgd_train=None,
    )
    train_model(tuned, xtr, ytr, ft_train, cfg.seed, inj=cfg.injection, stream_label="finetune")
    return tuned


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class RseModel:
    """A model variant with additive Gaussian pre-activation noise."""

    model: Model
    noise: RseConfig


def rse_baseline(model: Model, sigma: float, target_layers=None) -> RseModel:
    return RseModel(model=model, noise=RseConfig(sigma=sigma, target_layers=target_layers))


def _unwrap(model_or_rse):
    if isinstance(model_or_rse, RseModel):
        return model_or_rse.model, model_or_rse.noise
    return model_or_rse, None


def _resolve_inj(model: Model, cfg: ExperimentConfig):
    """Use cfg.injection when every target layer carries approx params."""
    targets = cfg.injection.target_layers
    if targets and all(model.get_layer(l).approx is not None for l in targets):
        return cfg.injection
    return None


def accuracy(model_or_rse, x, y, inj=None, stream=None) -> float:
    model, noise = _unwrap(model_or_rse)
    use = inj if inj is not None else noise
    preds = predict(model, x, use, stream=stream)
    return float(np.mean(preds == np.asarray(y)))


def entropy_from_predictions(preds, n_classes: int) -> float:
    """Shannon entropy (nats) of the empirical predicted-class distribution."""
    counts = np.bincount(np.asarray(preds, dtype=np.int64), minlength=n_classes)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def entropy_estimate(model_or_rse, x, n_samples: int, inj=None, root: int = 0) -> float:
    """Entropy of the predicted-class distribution over stochastic forwards.

    Deterministic configurations (fixed projection, no noise) are a point
    mass, reported as exactly 0 without sampling.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    model, noise = _unwrap(model_or_rse)
    use = inj if inj is not None else noise
    if not _needs_stream(use):
        return 0.0
    tiled = np.repeat(np.asarray(x, dtype=np.float64)[None], n_samples, axis=0)
    stream = SeedStream(root, "entropy")
    preds = predict(model, tiled, use, stream=stream)
    return entropy_from_predictions(preds, model.n_classes)


@dataclass
class ExperimentReport:
    clean_accuracy: float
    clean_per_seed: list
    attacks: list  # dicts: label/kind/epsilon/steps/robust_accuracy/per_seed
    injection_fraction_per_layer: dict
    entropy_mean: float
    entropy_note: str
    cost: dict
    wall_time_s: dict
    seeds: list

    def to_dict(self) -> dict:
        return {
            "clean_accuracy": self.clean_accuracy,
            "clean_per_seed": self.clean_per_seed,
            "robust_accuracy": {a["label"]: a["robust_accuracy"] for a in self.attacks},
            "attacks": self.attacks,
            "injection_fraction_per_layer": self.injection_fraction_per_layer,
            "entropy_mean": self.entropy_mean,
            "entropy_note": self.entropy_note,
            "cost": self.cost,
            "wall_time_s": self.wall_time_s,
            "seeds": self.seeds,
        }


def realized_injection_fractions(model: Model, x, inj: InjectionConfig, stream=None) -> dict:
    _, trace = forward(model, x, inj, stream=stream, trace=True)
    out = {}
    for t in trace.layers:
        if t.mask is not None:
            out[t.layer_id] = float(1.0 - t.mask.mean())
    return out


def evaluate(model_or_rse, cfg: ExperimentConfig, data=None, inj="auto") -> ExperimentReport:
    """Clean and per-attack robust accuracy, injection fractions, entropy,
    BitOps, aggregated over cfg.eval.seeds.

    Clean and adversarial predictions of one eval seed share the same
    defender realization stream, so an attack can only tie or hurt a sample
    whose perturbation it failed to move.
    """
    model, noise = _unwrap(model_or_rse)
    if data is None:
        data = load_dataset(cfg)
    _, _, xte, yte = data
    if xte.shape[0] == 0:
        raise ValueError("evaluation set is empty")
    use = _resolve_inj(model, cfg) if inj == "auto" else inj
    if use is None and noise is not None:
        use = noise
    t0 = time.perf_counter()

    clean_per_seed, attack_rows = [], []
    frac_accum: dict[str, list] = {}
    entropies = []
    for s in cfg.eval.seeds:
        eval_stream = SeedStream(s, "eval") if _needs_stream(use) else None
        clean_per_seed.append(accuracy(model, xte, yte, use, stream=eval_stream))
        for ai, atk in enumerate(cfg.attacks):
            atk_stream = SeedStream(s, f"attack{ai}") if _needs_stream(use) else None
            x_adv = run_attack(model, xte, yte, atk, inj=use, stream=atk_stream, seed=s)
            adv_stream = SeedStream(s, "eval") if _needs_stream(use) else None
            acc = accuracy(model, x_adv, yte, use, stream=adv_stream)
            attack_rows.append((s, ai, atk, acc))
        if isinstance(use, InjectionConfig):
            frac_stream = SeedStream(s, "frac") if _needs_stream(use) else None
            subset = xte[: min(64, xte.shape[0])]
            for lid, frac in realized_injection_fractions(model, subset, use, frac_stream).items():
                frac_accum.setdefault(lid, []).append(frac)
        if isinstance(use, InjectionConfig) and use.resample == "per_forward":
            n_inputs = min(cfg.eval.entropy_inputs, xte.shape[0])
            ent = [
                entropy_estimate(model, xte[i], cfg.eval.entropy_samples, use, root=s * 10_007 + i)
                for i in range(n_inputs)
            ]
            entropies.append(float(np.mean(ent)))

    attacks_out = []
    for ai, atk in enumerate(cfg.attacks):
        per_seed = [acc for (s, i, a, acc) in attack_rows if i == ai]
        attacks_out.append(
            {
                "label": atk.label,
                "kind": atk.kind,
                "epsilon": atk.epsilon,
                "steps": atk.steps,
                "robust_accuracy": float(np.mean(per_seed)),
                "per_seed": per_seed,
            }
        )
    if isinstance(use, InjectionConfig):
        entropy_note = (
            "mean over stochastic forwards"
            if use.resample == "per_forward"
            else "fixed projection: deterministic mapping, entropy exactly 0"
        )
    else:
        entropy_note = "no injection configured"
    cost = model_bitops(model, use if isinstance(use, InjectionConfig) else None).to_dict()
    return ExperimentReport(
        clean_accuracy=float(np.mean(clean_per_seed)),
        clean_per_seed=clean_per_seed,
        attacks=attacks_out,
        injection_fraction_per_layer={k: float(np.mean(v)) for k, v in frac_accum.items()},
        entropy_mean=float(np.mean(entropies)) if entropies else 0.0,
        entropy_note=entropy_note,
        cost=cost,
        wall_time_s={"evaluate": time.perf_counter() - t0},
        seeds=list(cfg.eval.seeds),
    )


def approx_param_bytes(model: Model) -> bytes:
    """Serialized approx payloads only, for frozen-parameter assertions."""
    from .modelio import _pack_approx

    out = bytearray()
    for layer in model.layers:
        if isinstance(layer, (Dense, Conv2D)) and layer.approx is not None:
            out += _pack_approx(layer.approx)
    return bytes(out)


# ---------------------------------------------------------------------------
# full pipeline


def config_to_dict(cfg: ExperimentConfig) -> dict:
    import dataclasses

    def convert(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {k: convert(v) for k, v in dataclasses.asdict(obj).items()}
        if isinstance(obj, frozenset):
            return sorted(obj)
        if isinstance(obj, tuple):
            return [convert(v) for v in obj]
        if isinstance(obj, dict):
            return {k: convert(v) for k, v in obj.items()}
        return obj

    out = {}
    for f in fields(cfg):
        out[f.name] = convert(getattr(cfg, f.name))
    return out


def _quick_eval(model, cfg, data, inj, attack: AttackConfig, seed: int):
    """Clean accuracy and one-attack robust accuracy for sweep rows."""
    _, _, xte, yte = data
    eval_stream = SeedStream(seed, "eval") if _needs_stream(inj) else None
    clean = accuracy(model, xte, yte, inj, stream=eval_stream)
    atk_stream = SeedStream(seed, "attack_sweep") if _needs_stream(inj) else None
    x_adv = run_attack(model, xte, yte, attack, inj=inj, stream=atk_stream, seed=seed)
    adv_stream = SeedStream(seed, "eval") if _needs_stream(inj) else None
    robust = accuracy(model, x_adv, yte, inj, stream=adv_stream)
    return clean, robust


def run_experiment(config, out_dir) -> dict:
    """train -> distill -> finetune -> evaluate (+ configured sweeps); writes
    JSON/CSV reports with figures alongside, plus the model files.

    A stage failure writes a partial report flagged incomplete and re-raises
    with the stage name.
    """
    from pathlib import Path

    from .modelio import save_model
    from .report import write_report_bundle

    cfg = load_config(config) if isinstance(config, (str, Path)) else config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report: dict = {"config": config_to_dict(cfg), "incomplete": True, "stage_times_s": {}}
    stage = "setup"

    def finish_stage(name, t0):
        report["stage_times_s"][name] = time.perf_counter() - t0

    try:
        stage = "data"
        t0 = time.perf_counter()
        data = load_dataset(cfg)
        finish_stage(stage, t0)

        stage = "train"
        t0 = time.perf_counter()
        baseline = adversarial_train(cfg, data=data)
        save_model(baseline, out / "model_baseline.nenn")
        finish_stage(stage, t0)

        stage = "distill"
        t0 = time.perf_counter()
        distilled, fit_reports = distill_approx(baseline, cfg, data=data)
        report["distill"] = {
            lid: {
                "mse_pre_quant": r.mse_pre_quant,
                "mse_post_quant": r.mse_post_quant,
                "rank_deficient": r.rank_deficient,
                "n_samples": r.n_samples,
            }
            for lid, r in fit_reports.items()
        }
        finish_stage(stage, t0)

        stage = "finetune"
        t0 = time.perf_counter()
        tuned = finetune(distilled, cfg, data=data) if fit_reports else distilled
        save_model(tuned, out / "model_injected.nenn")
        finish_stage(stage, t0)

        stage = "evaluate"
        t0 = time.perf_counter()
        method_report = evaluate(tuned, cfg, data=data)
        baseline_report = evaluate(baseline, cfg, data=data, inj=None)
        report["method"] = method_report.to_dict()
        report["baseline"] = baseline_report.to_dict()
        report["improvement"] = {
            a["label"]: m["robust_accuracy"] - a["robust_accuracy"]
            for a, m in zip(baseline_report.attacks, method_report.attacks)
        }
        report["clean_drop"] = baseline_report.clean_accuracy - method_report.clean_accuracy
        finish_stage(stage, t0)

        ratio_rows, eps_rows = [], []
        if cfg.sweeps.ratios or cfg.sweeps.epsilons:
            stage = "sweeps"
            t0 = time.perf_counter()
            seed0 = cfg.eval.seeds[0] if cfg.eval.seeds else 0
            if cfg.sweeps.ratios:
                atk = cfg.attacks[0]
                for r in cfg.sweeps.ratios:
                    inj_r = replace(cfg.injection, mode=("ratio", float(r)))
                    clean, robust = _quick_eval(tuned, cfg, data, inj_r, atk, seed0)
                    cost = model_bitops(tuned, inj_r)
                    ratio_rows.append(
                        {
                            "ratio": float(r),
                            "clean": clean,
                            "robust": robust,
                            "bitops_total": cost.grand_total,
                            "reduction": cost.reduction,
                        }
                    )
                report["ratio_sweep"] = ratio_rows
            if cfg.sweeps.epsilons:
                inj = _resolve_inj(tuned, cfg)
                for eps in cfg.sweeps.epsilons:
                    atk = AttackConfig(
                        "pgd", float(eps), STEP_2_255, steps=cfg.sweeps.attack_steps,
                        random_start=True,
                    )
                    _, rob_b = _quick_eval(baseline, cfg, data, None, atk, seed0)
                    _, rob_m = _quick_eval(tuned, cfg, data, inj, atk, seed0)
                    eps_rows.append(
                        {"epsilon": float(eps), "baseline_robust": rob_b, "method_robust": rob_m}
                    )
                report["epsilon_sweep"] = eps_rows
            finish_stage(stage, t0)

        stage = "report"
        t0 = time.perf_counter()
        from .costmodel import structured_cost_table

        cost_rows = structured_cost_table(
            dims_from_model_cfg(tuned, cfg), [f"{cfg.injection.injected_fraction:.4g}"]
        )
        report["incomplete"] = False
        write_report_bundle(report, out, ratio_rows or None, eps_rows or None, cost_rows)
        finish_stage(stage, t0)
    except Exception as exc:
        report["failed_stage"] = stage
        report["error"] = f"{type(exc).__name__}: {exc}"
        from .report import write_json

        write_json(report, out / "report.json")
        raise RuntimeError(f"experiment stage {stage!r} failed: {exc}") from exc
    return report


def dims_from_model_cfg(model: Model, cfg: ExperimentConfig):
    from .costmodel import dims_from_model

    return dims_from_model(model, _resolve_inj(model, cfg))
