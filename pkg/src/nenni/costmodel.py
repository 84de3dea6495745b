"""BitOps accounting for precise, approximate, and projection computation.

Cost rule: a b-bit multiply costs b*b BitOps and a b-bit add costs b, anchored
at one 4-bit multiply = sixteen BitOps = four 4-bit additions. The precise
path runs at 16-bit operands by default, the approximate multiplies at 4-bit,
and projection additions at 16-bit, counted once per distinct input vector
(one im2col column per spatial position) at the expected density 1/s.

Pattern labels in cost tables follow the injected-count convention used by
structured noise-injection results: "7:8" injects 7 out of every 8 outputs
(injected fraction 7/8), which is the mask configuration keeping N = 1 of
M = 8. Reductions are reported against the no-injection baseline; absolute
totals depend on the operand-width policy, so only ratios are comparable
across accountings.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources

from .quant import round_half_away


@dataclass(frozen=True)
class OpCountPolicy:
    precise_bits: int = 16
    approx_bits: int = 4
    projection_add_bits: int = 16

    def __post_init__(self):
        if min(self.precise_bits, self.approx_bits, self.projection_add_bits) <= 0:
            raise ValueError("operand widths must be positive")

    def mult_cost(self, bits: int) -> float:
        return float(bits * bits)

    def add_cost(self, bits: int) -> float:
        return float(bits)


DEFAULT_POLICY = OpCountPolicy()


def default_k(d: int, k_frac: float = 0.25) -> int:
    return max(1, int(round_half_away(d * k_frac)))


@dataclass(frozen=True)
class LayerDims:
    """Inner-product geometry of one layer: outputs = positions * n dot
    products of width d; instrumented layers also carry a projection width k.
    """

    name: str
    kind: str  # "dense" | "conv"
    n: int
    d: int
    positions: int = 1
    instrumented: bool = True
    k: int | None = None
    s: int = 3

    def __post_init__(self):
        if self.kind not in ("dense", "conv"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.n < 1 or self.d < 1 or self.positions < 1:
            raise ValueError(f"layer {self.name!r}: dimensions must be positive")
        if self.s < 1:
            raise ValueError("sparsity parameter s must be >= 1")
        if self.k is not None and self.k < 1:
            raise ValueError("projection width k must be >= 1")

    @property
    def k_eff(self) -> int:
        return self.k if self.k is not None else default_k(self.d)


@dataclass(frozen=True)
class LayerCost:
    name: str
    precise: float
    approx: float
    projection: float

    @property
    def total(self) -> float:
        return self.precise + self.approx + self.projection


@dataclass(frozen=True)
class CostReport:
    layers: tuple[LayerCost, ...]
    baseline_total: float

    @property
    def precise_total(self) -> float:
        return sum(l.precise for l in self.layers)

    @property
    def approx_total(self) -> float:
        return sum(l.approx for l in self.layers)

    @property
    def projection_total(self) -> float:
        return sum(l.projection for l in self.layers)

    @property
    def grand_total(self) -> float:
        return sum(l.total for l in self.layers)

    @property
    def reduction(self) -> float:
        return 1.0 - self.grand_total / self.baseline_total

    def to_dict(self) -> dict:
        return {
            "layers": [
                {
                    "name": l.name,
                    "precise_bitops": l.precise,
                    "approx_mult_bitops": l.approx,
                    "projection_add_bitops": l.projection,
                    "total": l.total,
                }
                for l in self.layers
            ],
            "precise_total": self.precise_total,
            "approx_total": self.approx_total,
            "projection_total": self.projection_total,
            "grand_total": self.grand_total,
            "baseline_total": self.baseline_total,
            "reduction_vs_baseline": self.reduction,
        }


def layer_bitops(
    dims: LayerDims, injection_fraction: float, policy: OpCountPolicy = DEFAULT_POLICY
) -> LayerCost:
    """Per-layer BitOps breakdown at an injected fraction r.

    precise  = (1-r) * outputs * d * (mult(pb) + add(pb))
    approx   = outputs * k * (mult(ab) + add(ab))        [instrumented only]
    projection = positions * k * d * (1/s) * add(proj)   [instrumented only]
    """
    if not (0.0 <= injection_fraction <= 1.0):
        raise ValueError("injection fraction must lie in [0, 1]")
    outputs = dims.positions * dims.n
    mac_precise = policy.mult_cost(policy.precise_bits) + policy.add_cost(policy.precise_bits)
    if not dims.instrumented:
        return LayerCost(dims.name, outputs * dims.d * mac_precise, 0.0, 0.0)
    k = dims.k_eff
    precise = (1.0 - injection_fraction) * outputs * dims.d * mac_precise
    mac_approx = policy.mult_cost(policy.approx_bits) + policy.add_cost(policy.approx_bits)
    approx = outputs * k * mac_approx
    projection = dims.positions * k * dims.d * (1.0 / dims.s) * policy.add_cost(
        policy.projection_add_bits
    )
    return LayerCost(dims.name, precise, approx, projection)


def _baseline_total(dims_list, policy) -> float:
    mac = policy.mult_cost(policy.precise_bits) + policy.add_cost(policy.precise_bits)
    return sum(d.positions * d.n * d.d * mac for d in dims_list)


def bitops_report(
    dims_list, injection_fraction: float, policy: OpCountPolicy = DEFAULT_POLICY
) -> CostReport:
    """Cost report for a list of LayerDims at one injected fraction.

    A fraction of 0 with instrumented layers still pays the approximation and
    projection overhead; pass instrumented=False dims (or use baseline_report)
    for the plain network cost.
    """
    layers = tuple(layer_bitops(d, injection_fraction, policy) for d in dims_list)
    return CostReport(layers=layers, baseline_total=_baseline_total(dims_list, policy))


def dims_from_model(model, cfg=None, k_frac: float = 0.25):
    """Derive LayerDims from an actual Model, walking the shape chain.

    Instrumented = the layer is targeted by cfg; k comes from attached
    approximation params when present, else round(d * k_frac).
    """
    from .network import Conv2D, Dense, layer_output_shape  # local to avoid cycle

    targets = set(cfg.target_layers) if cfg is not None else set()
    dims = []
    shape = model.input_shape
    for layer in model.layers:
        out_shape = layer_output_shape(layer, shape)
        if isinstance(layer, Dense):
            n, d = layer.W.shape
            instrumented = layer.layer_id in targets
            k = layer.approx.k if layer.approx is not None else default_k(d, k_frac)
            dims.append(
                LayerDims(layer.layer_id, "dense", n, d, 1, instrumented=instrumented, k=k)
            )
        elif isinstance(layer, Conv2D):
            c_out, c_in, kh, kw = layer.kernel.shape
            positions = out_shape[1] * out_shape[2]
            instrumented = layer.layer_id in targets
            d = c_in * kh * kw
            k = layer.approx.k if layer.approx is not None else default_k(d, k_frac)
            dims.append(
                LayerDims(
                    layer.layer_id, "conv", c_out, d, positions, instrumented=instrumented, k=k
                )
            )
        shape = out_shape
    return dims


def model_bitops(model, cfg=None, policy: OpCountPolicy = DEFAULT_POLICY) -> CostReport:
    """CostReport for a Model under an injection config (none = baseline)."""
    dims = dims_from_model(model, cfg)
    r = cfg.injected_fraction if cfg is not None else 0.0
    return bitops_report(dims, r, policy)


def parse_pattern(pattern: str) -> tuple[str, float]:
    """'0.9' -> ratio 0.9; 'a:b' -> inject a out of every b (r = a/b)."""
    pattern = str(pattern).strip()
    if ":" in pattern:
        a_str, b_str = pattern.split(":")
        a, b = int(a_str), int(b_str)
        if b < 1 or not (0 <= a <= b):
            raise ValueError(f"bad structured pattern {pattern!r}")
        return pattern, a / b
    r = float(pattern)
    if not (0.0 <= r <= 1.0):
        raise ValueError(f"ratio pattern {pattern!r} outside [0, 1]")
    return pattern, r


def structured_cost_table(
    dims_list, patterns, policy: OpCountPolicy = DEFAULT_POLICY
) -> list[tuple[str, float, CostReport]]:
    """One CostReport per pattern; rows are (label, injected fraction, report)."""
    rows = []
    for pattern in patterns:
        label, r = parse_pattern(pattern)
        rows.append((label, r, bitops_report(dims_list, r, policy)))
    return rows


def resnet18_cifar_dims() -> list[LayerDims]:
    """The shipped ResNet-18 (CIFAR geometry) dimension fixture."""
    raw = json.loads(
        resources.files("nenni").joinpath("resnet18_cifar_dims.json").read_text("utf-8")
    )
    if raw.get("version") != 1:
        raise ValueError(f"unsupported fixture version {raw.get('version')}")
    return [
        LayerDims(
            name=entry["name"],
            kind=entry["kind"],
            n=entry["n"],
            d=entry["d"],
            positions=entry.get("positions", 1),
            instrumented=entry.get("instrumented", True),
        )
        for entry in raw["layers"]
    ]


def write_cost_csv(rows, path) -> None:
    """CSV with one line per (pattern, layer-aggregate) cost row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["pattern", "injected_fraction", "precise", "approx", "projection", "total", "reduction"]
        )
        for label, r, report in rows:
            writer.writerow(
                [
                    label,
                    f"{r:.6g}",
                    f"{report.precise_total:.6e}",
                    f"{report.approx_total:.6e}",
                    f"{report.projection_total:.6e}",
                    f"{report.grand_total:.6e}",
                    f"{report.reduction:.6f}",
                ]
            )


def write_cost_json(rows, path) -> None:
    doc = [
        {"pattern": label, "injected_fraction": r, **report.to_dict()}
        for label, r, report in rows
    ]
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
