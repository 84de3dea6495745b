"""Noise injection into non-essential neurons, at desk scale.

A self-contained engine that learns low-rank INT4 approximations of layer
pre-activations through a sparse ternary random projection, keeps only the
essential (top-ranked) activations precise, populates the rest with the
approximations, and measures the effect on clean accuracy, adversarial
robustness, and BitOps cost.
"""

from .approx import ApproxParams, FitReport, approx_forward, fit_approx
from .attacks import AttackConfig, fgsm, mifgsm, pgd, run_attack
from .costmodel import (
    CostReport,
    LayerDims,
    OpCountPolicy,
    bitops_report,
    layer_bitops,
    model_bitops,
    resnet18_cifar_dims,
    structured_cost_table,
)
from .data import load_idx, load_idx_images, load_idx_labels, save_idx, synthetic_bars
from .masking import InjectionConfig, mix, nm_mask, topk_mask
from .modelio import (
    ChecksumError,
    ModelFormatError,
    TruncatedFileError,
    UnknownLayerError,
    VersionMismatchError,
    load_model,
    save_model,
)
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
    input_grad,
    loss_and_grads,
    predict,
)
from .projection import SparseTernaryProjection, preservation_stats, project, sample_projection
from .quant import QuantTensor, dequantize, quantize_sym

__version__ = "0.1.0"
