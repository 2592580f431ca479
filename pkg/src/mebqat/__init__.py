"""Bitwidth-adaptive quantization-aware training toolkit.

A single full-precision parameter set is meta-trained to tolerate
quantization to any bitwidth setting in a task set, over a self-contained
reverse-mode autodiff core. Three engines cover shared-label adaptation,
gradient-based few-shot adaptation, and prototype-based few-shot
adaptation, with a dedicated-QAT baseline, a CLI harness, and
scikit-learn style estimator wrappers.
"""

from .autodiff import Tensor, grad_check, no_grad
from .estimators import (
    BitwidthAdaptiveClassifier,
    MamlFewShotClassifier,
    PrototypeFewShotClassifier,
)
from .models import QuantPolicy, build_model, forward_quantized, init_params
from .quantization import (
    FP,
    Bitwidth,
    BitwidthTask,
    BitwidthTaskSet,
    quantize_activations,
    quantize_k,
    quantize_weights,
    sample_bitwidth_tasks,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "grad_check",
    "Bitwidth",
    "BitwidthTask",
    "BitwidthTaskSet",
    "FP",
    "quantize_k",
    "quantize_weights",
    "quantize_activations",
    "sample_bitwidth_tasks",
    "QuantPolicy",
    "build_model",
    "forward_quantized",
    "init_params",
    "BitwidthAdaptiveClassifier",
    "MamlFewShotClassifier",
    "PrototypeFewShotClassifier",
    "__version__",
]
