"""CNN model zoo expressed as layer graphs, plus the quantized forward pass.

Three families are built here: a 4-block embedding network for
prototype-based few-shot learning, a 4-block + linear-head classifier for
gradient-based few-shot learning, and an 8-layer VGG-style classifier
(with a width-reduced variant for desk-scale runs). Convolutions carry no
bias (every conv is followed by transductive batch norm); linear layers
carry one.

Quantization policy: the first and last weight-bearing layers and all
batch-norm parameters stay full-precision; every other weight tensor is
quantized before use and every post-relu activation is quantized, per the
DoReFa placement.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .quantization import FP, Bitwidth, BitwidthTask, quantize_activations, quantize_weights

__all__ = [
    "Conv",
    "BatchNorm",
    "Relu",
    "MaxPool",
    "Flatten",
    "Linear",
    "ModelSpec",
    "QuantPolicy",
    "build_model",
    "init_params",
    "clone_params",
    "forward",
    "forward_quantized",
    "param_count",
    "bn_param_names",
    "bn_fraction",
]


@dataclass(frozen=True)
class Conv:
    name: str
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class BatchNorm:
    name: str


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool:
    kernel: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Linear:
    name: str
    out_features: int


Layer = Union[Conv, BatchNorm, Relu, MaxPool, Flatten, Linear]


@dataclass(frozen=True)
class QuantPolicy:
    """Which layers are exempt from weight quantization. BN is always exempt."""

    quantize_first_layer: bool = False
    quantize_last_layer: bool = False
    quantize_bn: bool = False

    def __post_init__(self):
        if self.quantize_bn:
            raise ValueError("batch-norm parameters are never quantized")


@dataclass(frozen=True)
class ModelSpec:
    """Immutable layer graph with resolved parameter shapes."""

    kind: str
    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int]  # (C, H, W)
    output_role: str  # "logits" or "embedding"
    output_dim: int
    param_shapes: dict[str, tuple[int, ...]]
    weight_layer_names: tuple[str, ...]  # conv/linear names in forward order

    def exempt_weight_layers(self, policy: QuantPolicy) -> frozenset[str]:
        exempt = set()
        if not policy.quantize_first_layer:
            exempt.add(self.weight_layer_names[0])
        if not policy.quantize_last_layer:
            exempt.add(self.weight_layer_names[-1])
        return frozenset(exempt)


_CONV8_CHANNELS = (128, 128, 256, 256, 512, 512)
_CONV8_HIDDEN = 1024
_CONV8_REDUCED_CHANNELS = (16, 16, 32, 32, 64, 64)
_CONV8_REDUCED_HIDDEN = 128


def build_model(kind: str, width: int, input_shape: tuple[int, int, int]) -> ModelSpec:
    """Construct a model spec.

    ``width`` is the class count for classifier kinds and the embedding
    channel width for ``conv4-pn`` (the embedding dimension is that width
    times the final spatial extent). ``input_shape`` is (C, H, W).
    """
    if width < 1:
        raise ValueError(f"width must be positive, got {width}")
    layers: list[Layer] = []
    spatial = min(input_shape[1], input_shape[2])

    def pool_if_fits():
        # tiny toy inputs run out of spatial extent before the last blocks
        nonlocal spatial
        if spatial >= 2:
            layers.append(MaxPool(2))
            spatial //= 2

    if kind == "conv5-maml":
        for i in range(1, 5):
            layers += [Conv(f"conv{i}", 32), BatchNorm(f"bn{i}"), Relu()]
            pool_if_fits()
        layers += [Flatten(), Linear("head", width)]
        role = "logits"
    elif kind == "conv4-pn":
        for i in range(1, 5):
            layers += [Conv(f"conv{i}", width), BatchNorm(f"bn{i}"), Relu()]
            pool_if_fits()
        layers += [Flatten()]
        role = "embedding"
    elif kind in ("conv8", "conv8-reduced"):
        channels = _CONV8_CHANNELS if kind == "conv8" else _CONV8_REDUCED_CHANNELS
        hidden = _CONV8_HIDDEN if kind == "conv8" else _CONV8_REDUCED_HIDDEN
        for i, ch in enumerate(channels, start=1):
            layers += [Conv(f"conv{i}", ch), BatchNorm(f"bn{i}"), Relu()]
            if i % 2 == 0:
                pool_if_fits()
        layers += [
            Flatten(),
            Linear("fc1", hidden),
            BatchNorm("bn_fc"),
            Relu(),
            Linear("head", width),
        ]
        role = "logits"
    else:
        raise ValueError(f"unknown model kind {kind!r}")

    shapes, out_dim, weight_names = _resolve_shapes(layers, input_shape)
    return ModelSpec(
        kind=kind,
        layers=tuple(layers),
        input_shape=tuple(input_shape),
        output_role=role,
        output_dim=out_dim,
        param_shapes=shapes,
        weight_layer_names=tuple(weight_names),
    )


def _resolve_shapes(layers, input_shape):
    c, h, w = input_shape
    flat: Optional[int] = None
    shapes: dict[str, tuple[int, ...]] = {}
    weight_names: list[str] = []
    for layer in layers:
        if isinstance(layer, Conv):
            shapes[f"{layer.name}.weight"] = (layer.out_channels, c, layer.kernel, layer.kernel)
            weight_names.append(layer.name)
            h = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            w = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            c = layer.out_channels
            if h <= 0 or w <= 0:
                raise ValueError(f"conv {layer.name}: output dims not positive")
        elif isinstance(layer, BatchNorm):
            features = c if flat is None else flat
            shapes[f"{layer.name}.scale"] = (features,)
            shapes[f"{layer.name}.shift"] = (features,)
        elif isinstance(layer, MaxPool):
            h //= layer.kernel
            w //= layer.kernel
            if h <= 0 or w <= 0:
                raise ValueError("max pool: output dims not positive")
        elif isinstance(layer, Flatten):
            flat = c * h * w
        elif isinstance(layer, Linear):
            if flat is None:
                raise ValueError(f"linear {layer.name} requires a flatten first")
            shapes[f"{layer.name}.weight"] = (layer.out_features, flat)
            shapes[f"{layer.name}.bias"] = (layer.out_features,)
            weight_names.append(layer.name)
            flat = layer.out_features
    out_dim = flat if flat is not None else c * h * w
    return shapes, out_dim, weight_names


def init_params(spec: ModelSpec, rng: np.random.Generator) -> dict[str, Tensor]:
    """Kaiming-uniform weights, zero biases, identity batch norm."""
    params: dict[str, Tensor] = {}
    for name, shape in spec.param_shapes.items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            bound = float(np.sqrt(6.0 / fan_in))
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif name.endswith(".bias") or name.endswith(".shift"):
            data = np.zeros(shape, dtype=np.float32)
        elif name.endswith(".scale"):
            data = np.ones(shape, dtype=np.float32)
        else:
            raise ValueError(f"unrecognized parameter {name}")
        params[name] = Tensor(data, requires_grad=True)
    return params


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Deep copy; mutations of the clone never touch the original."""
    return {name: Tensor(t.data.copy(), requires_grad=True) for name, t in params.items()}


def param_count(spec: ModelSpec) -> int:
    return sum(int(np.prod(s)) for s in spec.param_shapes.values())


def bn_param_names(spec: ModelSpec) -> frozenset[str]:
    names = set()
    for layer in spec.layers:
        if isinstance(layer, BatchNorm):
            names.add(f"{layer.name}.scale")
            names.add(f"{layer.name}.shift")
    return frozenset(names)


def bn_fraction(spec: ModelSpec) -> float:
    bn = bn_param_names(spec)
    total = param_count(spec)
    bn_total = sum(int(np.prod(spec.param_shapes[n])) for n in bn)
    return bn_total / total


def forward(spec: ModelSpec, params: dict[str, Tensor], x: Tensor) -> Tensor:
    """Plain full-precision forward pass."""
    return forward_quantized(spec, params, x, BitwidthTask(FP, FP), QuantPolicy())


def forward_quantized(
    spec: ModelSpec,
    params: dict[str, Tensor],
    x: Tensor,
    task: BitwidthTask,
    policy: QuantPolicy,
    trace: Optional[dict] = None,
) -> Tensor:
    """Forward pass with fake quantization per the task and policy.

    Weight tensors are quantized right before use unless their layer is
    exempt; activations are quantized right after each relu. At (FP, FP)
    this is the plain forward pass, bit for bit. ``trace``, when given,
    captures the quantized weight and activation arrays by name.
    """
    exempt = spec.exempt_weight_layers(policy)
    t = x
    act_index = 0
    for layer in spec.layers:
        if isinstance(layer, Conv):
            w = params[f"{layer.name}.weight"]
            bits = FP if layer.name in exempt else task.b_w
            wq = quantize_weights(w, bits)
            if trace is not None:
                trace[f"{layer.name}.weight"] = wq.data
            t = ad.conv2d(t, wq, stride=layer.stride, padding=layer.padding)
        elif isinstance(layer, BatchNorm):
            t = ad.batch_norm_transductive(
                t, params[f"{layer.name}.scale"], params[f"{layer.name}.shift"]
            )
        elif isinstance(layer, Relu):
            t = ad.relu(t)
            t = quantize_activations(t, task.b_a)
            if trace is not None:
                trace[f"act{act_index}"] = t.data
                act_index += 1
        elif isinstance(layer, MaxPool):
            t = ad.max_pool2d(t, kernel=layer.kernel)
        elif isinstance(layer, Flatten):
            t = ad.flatten(t)
        elif isinstance(layer, Linear):
            w = params[f"{layer.name}.weight"]
            bits = FP if layer.name in exempt else task.b_w
            wq = quantize_weights(w, bits)
            if trace is not None:
                trace[f"{layer.name}.weight"] = wq.data
            t = ad.matmul(t, _transpose2d(wq))
            t = ad.add(t, params[f"{layer.name}.bias"])
        else:
            raise TypeError(f"unknown layer {layer!r}")
    return t


def _transpose2d(w: Tensor) -> Tensor:
    return Tensor._from_op(w.data.T, (w,), lambda g: (g.T,), "transpose")
