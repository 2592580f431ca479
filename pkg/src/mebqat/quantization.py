"""Fake quantization with straight-through gradients, and the bitwidth
task space the training engines sample from.

Weights and activations follow the DoReFa-Net recipes: a uniform k-bit
grid on [0, 1] for activations, a tanh-normalized grid on [-1, 1] for
weights with k >= 2, and sign times mean magnitude for 1-bit weights.
Rounding breaks ties away from zero; sign(0) is +1. Quantized values stay
float32 on-grid (no integer kernels).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, absolute, clip, div, mean, mul, reduce_max, tanh

__all__ = [
    "Bitwidth",
    "BitwidthTask",
    "BitwidthTaskSet",
    "FP",
    "quantize_k",
    "quantize_weights",
    "quantize_activations",
    "sample_bitwidth_tasks",
]


@dataclass(frozen=True)
class Bitwidth:
    """Integer precision in [1, 16], or the full-precision sentinel."""

    bits: Optional[int]  # None means full precision

    def __post_init__(self):
        if self.bits is not None and not 1 <= self.bits <= 16:
            raise ValueError(f"bitwidth must be in [1, 16] or FP, got {self.bits}")

    @property
    def is_fp(self) -> bool:
        return self.bits is None

    @classmethod
    def fp(cls) -> "Bitwidth":
        return cls(None)

    @classmethod
    def of(cls, value) -> "Bitwidth":
        """Accept Bitwidth, int, or the strings 'FP' / 'fp' / digits."""
        if isinstance(value, Bitwidth):
            return value
        if isinstance(value, str):
            if value.strip().upper() == "FP":
                return cls(None)
            return cls(int(value))
        return cls(int(value))

    def __str__(self) -> str:
        return "FP" if self.bits is None else str(self.bits)


FP = Bitwidth.fp()

# settings the sampler never returns: full-precision paired with 1-bit
_EXCLUDED = ((None, 1), (1, None))


@dataclass(frozen=True)
class BitwidthTask:
    """One (weight bitwidth, activation bitwidth) training or test setting."""

    b_w: Bitwidth
    b_a: Bitwidth

    @classmethod
    def of(cls, b_w, b_a=None) -> "BitwidthTask":
        if b_a is None:
            if isinstance(b_w, BitwidthTask):
                return b_w
            if isinstance(b_w, str):
                parts = b_w.replace("(", "").replace(")", "").split(",")
                if len(parts) != 2:
                    raise ValueError(f"cannot parse bitwidth task from {b_w!r}")
                b_w, b_a = parts
            else:
                b_w, b_a = b_w
        return cls(Bitwidth.of(b_w), Bitwidth.of(b_a))

    @property
    def is_fp(self) -> bool:
        return self.b_w.is_fp and self.b_a.is_fp

    def is_excluded(self) -> bool:
        return (self.b_w.bits, self.b_a.bits) in _EXCLUDED

    def __str__(self) -> str:
        return f"({self.b_w},{self.b_a})"


FP_TASK = BitwidthTask(FP, FP)


@dataclass(frozen=True)
class BitwidthTaskSet:
    """Candidate bitwidths for sampling, with optional oversampled minors
    and an optional explicit pair list that bypasses the cross product."""

    weight_candidates: tuple[Bitwidth, ...]
    activation_candidates: tuple[Bitwidth, ...]
    minor_weight_bits: tuple[Bitwidth, ...] = ()
    explicit_pairs: tuple[BitwidthTask, ...] = ()

    @classmethod
    def of(
        cls,
        weight_candidates: Sequence,
        activation_candidates: Optional[Sequence] = None,
        minor_weight_bits: Sequence = (),
        explicit_pairs: Sequence = (),
    ) -> "BitwidthTaskSet":
        weights = tuple(Bitwidth.of(b) for b in weight_candidates)
        if activation_candidates is None:
            acts = weights
        else:
            acts = tuple(Bitwidth.of(b) for b in activation_candidates)
        minors = tuple(Bitwidth.of(b) for b in minor_weight_bits)
        pairs = tuple(BitwidthTask.of(p) for p in explicit_pairs)
        return cls(weights, acts, minors, pairs)

    def __post_init__(self):
        if not self.explicit_pairs and (
            not self.weight_candidates or not self.activation_candidates
        ):
            raise ValueError("bitwidth task set must not be empty")
        for b in self.minor_weight_bits:
            if b not in self.weight_candidates:
                raise ValueError(f"minor bitwidth {b} not among weight candidates")

    def valid_pairs(self) -> list[BitwidthTask]:
        """All sampleable tasks, in deterministic order, exclusions removed."""
        if self.explicit_pairs:
            pairs = list(self.explicit_pairs)
        else:
            pairs = [
                BitwidthTask(w, a)
                for w in self.weight_candidates
                for a in self.activation_candidates
            ]
        return [p for p in pairs if not p.is_excluded()]

    def contains_fp(self) -> bool:
        return FP_TASK in self.valid_pairs()


def sample_bitwidth_tasks(
    ts: BitwidthTaskSet,
    count: int,
    rng: np.random.Generator,
    fix_first_fp: bool = False,
) -> list[BitwidthTask]:
    """Draw ``count`` bitwidth tasks.

    Slot 0 is pinned to (FP, FP) when ``fix_first_fp`` is set. When the set
    declares minor weight bitwidths and count >= 3, slot 1 gets a minor
    weight bitwidth paired with a uniformly drawn compatible activation
    bitwidth. Remaining slots are uniform over the valid pairs. No drawn
    task is ever (FP, 1) or (1, FP).
    """
    if count < 1:
        raise ValueError(f"need at least 1 task, got {count}")
    pairs = ts.valid_pairs()
    if not pairs:
        raise ValueError("bitwidth task set has no valid pairs")

    tasks: list[BitwidthTask] = []
    if fix_first_fp:
        if not ts.contains_fp():
            raise ValueError("fix_first_fp requires (FP, FP) among the candidates")
        tasks.append(FP_TASK)

    if ts.minor_weight_bits and count >= 3 and len(tasks) < count:
        minor = ts.minor_weight_bits[int(rng.integers(len(ts.minor_weight_bits)))]
        compatible = [
            a
            for a in ts.activation_candidates
            if not BitwidthTask(minor, a).is_excluded()
        ]
        if not compatible:
            raise ValueError(f"no valid activation bitwidth for minor {minor}")
        act = compatible[int(rng.integers(len(compatible)))]
        tasks.append(BitwidthTask(minor, act))

    while len(tasks) < count:
        tasks.append(pairs[int(rng.integers(len(pairs)))])
    return tasks


# -- straight-through quantizers ------------------------------------------------


def _grid_round(x: np.ndarray, levels: float) -> np.ndarray:
    # round half away from zero (values here are >= 0, so floor(t + 0.5))
    scaled = x * levels
    return np.floor(scaled + 0.5) / levels


def quantize_k(x: Tensor, k: int) -> Tensor:
    """Snap values in [0, 1] onto the uniform k-bit grid i/(2^k - 1).

    The backward pass is the straight-through identity.
    """
    if k < 1:
        raise ValueError(f"quantize_k needs k >= 1, got {k}")
    levels = float(2**k - 1)
    out = _grid_round(x.data, levels).astype(x.dtype)
    return Tensor._from_op(out, (x,), lambda g: (g,), "quantize_k")


def _sign_ste(x: Tensor) -> Tensor:
    # sign with sign(0) = +1; straight-through backward
    out = np.where(x.data >= 0, x.dtype.type(1), x.dtype.type(-1))
    return Tensor._from_op(out, (x,), lambda g: (g,), "sign_ste")


def quantize_weights(w: Tensor, b: Bitwidth) -> Tensor:
    """DoReFa weight quantizer.

    FP returns the input unchanged. 1-bit returns sign(w) scaled by the
    mean absolute value. k >= 2 maps tanh(w) onto a symmetric k-bit grid
    in [-1, 1]. Gradients flow analytically through tanh, the max
    normalization, and the mean scale; rounding and sign are
    straight-through.
    """
    if b.is_fp:
        return w
    if b.bits == 1:
        return mul(_sign_ste(w), mean(absolute(w)))
    t = tanh(w)
    peak = reduce_max(absolute(t))
    if peak.item() == 0.0:
        # all-zero input: guard 0/0 so the normalized value sits at 1/2
        denom = Tensor(np.asarray(2.0, dtype=w.dtype))
    else:
        denom = mul(peak, Tensor(np.asarray(2.0, dtype=w.dtype)))
    unit = div(t, denom) + 0.5
    return quantize_k(unit, b.bits) * 2.0 - 1.0


def quantize_activations(a: Tensor, b: Bitwidth) -> Tensor:
    """DoReFa activation quantizer: clip to [0, 1], snap to the k-bit grid.

    FP returns the input unchanged. Gradient is straight-through inside
    the clip range and zero outside it.
    """
    if b.is_fp:
        return a
    return quantize_k(clip(a, 0.0, 1.0), b.bits)
