"""Outer- and inner-loop optimizers and learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tensor

__all__ = ["Optimizer", "make_optimizer", "Schedule", "rate_at"]

_KINDS = ("sgd", "adam", "adamw")


class Optimizer:
    """SGD / Adam / AdamW over a named parameter map.

    ``lr`` may be reassigned between steps (schedules do exactly that).
    One ``apply`` call advances the step counter by one.
    """

    def __init__(
        self,
        kind: str,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if kind not in _KINDS:
            raise ValueError(f"unknown optimizer kind {kind!r}, expected one of {_KINDS}")
        self.kind = kind
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def apply(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        """Update parameters in place from a gradient map (a subset of the
        parameter names is allowed)."""
        for name in grads:
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if grads[name].shape != params[name].shape:
                raise ValueError(
                    f"gradient shape {grads[name].shape} does not match "
                    f"parameter {name!r} of shape {params[name].shape}"
                )
        self.step_count += 1
        if self.kind == "sgd":
            for name, g in grads.items():
                params[name].data -= self.lr * g
            return

        t = self.step_count
        bias1 = 1.0 - self.beta1**t
        bias2 = 1.0 - self.beta2**t
        for name, g in grads.items():
            p = params[name]
            if name not in self._m:
                self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            step = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.kind == "adamw" and self.weight_decay:
                step = step + self.weight_decay * p.data
            p.data -= self.lr * step


def make_optimizer(kind: str, lr: float, weight_decay: float = 0.0) -> Optimizer:
    return Optimizer(kind, lr, weight_decay=weight_decay)


@dataclass(frozen=True)
class Schedule:
    """constant, step decay at milestones, or cosine annealing (no restart)."""

    kind: str = "constant"
    base: float = 1e-3
    milestones: tuple[int, ...] = ()
    factor: float = 0.1
    t_max: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "step", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "step":
            if list(self.milestones) != sorted(set(self.milestones)):
                raise ValueError("milestones must be strictly increasing")
            if not 0.0 < self.factor < 1.0:
                raise ValueError("decay factor must lie in (0, 1)")
        if self.kind == "cosine" and self.t_max < 1:
            raise ValueError("cosine schedule needs t_max >= 1")


def rate_at(schedule: Schedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if schedule.kind == "constant":
        return schedule.base
    if schedule.kind == "step":
        hits = sum(1 for m in schedule.milestones if m <= epoch)
        return schedule.base * schedule.factor**hits
    return schedule.base * (1.0 + np.cos(np.pi * epoch / schedule.t_max)) / 2.0
