"""Gradient fidelity suite: every differentiable primitive, plus a whole
model, against a float64 central-difference oracle.

Straight-through ops are excluded from numeric comparison by design: their
backward is a defined convention, not the derivative of the forward map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor, grad_check
from .meta import cross_entropy
from .models import build_model, forward, init_params

__all__ = ["CheckOutcome", "primitive_gradient_checks", "model_gradient_check", "STE_OPS"]

# ops whose backward is a defined pass-through, not a numeric derivative
STE_OPS = ("quantize_k", "sign_ste (1-bit weights)")


@dataclass
class CheckOutcome:
    name: str
    report: GradCheckReport


def _cases(rng: np.random.Generator):
    """One scalar-valued function per differentiable primitive. Each mixes
    the op's output with fixed coefficients so every output element gets a
    distinct weight in the loss."""
    c34 = rng.normal(size=(3, 4))
    c43 = rng.normal(size=(4, 3))
    c35 = rng.normal(size=(3, 5))
    c45 = rng.normal(size=(4, 5))
    w1 = rng.normal(size=(2, 1, 3, 3)) * 0.5
    w2 = rng.normal(size=(3, 2, 3, 3)) * 0.5
    cconv = rng.normal(size=(2, 2, 6, 6))
    cpool = rng.normal(size=(2, 2, 3, 3))
    cbn = rng.normal(size=(6, 3, 4, 4))
    scale = rng.normal(size=(3,)) * 0.3 + 1.0
    shift = rng.normal(size=(3,)) * 0.3
    rows = np.abs(rng.normal(size=(3, 3))) + 0.1

    return [
        ("add", (3, 4), lambda x: ad.reduce_sum(ad.mul(ad.add(x, Tensor(c34)), Tensor(c34 + 2.0)))),
        ("sub", (3, 4), lambda x: ad.reduce_sum(ad.mul(ad.sub(x, Tensor(c34)), Tensor(c34 + 2.0)))),
        ("mul", (3, 4), lambda x: ad.reduce_sum(ad.mul(ad.mul(x, Tensor(c34)), x))),
        ("div", (3, 4), lambda x: ad.reduce_sum(ad.mul(ad.div(x, Tensor(np.abs(c34) + 1.0)), Tensor(c34)))),
        ("neg", (3, 4), lambda x: ad.reduce_sum(ad.mul(ad.neg(x), Tensor(c34)))),
        ("abs", (3, 4), lambda x: ad.reduce_sum(ad.mul(ad.absolute(x), Tensor(c34)))),
        ("matmul", (3, 4), lambda x: ad.reduce_sum(ad.mul(ad.matmul(x, Tensor(c45)), Tensor(c35)))),
        (
            "conv2d",
            (2, 1, 6, 6),
            lambda x: ad.reduce_sum(
                ad.mul(ad.conv2d(x, Tensor(w1), stride=1, padding=1), Tensor(cconv))
            ),
        ),
        (
            "conv2d_strided",
            (1, 2, 7, 7),
            lambda x: ad.reduce_sum(ad.conv2d(x, Tensor(w2), stride=2, padding=0)),
        ),
        (
            "max_pool2d",
            (2, 2, 6, 6),
            lambda x: ad.reduce_sum(ad.mul(ad.max_pool2d(x, 2), Tensor(cpool))),
        ),
        (
            "max_pool2d_overlap",
            (1, 1, 5, 5),
            lambda x: ad.reduce_sum(ad.max_pool2d(x, 3, stride=1)),
        ),
        ("relu", (3, 4), lambda x: ad.reduce_sum(ad.mul(ad.relu(x), Tensor(c34)))),
        ("tanh", (3, 4), lambda x: ad.reduce_sum(ad.mul(ad.tanh(x), Tensor(c34)))),
        ("clip", (3, 4), lambda x: ad.reduce_sum(ad.mul(ad.clip(x, -0.5, 0.5), Tensor(c34)))),
        ("sum", (3, 4), lambda x: ad.reduce_sum(ad.mul(x, x))),
        (
            "sum_axis",
            (3, 4),
            lambda x: ad.reduce_sum(
                ad.mul(ad.reduce_sum(x, axis=0, keepdims=True), Tensor(c34[:1]))
            ),
        ),
        ("mean", (3, 4), lambda x: ad.mean(ad.mul(x, x))),
        ("max", (3, 4), lambda x: ad.reduce_max(x) * 2.0),
        (
            "softmax",
            (3, 5),
            lambda x: ad.reduce_sum(ad.mul(ad.softmax(x, axis=1), Tensor(c35))),
        ),
        (
            "log_softmax",
            (3, 5),
            lambda x: ad.reduce_sum(ad.mul(ad.log_softmax(x, axis=1), Tensor(c35))),
        ),
        ("logsumexp", (3, 5), lambda x: ad.reduce_sum(ad.logsumexp(x, axis=1))),
        (
            "batch_norm",
            (6, 3, 4, 4),
            lambda x: ad.reduce_sum(
                ad.mul(
                    ad.batch_norm_transductive(x, Tensor(scale), Tensor(shift)),
                    Tensor(cbn),
                )
            ),
        ),
        (
            "sqdist",
            (3, 5),
            lambda x: ad.reduce_sum(
                ad.mul(ad.squared_euclidean_distance(x, Tensor(c35 * 0.7)), Tensor(rows))
            ),
        ),
        ("reshape", (3, 4), lambda x: ad.reduce_sum(ad.mul(ad.reshape(x, (4, 3)), Tensor(c43)))),
        ("cross_entropy", (4, 5), lambda x: cross_entropy(x, np.array([0, 3, 2, 1]))),
    ]


def primitive_gradient_checks(
    trials: int = 100, seed: int = 0, tol: float = 1e-3
) -> list[CheckOutcome]:
    """Check every primitive at ``trials`` random points and keep the
    worst report per op."""
    coeff_rng = np.random.default_rng(np.random.SeedSequence(seed))
    cases = _cases(coeff_rng)
    outcomes = []
    for index, (name, shape, fn) in enumerate(cases):
        trial_rng = np.random.default_rng(np.random.SeedSequence((seed, index)))
        worst_max = worst_mean = 0.0
        checked = kinked = 0
        for _ in range(trials):
            point = trial_rng.normal(size=shape)
            report = grad_check(fn, point, eps=1e-5, tol=tol)
            checked += report.checked
            kinked += report.kinked
            worst_max = max(worst_max, report.max_rel_error)
            worst_mean = max(worst_mean, report.mean_rel_error)
        outcomes.append(
            CheckOutcome(name, GradCheckReport(worst_max, worst_mean, tol, checked, kinked))
        )
    return outcomes


def model_gradient_check(
    trials: int = 100,
    seed: int = 0,
    tol: float = 1e-3,
    coords_per_trial: int = 12,
    kind: str = "conv5-maml",
) -> GradCheckReport:
    """Loss gradient of a full model on 8x8 synthetic inputs, checked at a
    random subset of parameter coordinates per trial (a full Jacobian
    against finite differences is quadratic in parameter count)."""
    spec = build_model(kind, 5 if kind != "conv4-pn" else 8, (1, 8, 8))
    head = spec.output_dim
    master = np.random.SeedSequence(seed)
    worst_max = worst_mean = 0.0
    total_checked = total_kinked = 0
    for trial_seed in master.spawn(trials):
        rng = np.random.default_rng(trial_seed)
        params = init_params(spec, rng)
        names = sorted(params)
        sizes = np.array([params[n].size for n in names])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        flat = np.concatenate(
            [params[n].data.astype(np.float64).reshape(-1) for n in names]
        )
        x = rng.normal(size=(2, 1, 8, 8)) * 0.5 + 0.5
        y = rng.integers(0, head, size=2)

        def loss_at(theta: Tensor):
            split = {}
            for i, n in enumerate(names):
                piece = _narrow(theta, int(offsets[i]), int(sizes[i]))
                split[n] = ad.reshape(piece, params[n].shape)
            out = forward(spec, split, Tensor(x))
            return cross_entropy(out, y)

        coords = rng.choice(flat.size, size=coords_per_trial, replace=False)
        report = grad_check(loss_at, flat, eps=1e-4, tol=tol, coords=coords)
        total_checked += report.checked
        total_kinked += report.kinked
        worst_max = max(worst_max, report.max_rel_error)
        worst_mean = max(worst_mean, report.mean_rel_error)
    return GradCheckReport(worst_max, worst_mean, tol, total_checked, total_kinked)


def _narrow(t: Tensor, start: int, length: int) -> Tensor:
    """Differentiable 1-D slice."""
    out = t.data[start : start + length]

    def vjp(g):
        z = np.zeros_like(t.data)
        z[start : start + length] = g
        return (z,)

    return Tensor._from_op(out.copy(), (t,), vjp, "narrow")
