"""Meta-training engines for bitwidth-adaptive quantization-aware training.

Three engines share one pattern: per outer update, sample M bitwidth
branches, compute one quantization-aware gradient per branch against a
shared full-precision parameter set, average the branch gradients, and
feed the mean to the outer optimizer.

* ``run_mebqat_epoch``: supervised branches over a common batch, each
  combining cross-entropy with distillation against the current
  full-precision model's soft labels.
* ``run_mebqat_maml_epoch``: per branch, adapt a cloned parameter set on a
  support set with quantized SGD steps, then take the query-loss gradient
  at the adapted parameters as the meta-gradient (first-order rule).
* ``run_mebqat_pn_epoch``: per branch, embed a shared support/query
  episode under the branch bitwidths, build class prototypes, and score
  queries by squared Euclidean distance.

A dedicated-QAT loop (single fixed bitwidth, one backprop per update) is
included as the baseline, plus the three matching meta-test procedures.
Backward passes that produce branch meta-gradients are counted separately
from inner-loop adaptation passes for cost accounting.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .data import Episode, LabeledDataset, batch_iter, sample_episode
from .models import ModelSpec, QuantPolicy, clone_params, forward_quantized
from .optim import Optimizer
from .quantization import FP_TASK, BitwidthTask, BitwidthTaskSet, sample_bitwidth_tasks

__all__ = [
    "MetricRow",
    "MebqatConfig",
    "MamlConfig",
    "PnConfig",
    "cross_entropy",
    "accuracy",
    "kd_loss",
    "zero_grads",
    "run_mebqat_epoch",
    "run_qat_epoch",
    "train_dedicated_qat",
    "inner_adapt",
    "run_mebqat_maml_epoch",
    "compute_prototypes",
    "pn_episode_loss",
    "run_mebqat_pn_epoch",
    "meta_test_mebqat",
    "meta_test_maml",
    "meta_test_pn",
    "meta_backprop_count",
    "reset_meta_backprop_count",
]

_meta_backprops = 0


def meta_backprop_count() -> int:
    """Backward passes that produced a branch meta-gradient (inner-loop
    adaptation passes are excluded; see ``autodiff.backward_pass_count``
    for the raw total)."""
    return _meta_backprops


def reset_meta_backprop_count() -> None:
    global _meta_backprops
    _meta_backprops = 0


def _count_meta_backprop() -> None:
    global _meta_backprops
    _meta_backprops += 1


@dataclass
class MetricRow:
    """One telemetry row: a branch of one logged training step."""

    epoch: int
    branch: int
    b_w: str
    b_a: str
    loss: float
    kd_loss: float
    accuracy: float
    backprops: int
    wall_ms: float = 0.0


@dataclass
class MebqatConfig:
    tasks: BitwidthTaskSet
    branches: int = 4
    batch_size: int = 64
    kd_enabled: bool = True
    fix_first_fp: bool = True

    def __post_init__(self):
        if self.branches < 1:
            raise ValueError("need at least one branch per update")


@dataclass
class MamlConfig:
    tasks: BitwidthTaskSet
    branches: int = 4
    ways: int = 5
    shots: int = 1
    query_shots: int = 5
    inner_steps: int = 5
    inner_lr: float = 0.1
    meta_test_steps: int = 5

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("need at least one adaptation step")
        if self.meta_test_steps < 0:
            raise ValueError("meta-test steps must be >= 0")


@dataclass
class PnConfig:
    tasks: BitwidthTaskSet
    branches: int = 4
    ways: int = 5
    shots: int = 1
    query_shots: int = 15

    def __post_init__(self):
        if self.branches < 1:
            raise ValueError("need at least one branch per update")


# -- losses and small helpers -----------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under the logits."""
    count, classes = logits.shape
    onehot = np.zeros((count, classes), dtype=logits.dtype)
    onehot[np.arange(count), labels] = 1.0
    picked = ad.mul(ad.log_softmax(logits, axis=1), Tensor(onehot))
    return ad.reduce_sum(picked) * (-1.0 / count)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


def kd_loss(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    """Batch-mean KL divergence of the student's class distribution from
    the (detached) teacher's. Zero exactly when the logits agree."""
    teacher = teacher_logits.detach()
    p_teacher = ad.softmax(teacher, axis=1)
    gap = ad.sub(ad.log_softmax(teacher, axis=1), ad.log_softmax(student_logits, axis=1))
    total = ad.reduce_sum(ad.mul(p_teacher, gap))
    return total * (1.0 / student_logits.shape[0])


def zero_grads(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.grad = None


def _mean_grads(params: dict[str, Tensor], branches: int) -> dict[str, np.ndarray]:
    return {
        name: t.grad * (1.0 / branches)
        for name, t in params.items()
        if t.grad is not None
    }


def _draw_task(tasks: BitwidthTaskSet, rng: np.random.Generator) -> BitwidthTask:
    # plain uniform draw over valid pairs (no slot rules; used by the
    # episodic engines, where only the exclusion rule applies)
    pairs = tasks.valid_pairs()
    return pairs[int(rng.integers(len(pairs)))]


# -- engine 1: shared-label bitwidth adaptation ------------------------------------


def run_mebqat_epoch(
    params: dict[str, Tensor],
    spec: ModelSpec,
    policy: QuantPolicy,
    cfg: MebqatConfig,
    ds: LabeledDataset,
    opt: Optimizer,
    data_rng: np.random.Generator,
    task_rng: np.random.Generator,
    epoch: int = 0,
    timed: bool = False,
) -> list[MetricRow]:
    """One pass over the data; one outer update per batch.

    Per batch: compute soft labels once at full precision (detached), then
    for each sampled bitwidth branch take the gradient of cross-entropy
    plus distillation loss. Distillation is identically zero at (FP, FP)
    and is skipped there. Branch gradients are averaged into the outer
    optimizer. Returns one row per branch with epoch-mean statistics.
    """
    branch_stats = [
        {"loss": 0.0, "kd": 0.0, "acc": 0.0, "task": None, "backprops": 0, "ms": 0.0}
        for _ in range(cfg.branches)
    ]
    updates = 0
    for x, y in batch_iter(ds, cfg.batch_size, shuffle=True, rng=data_rng):
        xt = Tensor(x)
        with no_grad():
            teacher = forward_quantized(spec, params, xt, FP_TASK, policy)
        tasks = sample_bitwidth_tasks(
            cfg.tasks, cfg.branches, task_rng, fix_first_fp=cfg.fix_first_fp
        )
        zero_grads(params)
        for j, task in enumerate(tasks):
            started = time.perf_counter() if timed else 0.0
            logits = forward_quantized(spec, params, xt, task, policy)
            supervised = cross_entropy(logits, y)
            if cfg.kd_enabled and not task.is_fp:
                distill = kd_loss(logits, teacher)
                loss = ad.add(supervised, distill)
                kd_value = distill.item()
            else:
                loss = supervised
                kd_value = 0.0
            loss.backward()
            _count_meta_backprop()
            stat = branch_stats[j]
            stat["loss"] += supervised.item()
            stat["kd"] += kd_value
            stat["acc"] += accuracy(logits.data, y)
            stat["task"] = task
            stat["backprops"] += 1
            if timed:
                stat["ms"] += (time.perf_counter() - started) * 1e3
        opt.apply(params, _mean_grads(params, cfg.branches))
        updates += 1

    return _epoch_rows(branch_stats, updates, epoch)


def _epoch_rows(branch_stats, updates, epoch) -> list[MetricRow]:
    rows = []
    for j, stat in enumerate(branch_stats):
        if stat["task"] is None:
            continue
        rows.append(
            MetricRow(
                epoch=epoch,
                branch=j,
                b_w=str(stat["task"].b_w),
                b_a=str(stat["task"].b_a),
                loss=stat["loss"] / updates,
                kd_loss=stat["kd"] / updates,
                accuracy=stat["acc"] / updates,
                backprops=stat["backprops"],
                wall_ms=stat["ms"],
            )
        )
    return rows


# -- baseline: dedicated QAT ---------------------------------------------------------


def run_qat_epoch(
    params: dict[str, Tensor],
    spec: ModelSpec,
    policy: QuantPolicy,
    task: BitwidthTask,
    batch_size: int,
    ds: LabeledDataset,
    opt: Optimizer,
    data_rng: np.random.Generator,
    epoch: int = 0,
    timed: bool = False,
) -> list[MetricRow]:
    """Standard supervised training at one fixed bitwidth setting: a single
    backprop per update. At (FP, FP) this is plain training."""
    loss_sum = acc_sum = 0.0
    updates = 0
    ms = 0.0
    for x, y in batch_iter(ds, batch_size, shuffle=True, rng=data_rng):
        started = time.perf_counter() if timed else 0.0
        logits = forward_quantized(spec, params, Tensor(x), task, policy)
        loss = cross_entropy(logits, y)
        zero_grads(params)
        loss.backward()
        _count_meta_backprop()
        opt.apply(
            params,
            {n: t.grad for n, t in params.items() if t.grad is not None},
        )
        loss_sum += loss.item()
        acc_sum += accuracy(logits.data, y)
        updates += 1
        if timed:
            ms += (time.perf_counter() - started) * 1e3
    return [
        MetricRow(
            epoch=epoch,
            branch=0,
            b_w=str(task.b_w),
            b_a=str(task.b_a),
            loss=loss_sum / updates,
            kd_loss=0.0,
            accuracy=acc_sum / updates,
            backprops=updates,
            wall_ms=ms,
        )
    ]


def train_dedicated_qat(
    params: dict[str, Tensor],
    spec: ModelSpec,
    policy: QuantPolicy,
    task: BitwidthTask,
    batch_size: int,
    epochs: int,
    ds: LabeledDataset,
    opt: Optimizer,
    data_rng: np.random.Generator,
) -> list[MetricRow]:
    """Convenience driver: ``epochs`` passes of dedicated QAT."""
    rows: list[MetricRow] = []
    for epoch in range(epochs):
        rows += run_qat_epoch(
            params, spec, policy, task, batch_size, ds, opt, data_rng, epoch=epoch
        )
    return rows


# -- engine 2: gradient-based few-shot adaptation --------------------------------------


def inner_adapt(
    params: dict[str, Tensor],
    spec: ModelSpec,
    policy: QuantPolicy,
    task: BitwidthTask,
    support_x: np.ndarray,
    support_y: np.ndarray,
    inner_lr: float,
    steps: int,
) -> dict[str, Tensor]:
    """Adapt a clone of the parameters with quantized SGD on the support set.

    Each step quantizes afresh, takes the straight-through gradient, and
    updates the full-precision shadow parameters. The originals are never
    touched. ``steps == 0`` returns an untouched clone.
    """
    adapted = clone_params(params)
    xt = Tensor(support_x)
    for _ in range(steps):
        logits = forward_quantized(spec, adapted, xt, task, policy)
        loss = cross_entropy(logits, support_y)
        zero_grads(adapted)
        loss.backward()
        for t in adapted.values():
            if t.grad is not None:
                t.data -= inner_lr * t.grad
    zero_grads(adapted)
    return adapted


def run_mebqat_maml_epoch(
    params: dict[str, Tensor],
    spec: ModelSpec,
    policy: QuantPolicy,
    cfg: MamlConfig,
    ds: LabeledDataset,
    classes: Sequence[int],
    opt: Optimizer,
    data_rng: np.random.Generator,
    task_rng: np.random.Generator,
    epoch: int = 0,
    timed: bool = False,
) -> list[MetricRow]:
    """One outer update: per branch, sample a bitwidth task and an episode,
    adapt on the support set, and take the query-loss gradient at the
    adapted parameters as that branch's meta-gradient (first-order rule).
    """
    grad_sum: dict[str, np.ndarray] = {}
    rows: list[MetricRow] = []
    for j in range(cfg.branches):
        started = time.perf_counter() if timed else 0.0
        task = _draw_task(cfg.tasks, task_rng)
        episode = sample_episode(
            ds, classes, cfg.ways, cfg.shots, cfg.query_shots, data_rng
        )
        adapted = inner_adapt(
            params,
            spec,
            policy,
            task,
            episode.support_x,
            episode.support_y,
            cfg.inner_lr,
            cfg.inner_steps,
        )
        logits = forward_quantized(spec, adapted, Tensor(episode.query_x), task, policy)
        loss = cross_entropy(logits, episode.query_y)
        loss.backward()
        _count_meta_backprop()
        for name, t in adapted.items():
            if t.grad is None:
                continue
            if name in grad_sum:
                grad_sum[name] = grad_sum[name] + t.grad
            else:
                grad_sum[name] = t.grad
        rows.append(
            MetricRow(
                epoch=epoch,
                branch=j,
                b_w=str(task.b_w),
                b_a=str(task.b_a),
                loss=loss.item(),
                kd_loss=0.0,
                accuracy=accuracy(logits.data, episode.query_y),
                backprops=cfg.inner_steps + 1,
                wall_ms=(time.perf_counter() - started) * 1e3 if timed else 0.0,
            )
        )
    opt.apply(
        params,
        {name: g * (1.0 / cfg.branches) for name, g in grad_sum.items()},
    )
    return rows


# -- engine 3: metric-based few-shot adaptation ------------------------------------------


def compute_prototypes(
    embeddings: Tensor, labels: np.ndarray, ways: int, shots: int
) -> Tensor:
    """Per-class mean of support embeddings, differentiable through the
    embeddings. Every class in [0, ways) must appear exactly ``shots`` times."""
    counts = np.bincount(labels, minlength=ways)
    if len(counts) != ways or not np.all(counts == shots):
        raise ValueError(
            f"support set must hold exactly {shots} samples for each of "
            f"{ways} classes, got counts {counts.tolist()}"
        )
    averaging = np.zeros((ways, embeddings.shape[0]), dtype=embeddings.dtype)
    averaging[labels, np.arange(embeddings.shape[0])] = 1.0 / shots
    return ad.matmul(Tensor(averaging), embeddings)


def pn_episode_loss(
    query_embeddings: Tensor,
    query_labels: np.ndarray,
    prototypes: Tensor,
    ways: int,
    shots: int,
) -> Tensor:
    """Sum over query points of [distance to own prototype plus
    log-sum-exp of negated distances], scaled by 1 / (ways * shots)."""
    dists = ad.squared_euclidean_distance(query_embeddings, prototypes)
    count = query_embeddings.shape[0]
    onehot = np.zeros((count, ways), dtype=dists.dtype)
    onehot[np.arange(count), query_labels] = 1.0
    own = ad.reduce_sum(ad.mul(dists, Tensor(onehot)))
    spread = ad.reduce_sum(ad.logsumexp(ad.neg(dists), axis=1))
    return ad.add(own, spread) * (1.0 / (ways * shots))


def run_mebqat_pn_epoch(
    params: dict[str, Tensor],
    spec: ModelSpec,
    policy: QuantPolicy,
    cfg: PnConfig,
    ds: LabeledDataset,
    classes: Sequence[int],
    opt: Optimizer,
    data_rng: np.random.Generator,
    task_rng: np.random.Generator,
    epoch: int = 0,
    timed: bool = False,
) -> list[MetricRow]:
    """One outer update: a single episode shared by all branches; each
    branch embeds it under its own bitwidths, builds prototypes from the
    support set, and backpropagates the prototype loss on the query set."""
    episode = sample_episode(ds, classes, cfg.ways, cfg.shots, cfg.query_shots, data_rng)
    support = Tensor(episode.support_x)
    query = Tensor(episode.query_x)
    zero_grads(params)
    rows: list[MetricRow] = []
    for j in range(cfg.branches):
        started = time.perf_counter() if timed else 0.0
        task = _draw_task(cfg.tasks, task_rng)
        support_emb = forward_quantized(spec, params, support, task, policy)
        prototypes = compute_prototypes(support_emb, episode.support_y, cfg.ways, cfg.shots)
        query_emb = forward_quantized(spec, params, query, task, policy)
        loss = pn_episode_loss(query_emb, episode.query_y, prototypes, cfg.ways, cfg.shots)
        loss.backward()
        _count_meta_backprop()
        with no_grad():
            dists = ad.squared_euclidean_distance(
                query_emb.detach(), prototypes.detach()
            )
        rows.append(
            MetricRow(
                epoch=epoch,
                branch=j,
                b_w=str(task.b_w),
                b_a=str(task.b_a),
                loss=loss.item(),
                kd_loss=0.0,
                accuracy=float((dists.data.argmin(axis=1) == episode.query_y).mean()),
                backprops=1,
                wall_ms=(time.perf_counter() - started) * 1e3 if timed else 0.0,
            )
        )
    opt.apply(params, _mean_grads(params, cfg.branches))
    return rows


# -- meta-testing -----------------------------------------------------------------------


def meta_test_mebqat(
    params: dict[str, Tensor],
    spec: ModelSpec,
    policy: QuantPolicy,
    task: BitwidthTask,
    ds: LabeledDataset,
    batch_size: int = 256,
) -> float:
    """Quantize, run one pass over the data, report accuracy. No updates."""
    correct = 0
    with no_grad():
        for x, y in batch_iter(ds, batch_size, shuffle=False):
            logits = forward_quantized(spec, params, Tensor(x), task, policy)
            correct += int((logits.data.argmax(axis=1) == y).sum())
    return correct / len(ds)


def meta_test_maml(
    params: dict[str, Tensor],
    spec: ModelSpec,
    policy: QuantPolicy,
    task: BitwidthTask,
    episode: Episode,
    steps: int,
    inner_lr: float,
) -> float:
    """Fine-tune a clone on the support set, then report quantized accuracy
    on the query set. ``steps == 0`` skips adaptation entirely."""
    adapted = inner_adapt(
        params, spec, policy, task, episode.support_x, episode.support_y, inner_lr, steps
    )
    with no_grad():
        logits = forward_quantized(spec, adapted, Tensor(episode.query_x), task, policy)
    return accuracy(logits.data, episode.query_y)


def meta_test_pn(
    params: dict[str, Tensor],
    spec: ModelSpec,
    policy: QuantPolicy,
    task: BitwidthTask,
    episode: Episode,
) -> float:
    """Nearest-prototype classification of the query set; no updates.
    Distance ties resolve to the lowest class index."""
    ways = len(episode.class_ids)
    shots = len(episode.support_y) // ways
    with no_grad():
        support_emb = forward_quantized(spec, params, Tensor(episode.support_x), task, policy)
        prototypes = compute_prototypes(support_emb, episode.support_y, ways, shots)
        query_emb = forward_quantized(spec, params, Tensor(episode.query_x), task, policy)
        dists = ad.squared_euclidean_distance(query_emb, prototypes)
    predictions = dists.data.argmin(axis=1)  # first minimum = lowest class index
    return float((predictions == episode.query_y).mean())
