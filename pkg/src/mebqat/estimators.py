"""Scikit-learn style estimators wrapping the training engines.

``BitwidthAdaptiveClassifier`` covers the shared-label scenario: fit once,
then predict or score under any bitwidth setting. The two few-shot
estimators meta-train on a class-partitioned pool via ``fit`` and then
specialize to a new task with ``adapt(X_support, y_support)`` before
``predict``. All three expose ``get_params`` / ``set_params`` and clone
cleanly.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .data import LabeledDataset, sample_episode, split_classes
from .meta import (
    MamlConfig,
    MebqatConfig,
    PnConfig,
    compute_prototypes,
    inner_adapt,
    run_mebqat_epoch,
    run_mebqat_maml_epoch,
    run_mebqat_pn_epoch,
)
from .models import QuantPolicy, build_model, forward_quantized, init_params
from .optim import make_optimizer
from .quantization import BitwidthTask, BitwidthTaskSet

__all__ = [
    "BitwidthAdaptiveClassifier",
    "MamlFewShotClassifier",
    "PrototypeFewShotClassifier",
]


def _check_images(X) -> np.ndarray:
    """Validate a (n, C, H, W) or (n, H, W) image array in [0, 1]."""
    X = check_array(X, allow_nd=True, dtype=np.float32)
    if X.ndim == 3:
        X = X[:, None, :, :]
    if X.ndim != 4:
        raise ValueError(f"expected image array of rank 3 or 4, got rank {X.ndim}")
    return X


class _EngineMixin:
    """Shared plumbing: dataset assembly, seeding, task-set construction."""

    def _dataset(self, X, y) -> tuple[LabeledDataset, np.ndarray]:
        X = _check_images(X)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(X):
            raise ValueError("y must be one label per image")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        return LabeledDataset(X, encoded.astype(np.int64)), encoded

    def _task_set(self) -> BitwidthTaskSet:
        return BitwidthTaskSet.of(
            self.weight_bits, self.activation_bits, self.minor_weight_bits
        )

    def _streams(self):
        return np.random.SeedSequence(self.random_state).spawn(4)

    def _eval_task(self) -> BitwidthTask:
        return BitwidthTask.of(self.eval_bits)


class BitwidthAdaptiveClassifier(_EngineMixin, ClassifierMixin, BaseEstimator):
    """Image classifier trained to tolerate any bitwidth in its task set.

    After ``fit``, ``predict`` quantizes the single parameter set to
    ``eval_bits`` and classifies; no per-bitwidth retraining or storage.
    """

    def __init__(
        self,
        model_kind: str = "conv8-reduced",
        weight_bits: Sequence = (1, 2, 4, 8, "FP"),
        activation_bits: Optional[Sequence] = None,
        minor_weight_bits: Sequence = (1,),
        branches: int = 4,
        epochs: int = 10,
        batch_size: int = 64,
        optimizer: str = "adam",
        lr: float = 1e-3,
        kd: bool = True,
        fix_first_fp: bool = True,
        eval_bits: str = "FP,FP",
        random_state: int = 0,
    ):
        self.model_kind = model_kind
        self.weight_bits = weight_bits
        self.activation_bits = activation_bits
        self.minor_weight_bits = minor_weight_bits
        self.branches = branches
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr = lr
        self.kd = kd
        self.fix_first_fp = fix_first_fp
        self.eval_bits = eval_bits
        self.random_state = random_state

    def fit(self, X, y):
        ds, _ = self._dataset(X, y)
        init_ss, data_ss, task_ss, _ = self._streams()
        self.spec_ = build_model(
            self.model_kind, len(self.classes_), ds.images.shape[1:]
        )
        self.policy_ = QuantPolicy()
        self.params_ = init_params(self.spec_, np.random.default_rng(init_ss))
        cfg = MebqatConfig(
            tasks=self._task_set(),
            branches=self.branches,
            batch_size=self.batch_size,
            kd_enabled=self.kd,
            fix_first_fp=self.fix_first_fp,
        )
        opt = make_optimizer(self.optimizer, self.lr)
        data_rng = np.random.default_rng(data_ss)
        task_rng = np.random.default_rng(task_ss)
        self.history_ = []
        for epoch in range(self.epochs):
            self.history_ += run_mebqat_epoch(
                self.params_, self.spec_, self.policy_, cfg, ds, opt,
                data_rng, task_rng, epoch=epoch,
            )
        return self

    def decision_function(self, X, bits: Optional[str] = None) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = _check_images(X)
        task = BitwidthTask.of(bits) if bits is not None else self._eval_task()
        with no_grad():
            logits = forward_quantized(
                self.spec_, self.params_, Tensor(X), task, self.policy_
            )
        return logits.data

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return ad.softmax(Tensor(logits), axis=1).data

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def score_at(self, X, y, bits: str) -> float:
        """Accuracy under an explicit bitwidth setting, e.g. ``"2,2"``."""
        predictions = self.classes_[self.decision_function(X, bits).argmax(axis=1)]
        return float((predictions == np.asarray(y)).mean())


class _FewShotBase(_EngineMixin, BaseEstimator):
    """Meta-train on a class-partitioned pool; adapt to new tasks later."""

    def _fit_setup(self, X, y):
        ds, _ = self._dataset(X, y)
        if len(ds.classes) < self.ways:
            raise ValueError(
                f"need at least {self.ways} classes to form episodes, "
                f"got {len(ds.classes)}"
            )
        return ds

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "task_classes_")
        return self.task_classes_[self._predict_indices(_check_images(X))]

    def score(self, X, y) -> float:
        predictions = self.predict(X)
        return float((predictions == np.asarray(y)).mean())


class MamlFewShotClassifier(_FewShotBase):
    """Gradient-based few-shot learner, quantization-aware end to end.

    ``fit`` meta-trains over episodes drawn from (X, y); ``adapt`` runs a
    few quantized SGD steps on a support set at ``eval_bits``.
    """

    def __init__(
        self,
        weight_bits: Sequence = (2, 4, 8, "FP"),
        activation_bits: Optional[Sequence] = None,
        minor_weight_bits: Sequence = (),
        ways: int = 5,
        shots: int = 1,
        query_shots: int = 5,
        branches: int = 4,
        outer_updates: int = 200,
        inner_steps: int = 5,
        inner_lr: float = 0.1,
        adapt_steps: int = 5,
        optimizer: str = "adam",
        lr: float = 1e-4,
        eval_bits: str = "FP,FP",
        random_state: int = 0,
    ):
        self.weight_bits = weight_bits
        self.activation_bits = activation_bits
        self.minor_weight_bits = minor_weight_bits
        self.ways = ways
        self.shots = shots
        self.query_shots = query_shots
        self.branches = branches
        self.outer_updates = outer_updates
        self.inner_steps = inner_steps
        self.inner_lr = inner_lr
        self.adapt_steps = adapt_steps
        self.optimizer = optimizer
        self.lr = lr
        self.eval_bits = eval_bits
        self.random_state = random_state

    def fit(self, X, y):
        ds = self._fit_setup(X, y)
        init_ss, data_ss, task_ss, _ = self._streams()
        self.spec_ = build_model("conv5-maml", self.ways, ds.images.shape[1:])
        self.policy_ = QuantPolicy()
        self.params_ = init_params(self.spec_, np.random.default_rng(init_ss))
        cfg = MamlConfig(
            tasks=self._task_set(),
            branches=self.branches,
            ways=self.ways,
            shots=self.shots,
            query_shots=self.query_shots,
            inner_steps=self.inner_steps,
            inner_lr=self.inner_lr,
            meta_test_steps=self.adapt_steps,
        )
        opt = make_optimizer(self.optimizer, self.lr)
        data_rng = np.random.default_rng(data_ss)
        task_rng = np.random.default_rng(task_ss)
        self.history_ = []
        for update in range(self.outer_updates):
            self.history_ += run_mebqat_maml_epoch(
                self.params_, self.spec_, self.policy_, cfg, ds, ds.classes,
                opt, data_rng, task_rng, epoch=update,
            )
        return self

    def adapt(self, X_support, y_support):
        """Fine-tune a clone on a small support set at ``eval_bits``."""
        check_is_fitted(self, "params_")
        X_support = _check_images(X_support)
        self.task_classes_, encoded = np.unique(y_support, return_inverse=True)
        if len(self.task_classes_) != self.ways:
            raise ValueError(
                f"support set must cover exactly {self.ways} classes, "
                f"got {len(self.task_classes_)}"
            )
        self.adapted_ = inner_adapt(
            self.params_, self.spec_, self.policy_, self._eval_task(),
            X_support, encoded.astype(np.int64), self.inner_lr, self.adapt_steps,
        )
        return self

    def _predict_indices(self, X) -> np.ndarray:
        check_is_fitted(self, "adapted_")
        with no_grad():
            logits = forward_quantized(
                self.spec_, self.adapted_, Tensor(X), self._eval_task(), self.policy_
            )
        return logits.data.argmax(axis=1)


class PrototypeFewShotClassifier(_FewShotBase):
    """Metric-based few-shot learner; adaptation is prototype computation,
    no gradient steps at test time."""

    def __init__(
        self,
        weight_bits: Sequence = (2, 4, 8, "FP"),
        activation_bits: Optional[Sequence] = None,
        minor_weight_bits: Sequence = (),
        ways: int = 5,
        shots: int = 1,
        query_shots: int = 15,
        branches: int = 4,
        outer_updates: int = 200,
        embed_channels: int = 64,
        optimizer: str = "adam",
        lr: float = 1e-3,
        eval_bits: str = "FP,FP",
        random_state: int = 0,
    ):
        self.weight_bits = weight_bits
        self.activation_bits = activation_bits
        self.minor_weight_bits = minor_weight_bits
        self.ways = ways
        self.shots = shots
        self.query_shots = query_shots
        self.branches = branches
        self.outer_updates = outer_updates
        self.embed_channels = embed_channels
        self.optimizer = optimizer
        self.lr = lr
        self.eval_bits = eval_bits
        self.random_state = random_state

    def fit(self, X, y):
        ds = self._fit_setup(X, y)
        init_ss, data_ss, task_ss, _ = self._streams()
        self.spec_ = build_model("conv4-pn", self.embed_channels, ds.images.shape[1:])
        self.policy_ = QuantPolicy()
        self.params_ = init_params(self.spec_, np.random.default_rng(init_ss))
        cfg = PnConfig(
            tasks=self._task_set(),
            branches=self.branches,
            ways=self.ways,
            shots=self.shots,
            query_shots=self.query_shots,
        )
        opt = make_optimizer(self.optimizer, self.lr)
        data_rng = np.random.default_rng(data_ss)
        task_rng = np.random.default_rng(task_ss)
        self.history_ = []
        for update in range(self.outer_updates):
            self.history_ += run_mebqat_pn_epoch(
                self.params_, self.spec_, self.policy_, cfg, ds, ds.classes,
                opt, data_rng, task_rng, epoch=update,
            )
        return self

    def adapt(self, X_support, y_support):
        """Compute class prototypes from a support set at ``eval_bits``."""
        check_is_fitted(self, "params_")
        X_support = _check_images(X_support)
        self.task_classes_, encoded = np.unique(y_support, return_inverse=True)
        counts = np.bincount(encoded)
        if not np.all(counts == counts[0]):
            raise ValueError("support set must be class-balanced")
        with no_grad():
            embeddings = forward_quantized(
                self.spec_, self.params_, Tensor(X_support),
                self._eval_task(), self.policy_,
            )
            self.prototypes_ = compute_prototypes(
                embeddings, encoded.astype(np.int64),
                len(self.task_classes_), int(counts[0]),
            ).data
        return self

    def _predict_indices(self, X) -> np.ndarray:
        check_is_fitted(self, "prototypes_")
        with no_grad():
            embeddings = forward_quantized(
                self.spec_, self.params_, Tensor(X), self._eval_task(), self.policy_
            )
            dists = ad.squared_euclidean_distance(
                embeddings, Tensor(self.prototypes_)
            )
        return dists.data.argmin(axis=1)
