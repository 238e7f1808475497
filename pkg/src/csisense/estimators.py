"""Scikit-learn style estimators wrapping the full pipeline.

`IdentitySlotClassifier` predicts a 10-way label (activity or empty) for
each of the 6 user slots; `ActivityCountRegressor` predicts the 9-element
activity-count vector.  Both share the transform chain, backbone and
training schedule, differing only in head and loss, so the two problem
formulations can be compared under identical settings.

Estimators follow sklearn conventions: hyperparameters are constructor
arguments stored verbatim (get_params/set_params/clone work), fitted state
lives in trailing-underscore attributes.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .data import CsiSample
from .labels import (
    NUM_ACTIVITIES,
    NUM_USER_SLOTS,
    SlotLabels,
    count_matrix,
    round_counts,
    slot_code_matrix,
)
from .models import SensingModel
from .training import TrainConfig, fingerprint_of, fit_model, load_checkpoint
from .transform import CsiImageTransformer


def _amplitudes_of(X) -> list:
    return [x.amplitude if isinstance(x, CsiSample) else np.asarray(x) for x in X]


def _annotations_of(X) -> list[SlotLabels]:
    labs = []
    for x in X:
        if not isinstance(x, CsiSample):
            raise ValueError(
                "targets were not given and inputs are bare arrays; "
                "pass CsiSample objects or explicit targets"
            )
        labs.append(x.annotation)
    return labs


class _SensingEstimator(BaseEstimator):
    """Shared machinery; subclasses pin the task."""

    _task: str = ""

    def __init__(
        self,
        backbone: str = "convnext_tiny",
        pretrained: bool = True,
        channel_strategy: str = "projection",
        target_length: int = 3000,
        resolution: int = 270,
        interpolation: str = "bicubic",
        warp_probability: float = 0.5,
        warp_scale_range: tuple[float, float] = (0.95, 1.05),
        warp_enabled: bool = True,
        standardize: bool = True,
        epochs: int = 50,
        batch_size: int = 16,
        weight_decay: float = 1e-2,
        clip_max_norm: float = 1.0,
        lr_projection_peak: float = 1e-3,
        lr_backbone_head_peak: float = 1e-4,
        warmup_fraction: float = 0.10,
        schedule_by_epoch: bool = False,
        recalibrate_bn: bool = True,
        focal_gamma: float = 2.0,
        seed: int = 0,
    ):
        self.backbone = backbone
        self.pretrained = pretrained
        self.channel_strategy = channel_strategy
        self.target_length = target_length
        self.resolution = resolution
        self.interpolation = interpolation
        self.warp_probability = warp_probability
        self.warp_scale_range = warp_scale_range
        self.warp_enabled = warp_enabled
        self.standardize = standardize
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.clip_max_norm = clip_max_norm
        self.lr_projection_peak = lr_projection_peak
        self.lr_backbone_head_peak = lr_backbone_head_peak
        self.warmup_fraction = warmup_fraction
        self.schedule_by_epoch = schedule_by_epoch
        self.recalibrate_bn = recalibrate_bn
        self.focal_gamma = focal_gamma
        self.seed = seed

    # -- construction helpers ------------------------------------------------

    def _make_transformer(self) -> CsiImageTransformer:
        return CsiImageTransformer(
            target_length=self.target_length,
            resolution=self.resolution,
            interpolation=self.interpolation,
            warp_probability=self.warp_probability,
            warp_scale_range=tuple(self.warp_scale_range),
            warp_enabled=self.warp_enabled,
            standardize=self.standardize,
        )

    def _make_train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            weight_decay=self.weight_decay,
            clip_max_norm=self.clip_max_norm,
            lr_projection_peak=self.lr_projection_peak,
            lr_backbone_head_peak=self.lr_backbone_head_peak,
            warmup_fraction=self.warmup_fraction,
            seed=self.seed,
            schedule_by_epoch=self.schedule_by_epoch,
            recalibrate_bn=self.recalibrate_bn,
            focal_gamma=self.focal_gamma,
        )

    def _make_model(self) -> SensingModel:
        return SensingModel(
            task=self._task,
            backbone=self.backbone,
            pretrained=self.pretrained,
            channel_strategy=self.channel_strategy,
            init_seed=self.seed,
        )

    def fingerprint(self) -> str:
        params = {k: list(v) if isinstance(v, tuple) else v for k, v in self.get_params().items()}
        return fingerprint_of({"task": self._task, "params": params})

    def _targets(self, X, y) -> np.ndarray:
        raise NotImplementedError

    # -- sklearn surface -----------------------------------------------------

    def fit(self, X, y=None, eval_set=None, checkpoint_dir=None):
        """Train on a sequence of CsiSamples (or amplitude arrays + explicit y).

        eval_set: optional (X_eval, y_eval) pair scored after each epoch; it
        drives best-checkpoint selection and the training log's metric column.
        """
        targets = self._targets(X, y)
        self.transformer_ = self._make_transformer()
        self.model_ = self._make_model()
        self.fingerprint_ = self.fingerprint()
        eval_data = None
        if eval_set is not None:
            X_eval, y_eval = eval_set
            eval_data = (_amplitudes_of(X_eval), self._targets(X_eval, y_eval))
        self.training_log_ = fit_model(
            self.model_,
            _amplitudes_of(X),
            targets,
            self.transformer_,
            self._make_train_config(),
            eval_data=eval_data,
            checkpoint_dir=checkpoint_dir,
            fingerprint=self.fingerprint_,
            checkpoint_extra={
                "estimator_class": type(self).__name__,
                "estimator_params": {
                    k: list(v) if isinstance(v, tuple) else v
                    for k, v in self.get_params().items()
                },
            },
        )
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise RuntimeError(f"{type(self).__name__} is not fitted")

    def _forward(self, X, batch_size: int = 32) -> torch.Tensor:
        self._check_fitted()
        self.model_.eval()
        amplitudes = _amplitudes_of(X)
        outputs = []
        with torch.no_grad():
            for start in range(0, len(amplitudes), batch_size):
                images = self.transformer_.transform(amplitudes[start : start + batch_size])
                outputs.append(self.model_(torch.from_numpy(images)[:, None]))
        return torch.cat(outputs)

    def extract_features(self, X, batch_size: int = 32) -> np.ndarray:
        """Pooled backbone features, shape (n, d)."""
        self._check_fitted()
        self.model_.eval()
        amplitudes = _amplitudes_of(X)
        feats = []
        with torch.no_grad():
            for start in range(0, len(amplitudes), batch_size):
                images = self.transformer_.transform(amplitudes[start : start + batch_size])
                feats.append(self.model_.features(torch.from_numpy(images)[:, None]))
        return torch.cat(feats).numpy()

    def save(self, path) -> None:
        """Persist the fitted model as a loadable checkpoint."""
        from .training import save_checkpoint

        self._check_fitted()
        save_checkpoint(
            path,
            self.model_,
            None,
            step=self.training_log_.total_steps if hasattr(self, "training_log_") else 0,
            fingerprint=self.fingerprint_,
            extra={
                "estimator_class": type(self).__name__,
                "estimator_params": {
                    k: list(v) if isinstance(v, tuple) else v
                    for k, v in self.get_params().items()
                },
            },
        )

    @classmethod
    def load(cls, path) -> "_SensingEstimator":
        """Rebuild a fitted estimator from a checkpoint written by save/fit."""
        payload = torch.load(path, map_location="cpu", weights_only=False)
        extra = payload.get("extra") or {}
        params = extra.get("estimator_params")
        if params is None:
            raise RuntimeError(f"checkpoint {path} does not embed estimator parameters")
        params = {k: tuple(v) if isinstance(v, list) else v for k, v in params.items()}
        est = cls(**params)
        if payload["task"] != est._task:
            raise RuntimeError(
                f"checkpoint task {payload['task']!r} does not match {cls.__name__}"
            )
        est.transformer_ = est._make_transformer()
        est.model_ = est._make_model()
        est.fingerprint_ = payload["fingerprint"]
        load_checkpoint(path, est.model_)
        est.model_.eval()
        return est


class IdentitySlotClassifier(_SensingEstimator):
    """Per-user-slot activity classifier (focal loss over 6 x 10 logits)."""

    _task = "identity"

    def _targets(self, X, y) -> np.ndarray:
        if y is None:
            y = _annotations_of(X)
        if len(y) and isinstance(y[0], SlotLabels):
            return slot_code_matrix(y)
        arr = np.asarray(y, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[1] != NUM_USER_SLOTS:
            raise ValueError(f"expected (n, {NUM_USER_SLOTS}) slot codes, got {arr.shape}")
        return arr

    def predict(self, X) -> np.ndarray:
        """Slot class codes, shape (n, 6); 0 marks an empty slot."""
        return self._forward(X).argmax(dim=-1).numpy()

    def predict_proba(self, X) -> np.ndarray:
        """Per-slot class probabilities, shape (n, 6, 10)."""
        return torch.softmax(self._forward(X), dim=-1).numpy()

    def predict_labels(self, X) -> list[SlotLabels]:
        return [SlotLabels.from_codes(row) for row in self.predict(X)]

    def score(self, X, y=None) -> float:
        """Pooled macro-F1 over the 10 slot classes."""
        from .metrics import macro_f1_from_codes

        return macro_f1_from_codes(self.predict(X), self._targets(X, y))


class ActivityCountRegressor(_SensingEstimator):
    """Identity-agnostic activity counting head (ReLU outputs, MSE loss)."""

    _task = "counting"

    def _targets(self, X, y) -> np.ndarray:
        if y is None:
            y = _annotations_of(X)
        if len(y) and isinstance(y[0], SlotLabels):
            return count_matrix(y).astype(np.float64)
        arr = np.asarray(y, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != NUM_ACTIVITIES:
            raise ValueError(f"expected (n, {NUM_ACTIVITIES}) counts, got {arr.shape}")
        return arr

    def predict(self, X) -> np.ndarray:
        """Continuous non-negative count predictions, shape (n, 9)."""
        return self._forward(X).numpy()

    def predict_rounded(self, X) -> np.ndarray:
        """Discrete counts: predictions rounded half away from zero."""
        return round_counts(self.predict(X))

    def score(self, X, y=None) -> float:
        """Negative MAE (sklearn convention: higher is better)."""
        pred = self.predict(X)
        true = self._targets(X, y)
        return -float(np.abs(pred - true).mean())


def load_estimator(path):
    """Load whichever estimator type a checkpoint holds."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    task = payload.get("task")
    if task == "identity":
        return IdentitySlotClassifier.load(path)
    if task == "counting":
        return ActivityCountRegressor.load(path)
    raise RuntimeError(f"checkpoint {path} has unknown task {task!r}")
