"""Optimization loop: AdamW with two learning-rate groups, linear warmup +
cosine annealing, gradient clipping, checkpointing.

The schedule advances per optimizer step by default (per-epoch granularity
is available via TrainConfig.schedule_by_epoch).  Runs are fully seeded:
identical config and data reproduce the loss trajectory bit for bit on CPU.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.nn.modules.batchnorm import _BatchNorm

from .models import SensingModel, count_loss, focal_loss
from .transform import CsiImageTransformer

CHECKPOINT_FORMAT = "csisense-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    weight_decay: float = 1e-2
    clip_max_norm: float = 1.0
    lr_projection_peak: float = 1e-3
    lr_backbone_head_peak: float = 1e-4
    warmup_fraction: float = 0.10
    seed: int = 0
    schedule_by_epoch: bool = False
    # Recompute BatchNorm running statistics over the training set before
    # evaluation and before saving; essential for short from-scratch runs.
    recalibrate_bn: bool = True
    focal_gamma: float = 2.0

    def validate(self) -> None:
        for name in ("epochs", "batch_size", "weight_decay", "clip_max_norm",
                     "lr_projection_peak", "lr_backbone_head_peak"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")


@dataclass
class LrSchedule:
    """Warmup/anneal breakpoints; peaks are supplied per parameter group."""

    total_steps: int
    warmup_steps: int

    def __post_init__(self) -> None:
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(
                f"need 0 <= warmup_steps < total_steps, got "
                f"{self.warmup_steps} / {self.total_steps}"
            )

    @classmethod
    def for_run(cls, total_steps: int, warmup_fraction: float) -> "LrSchedule":
        warmup = min(round(warmup_fraction * total_steps), total_steps - 1)
        return cls(total_steps=total_steps, warmup_steps=warmup)


def lr_at(step: int, schedule: LrSchedule, peak: float) -> float:
    """Learning rate at an optimizer step.

    Linear ramp from peak/warmup_steps up to peak, then cosine annealing to
    zero over the remaining steps.  Continuous at the boundary: the ramp
    reaches peak exactly when the cosine phase starts at 1.
    """
    if not 0 <= step < schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps})")
    if step < schedule.warmup_steps:
        return peak * (step + 1) / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - schedule.warmup_steps) / span))


def make_param_groups(model: SensingModel, cfg: TrainConfig):
    """Two groups: channel-lift parameters vs backbone + head.

    Every trainable parameter lands in exactly one group (audited), so the
    two peak learning rates cover the whole model.
    """
    proj_params = model.projection_parameters()
    proj_ids = {id(p) for p in proj_params}
    rest = [p for p in model.parameters() if id(p) not in proj_ids]
    assert len(proj_params) + len(rest) == sum(1 for _ in model.parameters())
    groups = [
        {"params": proj_params, "lr": cfg.lr_projection_peak},
        {"params": rest, "lr": cfg.lr_backbone_head_peak},
    ]
    peaks = [cfg.lr_projection_peak, cfg.lr_backbone_head_peak]
    return groups, peaks


def global_grad_norm(model: torch.nn.Module) -> float:
    total = 0.0
    for p in model.parameters():
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def recalibrate_batchnorm(model: torch.nn.Module, batches) -> None:
    """Recompute BatchNorm running statistics with a forward-only sweep.

    Resets every BN layer, switches it to cumulative averaging, feeds the
    given batches, then restores the original momenta and training mode.
    A no-op for BN-free architectures.
    """
    bn_layers = [m for m in model.modules() if isinstance(m, _BatchNorm)]
    if not bn_layers:
        return
    momenta = [m.momentum for m in bn_layers]
    for m in bn_layers:
        m.reset_running_stats()
        m.momentum = None
    was_training = model.training
    model.train()
    with torch.no_grad():
        for batch in batches:
            model(batch)
    for m, mom in zip(bn_layers, momenta):
        m.momentum = mom
    model.train(was_training)


@dataclass
class TrainingLog:
    task: str
    total_steps: int
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_metric: float | None = None
    eval_metric_name: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "TrainingLog":
        return cls(**json.loads(Path(path).read_text()))


def fingerprint_of(payload: dict) -> str:
    """Stable 16-hex-char digest of a JSON-serialisable mapping."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _target_tensor(task: str, targets: np.ndarray, idx) -> torch.Tensor:
    sel = targets[idx]
    if task == "identity":
        return torch.from_numpy(np.ascontiguousarray(sel, dtype=np.int64))
    return torch.from_numpy(np.ascontiguousarray(sel, dtype=np.float32))


def _epoch_batches(order: np.ndarray, batch_size: int):
    """Near-equal index chunks, ceil(n / batch_size) of them.

    Evening the sizes (instead of a short tail slice) keeps the step count
    at the contractual ceil(n / batch) while avoiding single-sample batches,
    which BatchNorm cannot train on.
    """
    return np.array_split(order, math.ceil(len(order) / batch_size))


def _image_batches(transformer, amplitudes, batch_size):
    for start in range(0, len(amplitudes), batch_size):
        chunk = amplitudes[start : start + batch_size]
        images = transformer.transform(chunk)
        yield torch.from_numpy(images)[:, None]


def _recalibration_batches(transformer, amplitudes, batch_size):
    for idx in _epoch_batches(np.arange(len(amplitudes)), batch_size):
        images = transformer.transform([amplitudes[i] for i in idx])
        yield torch.from_numpy(images)[:, None]


def evaluate_scalar(model, transformer, amplitudes, targets, batch_size: int = 32) -> float:
    """Held-out metric used for model selection: macro-F1 (identity) or MAE (counting)."""
    from .metrics import macro_f1_from_codes

    model.eval()
    outputs = []
    with torch.no_grad():
        for batch in _image_batches(transformer, amplitudes, batch_size):
            outputs.append(model(batch))
    out = torch.cat(outputs)
    if model.task == "identity":
        pred = out.argmax(dim=-1).numpy()
        return macro_f1_from_codes(pred, np.asarray(targets))
    return float(np.abs(out.numpy() - np.asarray(targets, dtype=np.float64)).mean())


def fit_model(
    model: SensingModel,
    amplitudes,
    targets: np.ndarray,
    transformer: CsiImageTransformer,
    cfg: TrainConfig,
    eval_data: tuple | None = None,
    checkpoint_dir=None,
    fingerprint: str | None = None,
    checkpoint_extra: dict | None = None,
) -> TrainingLog:
    """Train a SensingModel on (amplitude, target) pairs.

    amplitudes: sequence of (T, 3, 3, 30) arrays or CsiSamples; targets:
    (n, 6) slot codes for the identity task, (n, 9) counts for counting.
    eval_data, when given, is a matching pair evaluated after every epoch;
    the best checkpoint by that metric is kept next to the final one.
    """
    cfg.validate()
    n = len(amplitudes)
    if n == 0:
        raise ValueError("empty training set")
    if len(targets) != n:
        raise ValueError(f"{n} samples but {len(targets)} targets")
    targets = np.asarray(targets)

    if fingerprint is None:
        fingerprint = fingerprint_of(
            {"task": model.task, "backbone": model.backbone_kind,
             "channel_strategy": model.channel_strategy, "train": asdict(cfg)}
        )

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.schedule_by_epoch:
        schedule = LrSchedule.for_run(cfg.epochs, cfg.warmup_fraction)
    else:
        schedule = LrSchedule.for_run(total_steps, cfg.warmup_fraction)

    groups, peaks = make_param_groups(model, cfg)
    optimizer = torch.optim.AdamW(groups, weight_decay=cfg.weight_decay)

    metric_name = "macro_f1" if model.task == "identity" else "mae"
    higher_is_better = model.task == "identity"
    log = TrainingLog(task=model.task, total_steps=total_steps,
                      eval_metric_name=metric_name if eval_data is not None else None)
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    def maybe_recalibrate():
        if cfg.recalibrate_bn:
            recalibrate_batchnorm(
                model, _recalibration_batches(transformer, amplitudes, cfg.batch_size)
            )

    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(n)
        epoch_losses = []
        epoch_norms = []
        for idx in _epoch_batches(order, cfg.batch_size):
            schedule_pos = epoch if cfg.schedule_by_epoch else step
            for group, peak in zip(optimizer.param_groups, peaks):
                group["lr"] = lr_at(schedule_pos, schedule, peak)
            images = transformer.transform_training([amplitudes[i] for i in idx], rng)
            batch = torch.from_numpy(images)[:, None]
            target = _target_tensor(model.task, targets, idx)
            optimizer.zero_grad()
            output = model(batch)
            if model.task == "identity":
                loss = focal_loss(output, target, gamma=cfg.focal_gamma)
            else:
                loss = count_loss(output, target)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch}, step {step}"
                )
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_max_norm)
            epoch_norms.append(global_grad_norm(model))
            optimizer.step()
            epoch_losses.append(loss.item())
            step += 1

        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "lr_projection": optimizer.param_groups[0]["lr"],
            "lr_backbone_head": optimizer.param_groups[1]["lr"],
            "post_clip_grad_norm_max": float(np.max(epoch_norms)),
        }
        if eval_data is not None:
            maybe_recalibrate()
            value = evaluate_scalar(model, transformer, eval_data[0], eval_data[1])
            record[metric_name] = value
            improved = (
                log.best_metric is None
                or (value > log.best_metric if higher_is_better else value < log.best_metric)
            )
            if improved:
                log.best_metric = value
                log.best_epoch = epoch
                if checkpoint_dir is not None:
                    save_checkpoint(
                        checkpoint_dir / "checkpoint_best.pt",
                        model, optimizer, step=step, fingerprint=fingerprint, cfg=cfg,
                        extra=checkpoint_extra,
                    )
        log.epochs.append(record)

    if eval_data is None:
        maybe_recalibrate()
    model.eval()
    if checkpoint_dir is not None:
        save_checkpoint(
            checkpoint_dir / "checkpoint_last.pt",
            model, optimizer, step=step, fingerprint=fingerprint, cfg=cfg,
            extra=checkpoint_extra,
        )
    return log


def save_checkpoint(path, model: SensingModel, optimizer=None, *, step: int,
                    fingerprint: str, cfg: TrainConfig | None = None,
                    extra: dict | None = None) -> None:
    """Self-describing checkpoint: parameters, optimizer state, fingerprint, step."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "fingerprint": fingerprint,
        "task": model.task,
        "backbone": model.backbone_kind,
        "channel_strategy": model.channel_strategy,
        "step": step,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "train_config": asdict(cfg) if cfg is not None else None,
        "extra": extra,
    }
    torch.save(payload, path)


def load_checkpoint(path, model: SensingModel, optimizer=None,
                    expected_fingerprint: str | None = None) -> dict:
    """Restore model (and optionally optimizer) state; returns the payload.

    Refuses checkpoints whose fingerprint or model identity (task, backbone,
    channel strategy) does not match what they are being loaded into.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise RuntimeError(f"not a {CHECKPOINT_FORMAT} file: {path}")
    if expected_fingerprint is not None and payload["fingerprint"] != expected_fingerprint:
        raise RuntimeError(
            f"checkpoint fingerprint {payload['fingerprint']} does not match "
            f"expected {expected_fingerprint}"
        )
    for key, actual in (("task", model.task), ("backbone", model.backbone_kind),
                        ("channel_strategy", model.channel_strategy)):
        if payload[key] != actual:
            raise RuntimeError(
                f"checkpoint {key}={payload[key]!r} does not match model {key}={actual!r}"
            )
    model.load_state_dict(payload["model_state"])
    if optimizer is not None and payload["optimizer_state"] is not None:
        optimizer.load_state_dict(payload["optimizer_state"])
    return payload
