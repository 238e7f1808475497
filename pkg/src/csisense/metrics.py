"""Metrics for both task formulations, breakdowns, and the feature-space
identity-invariance analysis.

All computations are pure numpy and deliberately free of shortcuts so they
can be checked exactly against brute-force oracles.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from .labels import NUM_ACTIVITIES, NUM_SLOT_CLASSES, NUM_USER_SLOTS, SlotLabels, round_counts

logger = logging.getLogger(__name__)

# Sentinel scalar value for metrics that are undefined on a given input
# (e.g. R^2 when the truths are constant).
UNDEFINED = None


@dataclass
class MetricReport:
    """Structured record of one evaluation: task, scalar metrics, breakdowns."""

    task: str
    n_samples: int
    scalars: dict = field(default_factory=dict)
    per_activity_mae: list | None = None
    per_user_count: dict | None = None
    confusion: list | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "MetricReport":
        if payload.get("per_user_count"):
            payload = dict(payload)
            payload["per_user_count"] = {
                int(k): v for k, v in payload["per_user_count"].items()
            }
        return cls(**payload)


def _as_code_matrix(values) -> np.ndarray:
    if len(values) and isinstance(values[0], SlotLabels):
        return np.stack([v.codes() for v in values])
    arr = np.asarray(values, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != NUM_USER_SLOTS:
        raise ValueError(f"expected (n, {NUM_USER_SLOTS}) slot codes, got {arr.shape}")
    return arr


def confusion_matrix(pred: np.ndarray, true: np.ndarray, n_classes: int) -> np.ndarray:
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (true.ravel(), pred.ravel()), 1)
    return matrix


def _macro_from_confusion(matrix: np.ndarray, class_ids) -> tuple[float, float, float]:
    precisions, recalls, f1s = [], [], []
    for k in class_ids:
        tp = int(matrix[k, k])
        predicted = int(matrix[:, k].sum())
        actual = int(matrix[k, :].sum())
        p = tp / predicted if predicted > 0 else 0.0
        r = tp / actual if actual > 0 else 0.0
        f1 = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
        precisions.append(p)
        recalls.append(r)
        f1s.append(f1)
    # Plain ordered sums keep the macro averages bit-identical to a scalar
    # reimplementation (np.mean's pairwise summation would differ in the ulp).
    n = len(precisions)
    return sum(precisions) / n, sum(recalls) / n, sum(f1s) / n


def classification_metrics(predictions, truths, include_absent_class: bool = True) -> MetricReport:
    """Pooled multi-class metrics over all (sample, slot) pairs.

    Every slot of every sample contributes one 10-way decision; accuracy is
    the pooled exact-match rate, and macro precision/recall/F1 average over
    the classes unweighted (0 convention for classes with no predicted /
    no true instances).  `include_absent_class=False` drops the empty-slot
    class from the macro average for sensitivity reporting.
    """
    pred = _as_code_matrix(predictions)
    true = _as_code_matrix(truths)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    matrix = confusion_matrix(pred, true, NUM_SLOT_CLASSES)
    class_ids = range(NUM_SLOT_CLASSES) if include_absent_class else range(1, NUM_SLOT_CLASSES)
    precision, recall, f1 = _macro_from_confusion(matrix, class_ids)
    accuracy = float((pred == true).mean())
    return MetricReport(
        task="identity_dependent",
        n_samples=pred.shape[0],
        scalars={
            "accuracy": accuracy,
            "macro_precision": precision,
            "macro_recall": recall,
            "macro_f1": f1,
        },
        confusion=matrix.tolist(),
    )


def macro_f1_from_codes(pred, true) -> float:
    """Pooled macro-F1 over the 10 slot classes (shortcut for model selection)."""
    matrix = confusion_matrix(np.asarray(pred), np.asarray(true), NUM_SLOT_CLASSES)
    return _macro_from_confusion(matrix, range(NUM_SLOT_CLASSES))[2]


def _check_count_shapes(predicted, truths) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(predicted, dtype=np.float64)
    true = np.asarray(truths, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    if pred.ndim != 2 or pred.shape[1] != NUM_ACTIVITIES:
        raise ValueError(f"expected (n, {NUM_ACTIVITIES}) counts, got {pred.shape}")
    if pred.size and pred.min() < 0:
        raise ValueError("count predictions must be non-negative")
    return pred, true


def counting_metrics(predicted, truths) -> MetricReport:
    """Counting metrics: MAE and R^2 on continuous predictions, cell accuracy
    and exact match on rounded ones.

    R^2 is computed over the flattened n*9 cells about the global cell mean;
    it is reported as undefined (None) when the truths are constant.
    """
    pred, true = _check_count_shapes(predicted, truths)
    mae = float(np.abs(pred - true).mean())
    ss_res = float(((pred - true) ** 2).sum())
    ss_tot = float(((true - true.mean()) ** 2).sum())
    r2 = UNDEFINED if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    rounded = round_counts(pred)
    cell_acc = float((rounded == true.astype(np.int64)).mean())
    exact = float((rounded == true.astype(np.int64)).all(axis=1).mean())
    return MetricReport(
        task="identity_agnostic",
        n_samples=pred.shape[0],
        scalars={
            "mae": mae,
            "r2": r2,
            "cell_accuracy": cell_acc,
            "exact_match": exact,
        },
    )


def per_activity_mae(predicted, truths) -> np.ndarray:
    """MAE restricted to each activity column, shape (9,)."""
    pred, true = _check_count_shapes(predicted, truths)
    return np.abs(pred - true).mean(axis=0)


def per_user_count_breakdown(predictions, truths, annotations, task: str) -> dict:
    """Group samples by true active-user count and report the task metric per group.

    counting: group MAE plus the SD of per-sample MAE across the group.
    identity: group pooled macro-F1 plus the SD of per-sample slot accuracy.
    Empty groups are omitted.
    """
    n_active = np.array([a.n_active for a in annotations])
    out = {}
    for count in range(NUM_USER_SLOTS):
        idx = np.flatnonzero(n_active == count)
        if idx.size == 0:
            continue
        if task == "counting":
            pred, true = _check_count_shapes(predictions, truths)
            per_sample = np.abs(pred[idx] - true[idx]).mean(axis=1)
            out[count] = {
                "metric": "mae",
                "value": float(per_sample.mean()),
                "sd": float(per_sample.std()),
                "n": int(idx.size),
            }
        elif task == "identity":
            pred = _as_code_matrix(predictions)[idx]
            true = _as_code_matrix(truths)[idx]
            per_sample = (pred == true).mean(axis=1)
            out[count] = {
                "metric": "macro_f1",
                "value": macro_f1_from_codes(pred, true),
                "sd": float(per_sample.std()),
                "n": int(idx.size),
            }
        else:
            raise ValueError(f"task must be 'counting' or 'identity', got {task!r}")
    return out


@dataclass
class InvarianceReport:
    """Per-user feature centroids and their pairwise separations."""

    user_ids: list
    excluded_users: list
    centroids: list
    euclidean_pairs: dict
    cosine_pairs: dict
    euclidean_mean: float
    euclidean_sd: float
    cosine_mean: float
    cosine_sd: float

    def to_dict(self) -> dict:
        return asdict(self)


def identity_invariance(feature_fn, samples) -> InvarianceReport:
    """Centroid-separation analysis of the feature space, one centroid per user.

    Centroids average the feature vectors of samples where that user is the
    sole occupant (user n = slot n).  Users with no single-user samples are
    excluded, logged, and the pair statistics are recomputed over the rest.
    feature_fn maps a list of samples to an (n, d) array.
    """
    groups: dict[int, list] = {}
    for sample in samples:
        active = sample.annotation.active_slots()
        if len(active) == 1:
            groups.setdefault(active[0] + 1, []).append(sample)
    excluded = [u for u in range(1, NUM_USER_SLOTS + 1) if u not in groups]
    if excluded:
        logger.info("no single-user samples for users %s; excluded from invariance analysis", excluded)
    if len(groups) < 2:
        raise ValueError(
            "need single-user samples for at least two users to compare centroids"
        )
    user_ids = sorted(groups)
    centroids = {}
    for user in user_ids:
        features = np.asarray(feature_fn(groups[user]), dtype=np.float64)
        centroids[user] = features.mean(axis=0)

    euclid, cosine = {}, {}
    for a, b in combinations(user_ids, 2):
        ca, cb = centroids[a], centroids[b]
        euclid[f"{a}-{b}"] = float(np.linalg.norm(ca - cb))
        denom = np.linalg.norm(ca) * np.linalg.norm(cb)
        cosine[f"{a}-{b}"] = float(np.dot(ca, cb) / denom) if denom > 0 else 0.0

    e_vals = np.array(list(euclid.values()))
    c_vals = np.array(list(cosine.values()))
    return InvarianceReport(
        user_ids=user_ids,
        excluded_users=excluded,
        centroids=[centroids[u].tolist() for u in user_ids],
        euclidean_pairs=euclid,
        cosine_pairs=cosine,
        euclidean_mean=float(e_vals.mean()),
        euclidean_sd=float(e_vals.std()),
        cosine_mean=float(c_vals.mean()),
        cosine_sd=float(c_vals.std()),
    )
