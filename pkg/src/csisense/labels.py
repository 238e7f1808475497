"""Label representations for multi-user activity sensing.

Two target encodings coexist and must stay consistent:

* per-slot labels — a fixed roster of 6 user slots, each either empty or
  holding one of 9 activities.  The training target is one 10-way one-hot
  row per slot, with class index 0 reserved for the empty slot.
* activity counts — a 9-element vector of how many slots hold each
  activity, with no user association.  Predictions are continuous and
  non-negative; discrete evaluation rounds them half-away-from-zero.

The activity ordering below is canonical for every module in the package.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

ACTIVITIES: tuple[str, ...] = (
    "nothing",
    "walk",
    "rotation",
    "jump",
    "wave",
    "lie_down",
    "pick_up",
    "sit_down",
    "stand_up",
)
NUM_ACTIVITIES = len(ACTIVITIES)
NUM_USER_SLOTS = 6
# 9 activities plus class 0 for an empty slot.
NUM_SLOT_CLASSES = NUM_ACTIVITIES + 1

# Canonical on-disk token for an empty slot (in memory it is plain None).
ABSENT_TOKEN = "null"

_ACTIVITY_INDEX = {name: i for i, name in enumerate(ACTIVITIES)}
# Dataset sources spell activities inconsistently; normalise the usual variants.
_ACTIVITY_ALIASES = {
    "liedown": "lie_down",
    "lie down": "lie_down",
    "pickup": "pick_up",
    "pick up": "pick_up",
    "sitdown": "sit_down",
    "sit down": "sit_down",
    "standup": "stand_up",
    "stand up": "stand_up",
    "walking": "walk",
    "jumping": "jump",
    "waving": "wave",
    "rotating": "rotation",
}
_ABSENT_ALIASES = {"", "null", "nan", "none", "nothing_user", "absent"}


def normalize_activity(token: str | None) -> str | None:
    """Map a raw annotation token to a canonical activity name or None (empty slot).

    Raises ValueError for tokens that are neither a known activity nor a
    recognised absent marker.
    """
    if token is None:
        return None
    cleaned = str(token).strip().lower().replace("-", "_")
    if cleaned in _ABSENT_ALIASES:
        return None
    cleaned = _ACTIVITY_ALIASES.get(cleaned, cleaned)
    if cleaned not in _ACTIVITY_INDEX:
        raise ValueError(f"unknown activity label: {token!r}")
    return cleaned


@dataclass(frozen=True)
class SlotLabels:
    """Per-slot annotation for one sample: 6 entries, each an activity name or None."""

    slots: tuple[str | None, ...]

    def __post_init__(self) -> None:
        if len(self.slots) != NUM_USER_SLOTS:
            raise ValueError(
                f"expected {NUM_USER_SLOTS} user slots, got {len(self.slots)}"
            )
        for s in self.slots:
            if s is not None and s not in _ACTIVITY_INDEX:
                raise ValueError(f"unknown activity label: {s!r}")
        if self.n_active > 5:
            # Dataset property, not a codec law: keep it a warning so the
            # codec stays usable on other data.
            warnings.warn(
                f"{self.n_active} active slots exceeds the expected maximum of 5",
                stacklevel=2,
            )

    @property
    def n_active(self) -> int:
        return sum(s is not None for s in self.slots)

    def active_slots(self) -> tuple[int, ...]:
        """Indices (0-based) of occupied slots."""
        return tuple(i for i, s in enumerate(self.slots) if s is not None)

    def codes(self) -> np.ndarray:
        """Integer class codes, shape (6,): 0 for an empty slot, activity index + 1 otherwise."""
        return np.array(
            [0 if s is None else _ACTIVITY_INDEX[s] + 1 for s in self.slots],
            dtype=np.int64,
        )

    @classmethod
    def from_codes(cls, codes) -> "SlotLabels":
        codes = np.asarray(codes)
        if codes.shape != (NUM_USER_SLOTS,):
            raise ValueError(f"expected shape ({NUM_USER_SLOTS},), got {codes.shape}")
        slots = []
        for c in codes.tolist():
            if not 0 <= c < NUM_SLOT_CLASSES:
                raise ValueError(f"slot code {c} outside [0, {NUM_SLOT_CLASSES})")
            slots.append(None if c == 0 else ACTIVITIES[c - 1])
        return cls(tuple(slots))

    @classmethod
    def from_tokens(cls, tokens) -> "SlotLabels":
        """Build from raw annotation strings, normalising absent markers and aliases."""
        return cls(tuple(normalize_activity(t) for t in tokens))

    def tokens(self) -> tuple[str, ...]:
        """On-disk representation: activity name or the canonical absent token."""
        return tuple(ABSENT_TOKEN if s is None else s for s in self.slots)


def encode_slot_targets(labels: SlotLabels) -> np.ndarray:
    """One-hot training target, shape (6, 10); column 0 marks an empty slot."""
    onehot = np.zeros((NUM_USER_SLOTS, NUM_SLOT_CLASSES), dtype=np.float64)
    onehot[np.arange(NUM_USER_SLOTS), labels.codes()] = 1.0
    return onehot


def derive_counts(labels: SlotLabels) -> np.ndarray:
    """Activity-count vector, shape (9,): counts[k] = number of slots holding activity k.

    Empty slots contribute to no count, so counts.sum() equals the number of
    occupied slots.
    """
    counts = np.zeros(NUM_ACTIVITIES, dtype=np.int64)
    for s in labels.slots:
        if s is not None:
            counts[_ACTIVITY_INDEX[s]] += 1
    return counts


def round_counts(predicted) -> np.ndarray:
    """Round continuous count predictions to integers, halves away from zero.

    Inputs must be non-negative (the counting head guarantees this), so
    away-from-zero is floor(x + 0.5).
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    if predicted.size and predicted.min() < 0:
        raise ValueError(
            f"count predictions must be non-negative, got min {predicted.min()}"
        )
    return np.floor(predicted + 0.5).astype(np.int64)


def slot_code_matrix(labels_list) -> np.ndarray:
    """Stack slot codes for a sequence of SlotLabels, shape (n, 6)."""
    return np.stack([lab.codes() for lab in labels_list])


def count_matrix(labels_list) -> np.ndarray:
    """Stack count vectors for a sequence of SlotLabels, shape (n, 9)."""
    return np.stack([derive_counts(lab) for lab in labels_list])
