import numpy as np
import pytest

from csisense.data import SyntheticSpec, generate_synthetic
from csisense.labels import ACTIVITIES, NUM_USER_SLOTS, SlotLabels


def random_slot_labels(rng: np.random.Generator) -> SlotLabels:
    """Uniformly random annotation: each slot empty or any activity."""
    slots = []
    for _ in range(NUM_USER_SLOTS):
        code = rng.integers(0, len(ACTIVITIES) + 1)
        slots.append(None if code == 0 else ACTIVITIES[code - 1])
    return SlotLabels(tuple(slots))


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small in-memory synthetic dataset shared by read-only tests."""
    spec = SyntheticSpec(n_samples=24, t_length=120, seed=11)
    return generate_synthetic(spec)
