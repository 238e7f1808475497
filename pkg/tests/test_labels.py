import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csisense.labels import (
    ACTIVITIES,
    NUM_ACTIVITIES,
    NUM_SLOT_CLASSES,
    NUM_USER_SLOTS,
    SlotLabels,
    count_matrix,
    derive_counts,
    encode_slot_targets,
    normalize_activity,
    round_counts,
    slot_code_matrix,
)

from conftest import random_slot_labels

EMPTY = SlotLabels((None,) * NUM_USER_SLOTS)


def brute_force_tally(labels: SlotLabels) -> np.ndarray:
    """Independent count oracle: walk the slots, tally per activity name."""
    counts = np.zeros(NUM_ACTIVITIES, dtype=np.int64)
    for name in labels.slots:
        if name is None:
            continue
        for k, activity in enumerate(ACTIVITIES):
            if name == activity:
                counts[k] += 1
    return counts


class TestSlotLabels:
    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError):
            SlotLabels(("walk",) * 5)

    def test_unknown_activity_rejected(self):
        with pytest.raises(ValueError):
            SlotLabels(("moonwalk", None, None, None, None, None))

    def test_six_active_slots_warns_not_raises(self):
        with pytest.warns(UserWarning):
            labels = SlotLabels(("walk",) * 6)
        assert labels.n_active == 6

    def test_codes_round_trip(self):
        labels = SlotLabels(("walk", None, "sit_down", None, None, "nothing"))
        assert SlotLabels.from_codes(labels.codes()) == labels

    def test_normalize_aliases(self):
        assert normalize_activity("Lie Down") == "lie_down"
        assert normalize_activity("nan") is None
        assert normalize_activity("NULL") is None
        with pytest.raises(ValueError):
            normalize_activity("handstand")


class TestEncodeSlotTargets:
    def test_all_absent(self):
        onehot = encode_slot_targets(EMPTY)
        assert onehot.shape == (NUM_USER_SLOTS, NUM_SLOT_CLASSES)
        assert (onehot[:, 0] == 1.0).all()
        assert onehot.sum() == NUM_USER_SLOTS

    def test_single_user(self):
        labels = SlotLabels((None, "walk", None, None, None, None))
        onehot = encode_slot_targets(labels)
        walk_col = ACTIVITIES.index("walk") + 1
        assert onehot[1, walk_col] == 1.0 and onehot[1].sum() == 1.0
        for row in (0, 2, 3, 4, 5):
            assert onehot[row, 0] == 1.0

    def test_six_distinct_activities_match_index_arithmetic(self):
        # Derived by enumerating: row u must be hot exactly at index(act)+1.
        names = ("walk", "jump", "wave", "pick_up", "stand_up", "rotation")
        onehot = encode_slot_targets(SlotLabels(names))
        assert (onehot.sum(axis=1) == 1.0).all()
        assert (onehot[:, 0] == 0.0).all()
        for u, name in enumerate(names):
            assert onehot[u, ACTIVITIES.index(name) + 1] == 1.0

    def test_rows_always_sum_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            onehot = encode_slot_targets(random_slot_labels(rng))
            assert (onehot.sum(axis=1) == 1.0).all()

    def test_argmax_decode_recovers_labels(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            labels = random_slot_labels(rng)
            decoded = SlotLabels.from_codes(encode_slot_targets(labels).argmax(axis=1))
            assert decoded == labels


class TestDeriveCounts:
    def test_paper_style_example(self):
        # Two users walking, one sitting down.
        labels = SlotLabels(("walk", "walk", "sit_down", None, None, None))
        counts = derive_counts(labels)
        expected = np.zeros(NUM_ACTIVITIES, dtype=np.int64)
        expected[ACTIVITIES.index("walk")] = 2
        expected[ACTIVITIES.index("sit_down")] = 1
        assert (counts == expected).all()

    def test_all_absent_gives_zero_vector(self):
        assert derive_counts(EMPTY).sum() == 0

    def test_matches_tally_oracle_on_random_draws(self):
        rng = np.random.default_rng(5)
        for _ in range(2000):
            labels = random_slot_labels(rng)
            assert (derive_counts(labels) == brute_force_tally(labels)).all()

    def test_count_sum_equals_active_slots(self):
        rng = np.random.default_rng(6)
        for _ in range(500):
            labels = random_slot_labels(rng)
            assert derive_counts(labels).sum() == labels.n_active

    def test_consistency_bridge_with_onehot(self):
        # counts equal the one-hot column sums over the activity columns.
        rng = np.random.default_rng(7)
        for _ in range(500):
            labels = random_slot_labels(rng)
            onehot = encode_slot_targets(labels)
            assert (derive_counts(labels) == onehot[:, 1:].sum(axis=0)).all()


@given(st.lists(st.integers(min_value=0, max_value=NUM_ACTIVITIES),
                min_size=NUM_USER_SLOTS, max_size=NUM_USER_SLOTS))
@settings(max_examples=200)
def test_bridge_property_hypothesis(codes):
    labels = SlotLabels.from_codes(np.array(codes))
    onehot = encode_slot_targets(labels)
    assert (derive_counts(labels) == onehot[:, 1:].sum(axis=0)).all()
    assert derive_counts(labels).sum() == labels.n_active


class TestRoundCounts:
    def test_basic(self):
        out = round_counts([0.4, 1.6, 0.0, 0, 0, 0, 0, 0, 0])
        assert (out[:3] == [0, 2, 0]).all()

    def test_integer_input_unchanged(self):
        values = np.arange(9.0)
        assert (round_counts(values) == values).all()

    def test_halves_round_away_from_zero(self):
        halves = np.arange(9) + 0.5  # 0.5, 1.5, ..., 8.5
        assert (round_counts(halves) == np.arange(9) + 1).all()

    def test_negative_input_rejected(self):
        with pytest.raises(ValueError):
            round_counts([-0.1] + [0.0] * 8)


def test_matrix_helpers_shapes():
    rng = np.random.default_rng(8)
    labels = [random_slot_labels(rng) for _ in range(7)]
    assert slot_code_matrix(labels).shape == (7, NUM_USER_SLOTS)
    assert count_matrix(labels).shape == (7, NUM_ACTIVITIES)
