"""Dataset ingestion and synthetic data generation.

On-disk layout (the package's native format):

    <root>/annotation.csv      one row per sample:
                               sample_id,band,environment,user_1,...,user_6
                               where a user column holds an activity name or
                               the literal token "null" for an empty slot
    <root>/amplitude/<id>.npy  one array per sample, shape (T, 3, 3, 30)

An adapter for the public multi-user benchmark's release layout
(annotation CSV at the root, arrays under wifi_csi/amp/) is provided by
:func:`load_wimans_manifest`.

Synthetic datasets encode each activity as a sinusoid at an
activity-specific frequency injected into a random subset of the 270
antenna-pair x subcarrier channels, which keeps activity counting learnable
by a small model in minutes.  Generation uses numpy's PCG64 generator,
which is reproducible across platforms for a fixed seed.

All loaders are read-only after manifest construction and safe to call from
multiple workers concurrently.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .labels import ACTIVITIES, NUM_ACTIVITIES, NUM_USER_SLOTS, SlotLabels

BANDS: tuple[str, ...] = ("2.4GHz", "5GHz")
ENVIRONMENTS: tuple[str, ...] = ("classroom", "meeting", "empty")

CSI_GRID_SHAPE = (3, 3, 30)  # tx antennas, rx antennas, subcarriers
NUM_CHANNELS = 270
WINDOW_SECONDS = 3.0

_BAND_ALIASES = {
    "2.4": "2.4GHz",
    "2.4ghz": "2.4GHz",
    "2.4 ghz": "2.4GHz",
    "ghz2_4": "2.4GHz",
    "5": "5GHz",
    "5.0": "5GHz",
    "5ghz": "5GHz",
    "5 ghz": "5GHz",
    "ghz5": "5GHz",
}


class IngestionError(RuntimeError):
    """Fatal problem while reading a dataset from disk."""


def normalize_band(token) -> str:
    cleaned = str(token).strip().lower()
    band = _BAND_ALIASES.get(cleaned)
    if band is None:
        raise IngestionError(f"unknown band: {token!r} (expected one of {BANDS})")
    return band


def normalize_environment(token) -> str:
    cleaned = str(token).strip().lower()
    if cleaned not in ENVIRONMENTS:
        raise IngestionError(
            f"unknown environment: {token!r} (expected one of {ENVIRONMENTS})"
        )
    return cleaned


@dataclass
class CsiSample:
    """One 3-second amplitude recording with its annotation.

    amplitude has shape (T, 3, 3, 30); values are linear amplitudes
    (finite, non-negative), T is whatever the recording holds — length is
    fixed later by the transform chain.
    """

    sample_id: str
    band: str
    environment: str
    amplitude: np.ndarray
    annotation: SlotLabels


@dataclass
class ManifestEntry:
    sample_id: str
    band: str
    environment: str
    labels: SlotLabels
    path: Path | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    activity_vocabulary: tuple[str, ...] = ACTIVITIES
    root: Path | None = None
    _by_id: dict[str, ManifestEntry] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if tuple(self.activity_vocabulary) != ACTIVITIES:
            raise ValueError(
                f"activity vocabulary must be {ACTIVITIES}, got {self.activity_vocabulary}"
            )
        self._by_id = {}
        for entry in self.entries:
            if entry.sample_id in self._by_id:
                raise IngestionError(f"duplicate sample_id: {entry.sample_id!r}")
            self._by_id[entry.sample_id] = entry

    def __len__(self) -> int:
        return len(self.entries)

    def sample_ids(self) -> list[str]:
        return [e.sample_id for e in self.entries]

    def get(self, sample_id: str) -> ManifestEntry:
        try:
            return self._by_id[sample_id]
        except KeyError:
            raise KeyError(f"sample_id not in manifest: {sample_id!r}") from None

    def filtered(self, band: str | None = None, environment: str | None = None) -> "DatasetManifest":
        """New manifest restricted to one band and/or environment."""
        kept = [
            e
            for e in self.entries
            if (band is None or e.band == band)
            and (environment is None or e.environment == environment)
        ]
        return DatasetManifest(entries=kept, root=self.root)


def _validate_amplitude(array: np.ndarray, sample_id: str) -> np.ndarray:
    if array.ndim != 4 or array.shape[1:] != CSI_GRID_SHAPE:
        raise IngestionError(
            f"sample {sample_id!r}: expected amplitude shape (T, 3, 3, 30), "
            f"got {array.shape}"
        )
    if array.shape[0] < 1:
        raise IngestionError(f"sample {sample_id!r}: empty time axis")
    bad = int(np.size(array) - np.isfinite(array).sum())
    if bad:
        raise IngestionError(
            f"sample {sample_id!r}: {bad} non-finite amplitude values"
        )
    return array


def load_sample(manifest: DatasetManifest, sample_id: str, mmap: bool = False) -> CsiSample:
    """Load one sample's amplitude array from disk.

    Complex-valued recordings are converted to element-wise magnitude here,
    at ingestion, never later in the pipeline.  Deterministic and
    side-effect free.
    """
    entry = manifest.get(sample_id)
    if entry.path is None:
        raise IngestionError(f"sample {sample_id!r} has no backing file")
    array = np.load(entry.path, mmap_mode="r" if mmap else None)
    if np.iscomplexobj(array):
        array = np.abs(array)
    array = _validate_amplitude(np.asarray(array), sample_id)
    return CsiSample(
        sample_id=entry.sample_id,
        band=entry.band,
        environment=entry.environment,
        amplitude=array,
        annotation=entry.labels,
    )


def _read_annotation_rows(csv_path: Path):
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestionError(f"empty annotation file: {csv_path}")
        yield from ((reader.fieldnames, row) for row in reader)


def load_manifest(root) -> DatasetManifest:
    """Ingest a dataset directory in the package's native layout."""
    root = Path(root)
    csv_path = root / "annotation.csv"
    if not csv_path.is_file():
        raise IngestionError(f"missing annotation file: {csv_path}")
    entries = []
    user_cols = [f"user_{i}" for i in range(1, NUM_USER_SLOTS + 1)]
    for fieldnames, row in _read_annotation_rows(csv_path):
        missing = [c for c in ["sample_id", "band", "environment", *user_cols] if c not in fieldnames]
        if missing:
            raise IngestionError(f"annotation file lacks columns: {missing}")
        sample_id = row["sample_id"].strip()
        try:
            labels = SlotLabels.from_tokens([row[c] for c in user_cols])
        except ValueError as exc:
            raise IngestionError(f"sample {sample_id!r}: {exc}") from exc
        path = root / "amplitude" / f"{sample_id}.npy"
        if not path.is_file():
            raise IngestionError(
                f"sample {sample_id!r}: missing amplitude file {path}"
            )
        entries.append(
            ManifestEntry(
                sample_id=sample_id,
                band=normalize_band(row["band"]),
                environment=normalize_environment(row["environment"]),
                labels=labels,
                path=path,
            )
        )
    return DatasetManifest(entries=entries, root=root)


def load_wimans_manifest(root) -> DatasetManifest:
    """Adapter for the public multi-user benchmark's release layout.

    Expects <root>/annotation.csv with a sample-id column ("label" or
    "sample_id"), a band column ("wifi_band" or "band"), an "environment"
    column and per-user activity columns ("user_N_activity" or "user_N"),
    plus amplitude arrays under <root>/wifi_csi/amp/<id>.npy (falling back
    to <root>/amplitude/<id>.npy).
    """
    root = Path(root)
    csv_path = root / "annotation.csv"
    if not csv_path.is_file():
        raise IngestionError(f"missing annotation file: {csv_path}")
    entries = []
    for fieldnames, row in _read_annotation_rows(csv_path):
        id_col = next((c for c in ("label", "sample_id") if c in fieldnames), None)
        band_col = next((c for c in ("wifi_band", "band") if c in fieldnames), None)
        if id_col is None or band_col is None or "environment" not in fieldnames:
            raise IngestionError(
                "annotation file lacks sample-id / band / environment columns; "
                f"found {fieldnames}"
            )
        sample_id = row[id_col].strip()
        tokens = []
        for i in range(1, NUM_USER_SLOTS + 1):
            col = f"user_{i}_activity" if f"user_{i}_activity" in fieldnames else f"user_{i}"
            tokens.append(row.get(col, ""))
        try:
            labels = SlotLabels.from_tokens(tokens)
        except ValueError as exc:
            raise IngestionError(f"sample {sample_id!r}: {exc}") from exc
        path = root / "wifi_csi" / "amp" / f"{sample_id}.npy"
        if not path.is_file():
            path = root / "amplitude" / f"{sample_id}.npy"
        if not path.is_file():
            raise IngestionError(f"sample {sample_id!r}: missing amplitude file under {root}")
        entries.append(
            ManifestEntry(
                sample_id=sample_id,
                band=normalize_band(row[band_col]),
                environment=normalize_environment(row["environment"]),
                labels=labels,
                path=path,
            )
        )
    return DatasetManifest(entries=entries, root=root)


def write_dataset(manifest: DatasetManifest, samples, root) -> Path:
    """Write samples to the native layout; re-ingesting reproduces them exactly."""
    root = Path(root)
    (root / "amplitude").mkdir(parents=True, exist_ok=True)
    by_id = {s.sample_id: s for s in samples}
    user_cols = [f"user_{i}" for i in range(1, NUM_USER_SLOTS + 1)]
    with open(root / "annotation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "band", "environment", *user_cols])
        for entry in manifest.entries:
            sample = by_id[entry.sample_id]
            writer.writerow([entry.sample_id, entry.band, entry.environment, *entry.labels.tokens()])
            np.save(root / "amplitude" / f"{entry.sample_id}.npy", sample.amplitude)
    return root


# --- synthetic generation -------------------------------------------------

# Constant baseline keeps amplitudes positive under 5 superposed unit
# sinusoids plus noise; per-sample standardisation later removes it anyway.
SYNTHETIC_BASELINE = 10.0
SYNTHETIC_SIGNAL_AMPLITUDE = 1.0
SYNTHETIC_CHANNEL_FILL = 0.3
DEFAULT_SIGNATURE_FREQUENCIES = tuple(float(f) for f in range(1, NUM_ACTIVITIES + 1))


@dataclass
class SyntheticSpec:
    """Recipe for a deterministic synthetic dataset.

    The seed fully determines the output.  `randomize_slots` places the k
    active users into a random slot subset instead of the first k slots
    (needed when slot identity matters, e.g. user-held-out splits);
    `user_signature_strength` is the probability that an injection uses a
    fixed per-user channel mask instead of a fresh random subset, giving
    each user a recognisable spatial signature.
    """

    n_samples: int
    t_length: int = 3000
    user_count_range: tuple[int, int] = (0, 5)
    signature_frequencies: tuple[float, ...] = DEFAULT_SIGNATURE_FREQUENCIES
    noise_std: float = 0.05
    seed: int = 0
    randomize_slots: bool = False
    user_signature_strength: float = 0.0

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if self.t_length < 1:
            raise ValueError("t_length must be positive")
        lo, hi = self.user_count_range
        if not (0 <= lo <= hi <= NUM_USER_SLOTS - 1):
            raise ValueError(
                f"user_count_range must satisfy 0 <= lo <= hi <= {NUM_USER_SLOTS - 1}"
            )
        if len(self.signature_frequencies) != NUM_ACTIVITIES:
            raise ValueError(f"need {NUM_ACTIVITIES} signature frequencies")
        if any(f <= 0 for f in self.signature_frequencies):
            raise ValueError("signature frequencies must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not 0.0 <= self.user_signature_strength <= 1.0:
            raise ValueError("user_signature_strength must lie in [0, 1]")


def generate_synthetic(spec: SyntheticSpec) -> tuple[DatasetManifest, list[CsiSample]]:
    """Synthesise a dataset with known activity composition.

    Each sample draws a user count k uniformly from the configured range and
    assigns k activities uniformly (with replacement).  The amplitude is a
    constant baseline plus, per assigned activity, a sinusoid at that
    activity's signature frequency on a random channel subset, plus Gaussian
    noise.  Identical seeds yield bit-identical outputs.
    """
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    lo, hi = spec.user_count_range
    freqs = np.asarray(spec.signature_frequencies, dtype=np.float64)
    t = np.arange(spec.t_length, dtype=np.float64) / (spec.t_length / WINDOW_SECONDS)
    waves = np.sin(2.0 * np.pi * freqs[:, None] * t[None, :])  # (9, T)
    user_masks = rng.random((NUM_USER_SLOTS, NUM_CHANNELS)) < SYNTHETIC_CHANNEL_FILL

    entries = []
    samples = []
    width = len(str(spec.n_samples - 1))
    for i in range(spec.n_samples):
        k = int(rng.integers(lo, hi + 1))
        environment = ENVIRONMENTS[int(rng.integers(len(ENVIRONMENTS)))]
        acts = rng.integers(0, NUM_ACTIVITIES, size=k)
        if spec.randomize_slots:
            slots_idx = np.sort(rng.choice(NUM_USER_SLOTS, size=k, replace=False))
        else:
            # First k slots; sorted activities make the per-slot label a
            # deterministic function of the injected multiset.
            acts = np.sort(acts)
            slots_idx = np.arange(k)

        flat = np.full((spec.t_length, NUM_CHANNELS), SYNTHETIC_BASELINE, dtype=np.float64)
        for slot, act in zip(slots_idx, acts):
            if rng.random() < spec.user_signature_strength:
                mask = user_masks[slot]
            else:
                mask = rng.random(NUM_CHANNELS) < SYNTHETIC_CHANNEL_FILL
            flat[:, mask] += SYNTHETIC_SIGNAL_AMPLITUDE * waves[act][:, None]
        if spec.noise_std > 0:
            flat += rng.normal(0.0, spec.noise_std, size=flat.shape)

        slot_names: list[str | None] = [None] * NUM_USER_SLOTS
        for slot, act in zip(slots_idx, acts):
            slot_names[slot] = ACTIVITIES[act]
        labels = SlotLabels(tuple(slot_names))
        sample_id = f"syn{spec.seed}_{i:0{width}d}"
        amplitude = flat.reshape(spec.t_length, *CSI_GRID_SHAPE).astype(np.float32)
        samples.append(
            CsiSample(
                sample_id=sample_id,
                band="5GHz",
                environment=environment,
                amplitude=amplitude,
                annotation=labels,
            )
        )
        entries.append(
            ManifestEntry(
                sample_id=sample_id,
                band="5GHz",
                environment=environment,
                labels=labels,
            )
        )
    return DatasetManifest(entries=entries), samples
