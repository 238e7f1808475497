"""Train/test split construction for the three evaluation protocols.

standard — stratified random partition (environment x active-user count).
loeo     — leave one environment out: test on the held-out environment.
luo      — leave users out: train on samples whose occupants all belong to
           one user triple, test on the disjoint triple; samples mixing the
           two triples are discarded (any reassignment would leak the other
           group's identity signatures).

Split manifests serialize to a line-oriented text format so disjointness can
be audited by external tools.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from pathlib import Path

from .data import ENVIRONMENTS, DatasetManifest

PROTOCOLS = ("standard", "loeo", "luo")

# Held-out user triples, fixed by the evaluation protocol.
LUO_COMBOS = (
    ((1, 2, 3), (4, 5, 6)),
    ((1, 2, 4), (3, 5, 6)),
    ((1, 2, 5), (3, 4, 6)),
)


@dataclass
class SplitManifest:
    protocol: str
    descriptor: str
    train_ids: set[str]
    test_ids: set[str]

    def __post_init__(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        overlap = self.train_ids & self.test_ids
        if overlap:
            raise ValueError(f"train/test overlap: {sorted(overlap)[:5]} ...")

    def save(self, path) -> None:
        lines = [f"protocol: {self.protocol}", f"descriptor: {self.descriptor}", "[train]"]
        lines += sorted(self.train_ids)
        lines.append("[test]")
        lines += sorted(self.test_ids)
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        lines = Path(path).read_text().splitlines()
        if len(lines) < 3 or not lines[0].startswith("protocol: "):
            raise ValueError(f"malformed split file: {path}")
        protocol = lines[0].removeprefix("protocol: ")
        descriptor = lines[1].removeprefix("descriptor: ")
        section = None
        train: set[str] = set()
        test: set[str] = set()
        for line in lines[2:]:
            if line == "[train]":
                section = train
            elif line == "[test]":
                section = test
            elif line:
                if section is None:
                    raise ValueError(f"sample id before any section in {path}")
                section.add(line)
        return cls(protocol=protocol, descriptor=descriptor, train_ids=train, test_ids=test)


def _stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.md5(text.encode()).digest()[:8], "big")


def _largest_remainder(quotas: dict, total: int, caps: dict) -> dict:
    """Integer allocation matching `total` as closely as the caps allow."""
    counts = {k: min(int(q), caps[k]) for k, q in quotas.items()}
    order = sorted(quotas, key=lambda k: (quotas[k] - int(quotas[k]), k), reverse=True)
    shortfall = total - sum(counts.values())
    while shortfall > 0:
        progressed = False
        for key in order:
            if shortfall <= 0:
                break
            if counts[key] < caps[key]:
                counts[key] += 1
                shortfall -= 1
                progressed = True
        if not progressed:
            break
    return counts


def standard_split(
    manifest: DatasetManifest, seed: int, train_fraction: float = 0.8
) -> SplitManifest:
    """Random partition stratified by (environment, active-user count).

    Deterministic per seed.  Test slots are allocated hierarchically by
    largest remainder — first across environments, then across user-count
    strata within each — so both the global and the per-environment test
    fractions track the target closely.  Strata with fewer than 2 samples
    go wholly to train (with a warning).
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    import numpy as np

    rng = np.random.default_rng(seed)
    strata: dict[tuple, list[str]] = {}
    for entry in manifest.entries:
        key = (entry.environment, entry.labels.n_active)
        strata.setdefault(key, []).append(entry.sample_id)

    eligible = {}
    for key in sorted(strata):
        ids = strata[key]
        if len(ids) < 2:
            warnings.warn(
                f"stratum {key} has {len(ids)} sample(s); assigned wholly to train",
                stacklevel=2,
            )
        else:
            eligible[key] = ids

    test_fraction = 1.0 - train_fraction
    env_sizes = {}
    for (env, _), ids in eligible.items():
        env_sizes[env] = env_sizes.get(env, 0) + len(ids)
    n_eligible = sum(env_sizes.values())
    target_test = round(test_fraction * n_eligible)
    env_caps = {
        env: sum(len(ids) - 1 for (e, _), ids in eligible.items() if e == env)
        for env in env_sizes
    }
    env_alloc = _largest_remainder(
        {env: size * test_fraction for env, size in env_sizes.items()},
        target_test, env_caps,
    )
    counts: dict[tuple, int] = {}
    for env, allocation in env_alloc.items():
        env_strata = {k: v for k, v in eligible.items() if k[0] == env}
        counts.update(_largest_remainder(
            {k: len(v) * test_fraction for k, v in env_strata.items()},
            allocation,
            {k: len(v) - 1 for k, v in env_strata.items()},
        ))

    train_ids, test_ids = set(), set()
    for key in sorted(strata):
        ids = sorted(strata[key])
        if key not in eligible:
            train_ids.update(ids)
            continue
        perm = rng.permutation(len(ids))
        n_test = counts[key]
        test_ids.update(ids[i] for i in perm[:n_test])
        train_ids.update(ids[i] for i in perm[n_test:])
    return SplitManifest(
        protocol="standard",
        descriptor=f"seed={seed} train_fraction={train_fraction}",
        train_ids=train_ids,
        test_ids=test_ids,
    )


def loeo_splits(manifest: DatasetManifest) -> list[SplitManifest]:
    """One split per environment: test on it, train on the other two."""
    by_env: dict[str, set[str]] = {env: set() for env in ENVIRONMENTS}
    for entry in manifest.entries:
        by_env[entry.environment].add(entry.sample_id)
    empty = [env for env, ids in by_env.items() if not ids]
    if empty:
        raise ValueError(f"environments with zero samples: {empty}")
    splits = []
    for env in ENVIRONMENTS:
        train = set().union(*(ids for e, ids in by_env.items() if e != env))
        splits.append(
            SplitManifest(
                protocol="loeo",
                descriptor=f"held_out={env}",
                train_ids=train,
                test_ids=by_env[env],
            )
        )
    return splits


def _present_users(entry) -> set[int]:
    return {slot + 1 for slot in entry.labels.active_slots()}


def luo_splits(manifest: DatasetManifest) -> list[SplitManifest]:
    """Three user-disjoint splits over the fixed triples.

    A sample trains (tests) only if every present user belongs to the train
    (test) triple; samples mixing the triples are dropped.  Zero-user
    samples carry no identity, so they split 50/50 per combo by a stable
    hash of (descriptor, sample_id) — duplicating them on both sides would
    be sample-level leakage.
    """
    splits = []
    for train_users, test_users in LUO_COMBOS:
        descriptor = "-".join(map(str, train_users)) + " / " + "-".join(map(str, test_users))
        train_ids, test_ids = set(), set()
        for entry in manifest.entries:
            users = _present_users(entry)
            bad = users - set(range(1, 7))
            if bad:
                raise ValueError(f"sample {entry.sample_id!r} has user ids {bad} outside 1..6")
            if not users:
                side = _stable_hash(f"{descriptor}:{entry.sample_id}") % 2
                (train_ids if side == 0 else test_ids).add(entry.sample_id)
            elif users <= set(train_users):
                train_ids.add(entry.sample_id)
            elif users <= set(test_users):
                test_ids.add(entry.sample_id)
            # else: mixes the two triples; excluded from both sides
        splits.append(
            SplitManifest(
                protocol="luo",
                descriptor=descriptor,
                train_ids=train_ids,
                test_ids=test_ids,
            )
        )
    return splits


def audit_disjoint_users(manifest: DatasetManifest, split: SplitManifest) -> tuple[set, set]:
    """Users appearing on each side of a split (for auditing LUO disjointness)."""
    train_users: set[int] = set()
    test_users: set[int] = set()
    for entry in manifest.entries:
        if entry.sample_id in split.train_ids:
            train_users |= _present_users(entry)
        elif entry.sample_id in split.test_ids:
            test_users |= _present_users(entry)
    return train_users, test_users
