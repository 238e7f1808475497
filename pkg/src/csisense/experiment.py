"""Experiment orchestration: declarative configs, run directories, the five
pipeline stages (prepare / train / evaluate / analyze / report).

A config file fully determines a run: JSON with every key explicit (strict
schema, unknown or missing keys are errors — no defaults hidden in code).
Every output file embeds the config fingerprint; results live in per-run
directories keyed by that fingerprint and are never silently overwritten.
"""

from __future__ import annotations

import json
import os
import re
from pathlib import Path

import numpy as np

from .data import (
    BANDS,
    ENVIRONMENTS,
    DatasetManifest,
    SyntheticSpec,
    generate_synthetic,
    load_manifest,
    load_sample,
    load_wimans_manifest,
)
from .estimators import ActivityCountRegressor, IdentitySlotClassifier, load_estimator
from .labels import count_matrix, slot_code_matrix
from .metrics import (
    classification_metrics,
    counting_metrics,
    identity_invariance,
    per_activity_mae,
    per_user_count_breakdown,
)
from .splits import SplitManifest, loeo_splits, luo_splits, standard_split
from .training import fingerprint_of

DATASET_ROOT_ENV = "CSISENSE_DATASET_ROOT"

TASKS = ("counting", "identity")

_TRANSFORM_KEYS = {
    "target_length", "resolution", "interpolation", "warp_probability",
    "warp_scale_range", "warp_enabled", "standardize",
}
_TRAIN_KEYS = {
    "epochs", "batch_size", "weight_decay", "clip_max_norm",
    "lr_projection_peak", "lr_backbone_head_peak", "warmup_fraction",
    "schedule_by_epoch", "recalibrate_bn", "focal_gamma", "seed",
}
_SYNTHETIC_KEYS = {
    "kind", "n_samples", "t_length", "user_count_range", "signature_frequencies",
    "noise_std", "seed", "randomize_slots", "user_signature_strength",
}
_DIRECTORY_KEYS = {"kind", "root", "layout"}
_SPLIT_KEYS = {"seeds", "train_fraction"}
_EVALUATE_KEYS = {"checkpoint", "include_absent_class"}
_TOP_KEYS = {
    "task", "dataset", "band", "environment", "backbone", "pretrained",
    "channel_strategy", "transform", "train", "protocol", "split",
    "evaluate", "output_dir",
}


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


def _require_keys(section: dict, required: set, name: str) -> None:
    missing = sorted(required - section.keys())
    unknown = sorted(section.keys() - required)
    if missing:
        raise ConfigError(f"config section {name!r} missing keys: {missing}")
    if unknown:
        raise ConfigError(f"config section {name!r} has unknown keys: {unknown}")


def validate_config(raw: dict) -> dict:
    """Strict schema check; returns the config unchanged on success."""
    _require_keys(raw, _TOP_KEYS, "<top level>")
    if raw["task"] not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}")
    ds = raw["dataset"]
    kind = ds.get("kind")
    if kind == "synthetic":
        _require_keys(ds, _SYNTHETIC_KEYS, "dataset")
    elif kind == "directory":
        _require_keys(ds, _DIRECTORY_KEYS, "dataset")
        if ds["layout"] not in ("native", "wimans"):
            raise ConfigError("dataset.layout must be 'native' or 'wimans'")
    else:
        raise ConfigError("dataset.kind must be 'synthetic' or 'directory'")
    if raw["band"] not in BANDS:
        raise ConfigError(f"band must be one of {BANDS} (experiments never mix bands)")
    if raw["environment"] not in (*ENVIRONMENTS, "all"):
        raise ConfigError(f"environment must be one of {ENVIRONMENTS} or 'all'")
    _require_keys(raw["transform"], _TRANSFORM_KEYS, "transform")
    _require_keys(raw["train"], _TRAIN_KEYS, "train")
    if raw["protocol"] not in ("standard", "loeo", "luo"):
        raise ConfigError("protocol must be standard | loeo | luo")
    _require_keys(raw["split"], _SPLIT_KEYS, "split")
    _require_keys(raw["evaluate"], _EVALUATE_KEYS, "evaluate")
    if raw["evaluate"]["checkpoint"] not in ("last", "best"):
        raise ConfigError("evaluate.checkpoint must be 'last' or 'best'")
    return raw


def apply_overrides(config: dict, overrides) -> dict:
    """Apply `dotted.path=value` overrides; values parse as JSON, else string."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, value = item.partition("=")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"override path {key!r} not in config")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"override path {key!r} not in config")
        node[parts[-1]] = parsed
    return config


class Experiment:
    """One experiment = one validated config + its run directory."""

    def __init__(self, config: dict):
        self.config = validate_config(config)
        self.fingerprint = fingerprint_of(self.config)
        self.run_dir = Path(self.config["output_dir"]) / f"run-{self.fingerprint}"

    @classmethod
    def from_file(cls, path, overrides=None) -> "Experiment":
        config = json.loads(Path(path).read_text())
        return cls(apply_overrides(config, overrides))

    # -- dataset -------------------------------------------------------------

    def _dataset_root(self) -> Path:
        root = self.config["dataset"]["root"]
        if root is None:
            root = os.environ.get(DATASET_ROOT_ENV)
            if not root:
                raise ConfigError(
                    f"dataset.root is null and ${DATASET_ROOT_ENV} is unset"
                )
        root = Path(root)
        if not root.is_dir():
            raise ConfigError(f"dataset root is not a directory: {root}")
        return root

    def load_dataset(self):
        """Returns (filtered manifest, fetch) where fetch(ids) -> list[CsiSample]."""
        ds = self.config["dataset"]
        if ds["kind"] == "synthetic":
            spec = SyntheticSpec(
                n_samples=ds["n_samples"],
                t_length=ds["t_length"],
                user_count_range=tuple(ds["user_count_range"]),
                signature_frequencies=tuple(ds["signature_frequencies"]),
                noise_std=ds["noise_std"],
                seed=ds["seed"],
                randomize_slots=ds["randomize_slots"],
                user_signature_strength=ds["user_signature_strength"],
            )
            manifest, samples = generate_synthetic(spec)
            by_id = {s.sample_id: s for s in samples}

            def fetch(ids):
                return [by_id[i] for i in ids]
        else:
            loader = load_manifest if ds["layout"] == "native" else load_wimans_manifest
            manifest = loader(self._dataset_root())

            def fetch(ids, _manifest=manifest):
                return [load_sample(_manifest, i) for i in ids]

        env = self.config["environment"]
        filtered = manifest.filtered(
            band=self.config["band"],
            environment=None if env == "all" else env,
        )
        if len(filtered) == 0:
            raise ConfigError(
                f"no samples left after filtering band={self.config['band']} "
                f"environment={env}"
            )
        return filtered, fetch

    def make_splits(self, manifest: DatasetManifest) -> list[SplitManifest]:
        protocol = self.config["protocol"]
        if protocol == "standard":
            frac = self.config["split"]["train_fraction"]
            return [standard_split(manifest, seed, frac) for seed in self.config["split"]["seeds"]]
        if protocol == "loeo":
            return loeo_splits(manifest)
        return luo_splits(manifest)

    def make_estimator(self, seed_offset: int = 0):
        """Estimator for this config; seed_offset (the split index) makes the
        per-split runs independently initialised yet reproducible."""
        cfg = self.config
        cls = ActivityCountRegressor if cfg["task"] == "counting" else IdentitySlotClassifier
        t = cfg["transform"]
        tr = cfg["train"]
        return cls(
            backbone=cfg["backbone"],
            pretrained=cfg["pretrained"],
            channel_strategy=cfg["channel_strategy"],
            target_length=t["target_length"],
            resolution=t["resolution"],
            interpolation=t["interpolation"],
            warp_probability=t["warp_probability"],
            warp_scale_range=tuple(t["warp_scale_range"]),
            warp_enabled=t["warp_enabled"],
            standardize=t["standardize"],
            epochs=tr["epochs"],
            batch_size=tr["batch_size"],
            weight_decay=tr["weight_decay"],
            clip_max_norm=tr["clip_max_norm"],
            lr_projection_peak=tr["lr_projection_peak"],
            lr_backbone_head_peak=tr["lr_backbone_head_peak"],
            warmup_fraction=tr["warmup_fraction"],
            schedule_by_epoch=tr["schedule_by_epoch"],
            recalibrate_bn=tr["recalibrate_bn"],
            focal_gamma=tr["focal_gamma"],
            seed=tr["seed"] + seed_offset,
        )

    # -- run directory helpers -------------------------------------------

    @staticmethod
    def _slug(descriptor: str) -> str:
        return re.sub(r"[^A-Za-z0-9.=-]+", "_", descriptor).strip("_")

    def split_paths(self, splits) -> list[Path]:
        return [self.run_dir / "splits" / f"{self._slug(s.descriptor)}.txt" for s in splits]

    def _write_json(self, path: Path, payload: dict, force: bool = False) -> None:
        if path.exists() and not force:
            raise FileExistsError(
                f"{path} already exists; runs are append-only (use force to replace)"
            )
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {"fingerprint": self.fingerprint, **payload}
        path.write_text(json.dumps(payload, indent=2))


# -- stage implementations ---------------------------------------------------


def cmd_prepare(exp: Experiment, force: bool = False) -> dict:
    """Ingest or synthesise the dataset, write the summary and split manifests."""
    manifest, _ = exp.load_dataset()
    counts_env: dict[str, int] = {}
    counts_band: dict[str, int] = {}
    counts_users: dict[str, int] = {}
    for entry in manifest.entries:
        counts_env[entry.environment] = counts_env.get(entry.environment, 0) + 1
        counts_band[entry.band] = counts_band.get(entry.band, 0) + 1
        k = str(entry.labels.n_active)
        counts_users[k] = counts_users.get(k, 0) + 1
    splits = exp.make_splits(manifest)
    exp.run_dir.mkdir(parents=True, exist_ok=True)
    (exp.run_dir / "splits").mkdir(exist_ok=True)
    for split, path in zip(splits, exp.split_paths(splits)):
        if path.exists() and not force:
            raise FileExistsError(f"{path} already exists; runs are append-only")
        split.save(path)
    summary = {
        "n_samples": len(manifest),
        "per_environment": counts_env,
        "per_band": counts_band,
        "per_user_count": counts_users,
        "protocol": exp.config["protocol"],
        "splits": [
            {"descriptor": s.descriptor, "n_train": len(s.train_ids), "n_test": len(s.test_ids)}
            for s in splits
        ],
    }
    exp._write_json(exp.run_dir / "config.json", {"config": exp.config}, force=True)
    exp._write_json(exp.run_dir / "summary.json", summary, force=force)
    return summary


def _ensure_prepared(exp: Experiment, force: bool = False):
    if not (exp.run_dir / "summary.json").exists():
        cmd_prepare(exp, force=force)
    manifest, fetch = exp.load_dataset()
    splits = exp.make_splits(manifest)
    return manifest, fetch, splits


def cmd_train(exp: Experiment, force: bool = False) -> list[dict]:
    """Train one model per split; persist checkpoints and training logs."""
    _, fetch, splits = _ensure_prepared(exp, force=force)
    results = []
    for index, split in enumerate(splits):
        split_dir = exp.run_dir / "splits" / exp._slug(split.descriptor)
        log_path = split_dir / "training_log.json"
        if log_path.exists() and not force:
            raise FileExistsError(f"{log_path} already exists; runs are append-only")
        split_dir.mkdir(parents=True, exist_ok=True)
        train_samples = fetch(sorted(split.train_ids))
        test_samples = fetch(sorted(split.test_ids))
        estimator = exp.make_estimator(seed_offset=index)
        estimator.fit(train_samples, eval_set=(test_samples, None), checkpoint_dir=split_dir)
        estimator.training_log_.save(log_path)
        results.append(
            {
                "descriptor": split.descriptor,
                "checkpoint_last": str(split_dir / "checkpoint_last.pt"),
                "checkpoint_best": str(split_dir / "checkpoint_best.pt"),
                "training_log": str(log_path),
                "final_train_loss": estimator.training_log_.epochs[-1]["train_loss"],
            }
        )
    return results


def _metric_report_for(exp: Experiment, estimator, test_samples) -> dict:
    annotations = [s.annotation for s in test_samples]
    if exp.config["task"] == "counting":
        predicted = estimator.predict(test_samples)
        truths = count_matrix(annotations)
        report = counting_metrics(predicted, truths)
        report.per_activity_mae = per_activity_mae(predicted, truths).tolist()
        report.per_user_count = per_user_count_breakdown(predicted, truths, annotations, "counting")
    else:
        predicted = estimator.predict(test_samples)
        truths = slot_code_matrix(annotations)
        report = classification_metrics(
            predicted, truths,
            include_absent_class=exp.config["evaluate"]["include_absent_class"],
        )
        report.per_user_count = per_user_count_breakdown(predicted, truths, annotations, "identity")
    return report.to_dict()


def aggregate_metrics(split_reports: list[dict]) -> dict:
    """Mean and SD of every scalar metric across splits (None stays undefined)."""
    out: dict = {}
    names = split_reports[0]["scalars"].keys()
    for name in names:
        values = [r["scalars"][name] for r in split_reports]
        if any(v is None for v in values):
            out[name] = {"mean": None, "sd": None, "note": "undefined on >=1 split"}
        else:
            arr = np.asarray(values, dtype=np.float64)
            out[name] = {"mean": float(arr.mean()), "sd": float(arr.std())}
    return out


def cmd_evaluate(exp: Experiment, force: bool = False) -> dict:
    """Compute the full metric report per split plus the mean +/- SD aggregate."""
    _, fetch, splits = _ensure_prepared(exp, force=force)
    which = exp.config["evaluate"]["checkpoint"]
    split_records = []
    for split in splits:
        split_dir = exp.run_dir / "splits" / exp._slug(split.descriptor)
        ckpt = split_dir / f"checkpoint_{which}.pt"
        if not ckpt.exists():
            raise FileNotFoundError(f"missing checkpoint {ckpt}; run train first")
        estimator = load_estimator(ckpt)
        report = _metric_report_for(exp, estimator, fetch(sorted(split.test_ids)))
        record = {"descriptor": split.descriptor, "metrics": report}
        exp._write_json(split_dir / "metrics.json", record, force=force)
        split_records.append(record)
    run_record = {
        "task": exp.config["task"],
        "protocol": exp.config["protocol"],
        "checkpoint": which,
        "splits": split_records,
        "aggregate": aggregate_metrics([r["metrics"] for r in split_records]),
    }
    exp._write_json(exp.run_dir / "aggregate.json", run_record, force=force)
    return run_record


def cmd_analyze(exp: Experiment, checkpoint=None, force: bool = False) -> dict:
    """Feature-space identity-invariance analysis for one trained checkpoint."""
    manifest, fetch, splits = _ensure_prepared(exp, force=force)
    if checkpoint is None:
        which = exp.config["evaluate"]["checkpoint"]
        split_dir = exp.run_dir / "splits" / exp._slug(splits[0].descriptor)
        checkpoint = split_dir / f"checkpoint_{which}.pt"
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise FileNotFoundError(f"missing checkpoint {checkpoint}; run train first")
    estimator = load_estimator(checkpoint)
    samples = fetch(manifest.sample_ids())
    report = identity_invariance(estimator.extract_features, samples)
    payload = {
        "task": exp.config["task"],
        "checkpoint": str(checkpoint),
        "invariance": report.to_dict(),
    }
    exp._write_json(exp.run_dir / "invariance.json", payload, force=force)
    return payload


# -- reporting ----------------------------------------------------------------


def render_table(title: str, headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h))
              for i, h in enumerate(headers)]
    def fmt(cells):
        return " | ".join(str(c).ljust(w) for c, w in zip(cells, widths))
    sep = "-+-".join("-" * w for w in widths)
    lines = [title, fmt(headers), sep]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


def _cell(agg: dict, name: str, scale: float = 1.0, digits: int = 4) -> str:
    entry = agg.get(name)
    if entry is None or entry.get("mean") is None:
        return "undefined"
    return f"{entry['mean'] * scale:.{digits}f} ± {entry['sd'] * scale:.{digits}f}"


_METRIC_COLUMNS = {
    "counting": [("cell_accuracy", "Cell Acc. (%)", 100.0, 2), ("exact_match", "Exact Match (%)", 100.0, 2),
                 ("mae", "MAE", 1.0, 4), ("r2", "R2 (%)", 100.0, 2)],
    "identity": [("accuracy", "Acc. (%)", 100.0, 2), ("macro_precision", "Prec. (%)", 100.0, 2),
                 ("macro_recall", "Rec. (%)", 100.0, 2), ("macro_f1", "Macro-F1 (%)", 100.0, 2)],
}


def _load_run(run_dir: Path) -> dict:
    record = {"run_dir": run_dir}
    for name in ("config", "aggregate", "invariance"):
        path = run_dir / f"{name}.json"
        if path.exists():
            record[name] = json.loads(path.read_text())
    if "config" not in record:
        raise FileNotFoundError(f"{run_dir} has no config.json; not a run directory")
    # Per-split metric files, for re-aggregation checks.
    record["split_metrics"] = []
    splits_dir = run_dir / "splits"
    if splits_dir.is_dir():
        for sub in sorted(splits_dir.iterdir()):
            path = sub / "metrics.json"
            if path.is_file():
                record["split_metrics"].append(json.loads(path.read_text()))
    return record


def _check_record_consistency(record: dict) -> None:
    fp = record["config"]["fingerprint"]
    agg = record.get("aggregate")
    if agg is None:
        return
    if agg["fingerprint"] != fp:
        raise ValueError(
            f"{record['run_dir']}: aggregate fingerprint {agg['fingerprint']} does not "
            f"match config fingerprint {fp}"
        )
    for sm in record["split_metrics"]:
        if sm["fingerprint"] != fp:
            raise ValueError(
                f"{record['run_dir']}: split metrics fingerprint {sm['fingerprint']} "
                f"does not match config fingerprint {fp}"
            )
    # Aggregates must be recomputable from the per-split records.
    if record["split_metrics"]:
        recomputed = aggregate_metrics([sm["metrics"] for sm in record["split_metrics"]])
        for name, entry in recomputed.items():
            stored = agg["aggregate"][name]
            for field in ("mean", "sd"):
                a, b = entry.get(field), stored.get(field)
                both_numbers = a is not None and b is not None
                if (a is None) != (b is None) or (both_numbers and abs(a - b) > 1e-9):
                    raise ValueError(
                        f"{record['run_dir']}: stored aggregate for {name!r} does not match "
                        "re-aggregation of per-split records"
                    )


def _run_label(record: dict) -> str:
    cfg = record["config"]["config"]
    return f"{cfg['backbone']} env={cfg['environment']} band={cfg['band']}"


_ABLATION_KEYS = (
    ("pretrained", lambda c: c["pretrained"]),
    ("channel", lambda c: c["channel_strategy"]),
    ("res", lambda c: c["transform"]["resolution"]),
    ("interp", lambda c: c["transform"]["interpolation"]),
    ("warp", lambda c: c["transform"]["warp_enabled"]),
    ("standardize", lambda c: c["transform"]["standardize"]),
)


def _distinguishing_labels(members: list[dict]) -> list[str]:
    """Row labels for a comparison table; ablation knobs that differ across
    the group are appended so rows stay distinguishable."""
    configs = [m["config"]["config"] for m in members]
    varying = [
        (name, get) for name, get in _ABLATION_KEYS
        if len({str(get(c)) for c in configs}) > 1
    ]
    labels = []
    for member, cfg in zip(members, configs):
        label = _run_label(member)
        if varying:
            label += " [" + " ".join(f"{n}={get(cfg)}" for n, get in varying) + "]"
        labels.append(label)
    return labels


def cmd_report(run_dirs, out_dir=None) -> str:
    """Render paper-style tables and numeric plot series from run directories."""
    records = [_load_run(Path(d)) for d in run_dirs]
    if not records:
        return "no runs\n"
    for record in records:
        _check_record_consistency(record)

    chunks: list[str] = []
    csv_blobs: dict[str, str] = {}
    groups: dict[tuple, list[dict]] = {}
    for record in records:
        if "aggregate" not in record:
            continue
        cfg = record["config"]["config"]
        groups.setdefault((cfg["task"], cfg["protocol"]), []).append(record)

    for (task, protocol), members in sorted(groups.items()):
        columns = _METRIC_COLUMNS[task]
        if protocol in ("luo", "loeo"):
            # Per-split rows plus the average row, as in the per-protocol tables.
            for record in members:
                rows = []
                for sm in record["split_metrics"]:
                    scalars = sm["metrics"]["scalars"]
                    rows.append([sm["descriptor"]] + [
                        ("undefined" if scalars[k] is None else f"{scalars[k] * scale:.{digits}f}")
                        for k, _, scale, digits in columns
                    ])
                agg = record["aggregate"]["aggregate"]
                rows.append(["Avg."] + [_cell(agg, k, scale, digits) for k, _, scale, digits in columns])
                chunks.append(render_table(
                    f"{protocol.upper()} — {task} — {_run_label(record)}",
                    ["Split"] + [label for _, label, _, _ in columns],
                    rows,
                ))
        else:
            rows = []
            for record, label in zip(members, _distinguishing_labels(members)):
                agg = record["aggregate"]["aggregate"]
                rows.append([label] + [
                    _cell(agg, k, scale, digits) for k, _, scale, digits in columns
                ])
            chunks.append(render_table(
                f"STANDARD — {task} (mean ± SD across splits)",
                ["Run"] + [label for _, label, _, _ in columns],
                rows,
            ))

    inv_rows = []
    for record in records:
        if "invariance" in record:
            inv = record["invariance"]["invariance"]
            inv_rows.append([
                _run_label(record), record["invariance"]["task"],
                f"{inv['euclidean_mean']:.2f} ± {inv['euclidean_sd']:.2f}",
                f"{inv['cosine_mean']:.2f} ± {inv['cosine_sd']:.2f}",
            ])
    if inv_rows:
        chunks.append(render_table(
            "FEATURE-SPACE IDENTITY INVARIANCE",
            ["Run", "Task", "Euclidean", "Cosine"],
            inv_rows,
        ))

    # Plot data: per-activity MAE and per-user-count curves.
    from .labels import ACTIVITIES

    pa_lines = ["run,activity,mae"]
    uc_lines = ["run,task,user_count,metric,value,sd,n"]
    for record in records:
        if "aggregate" not in record:
            continue
        label = _run_label(record)
        for sm in record["split_metrics"]:
            metrics = sm["metrics"]
            if metrics.get("per_activity_mae"):
                for name, value in zip(ACTIVITIES, metrics["per_activity_mae"]):
                    pa_lines.append(f"{label} [{sm['descriptor']}],{name},{value:.6f}")
            if metrics.get("per_user_count"):
                for count, entry in sorted(metrics["per_user_count"].items(), key=lambda kv: int(kv[0])):
                    uc_lines.append(
                        f"{label} [{sm['descriptor']}],{metrics['task']},{count},"
                        f"{entry['metric']},{entry['value']:.6f},{entry['sd']:.6f},{entry['n']}"
                    )
    if len(pa_lines) > 1:
        csv_blobs["per_activity_mae.csv"] = "\n".join(pa_lines) + "\n"
    if len(uc_lines) > 1:
        csv_blobs["per_user_count.csv"] = "\n".join(uc_lines) + "\n"

    text = "\n".join(chunks) if chunks else "no runs\n"
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "tables.txt").write_text(text)
        for name, blob in csv_blobs.items():
            (out_dir / name).write_text(blob)
    return text
