"""Experiment configs and the multi-seed training pipeline behind ``margin-lab train``."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .data import Dataset, ImbalanceProfile, load_csv_dataset, synth_gaussian_blobs
from .evaluation import dump_features
from .losses import LossConfig, compute_margin_table
from .numerics import RandomSource
from .reweighting import ReweightConfig
from .trainer import ModelParams, RunReport, TrainConfig, default_milestones, train_run

OUTPUT_ROOT_ENV = "MARGIN_LAB_OUTPUT_ROOT"

# Balanced CE test accuracy on the reference blobs is about 0.92 at this separation.
REFERENCE_SEPARATION = 3.0

_int = {"type": "integer"}

SYNTH_DATA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "classes", "nmax", "ratio", "separation"],
    "properties": {
        "kind": {"enum": ["longtail", "step"]},
        "classes": {"type": "integer", "minimum": 2},
        "nmax": {"type": "integer", "minimum": 1},
        "ratio": {"type": "number", "minimum": 1},
        "dims": {"type": "integer", "minimum": 2},
        "separation": {"type": "number", "exclusiveMinimum": 0},
        "std": {"type": "number", "minimum": 0},
        "test_per_class": {"type": "integer", "minimum": 1},
        "seed": {"type": ["integer", "null"], "minimum": 0},
    },
}

CSV_DATA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["csv"],
    "properties": {
        "csv": {"type": "string"},
        "test_csv": {"type": ["string", "null"]},
        "header": {"type": "boolean"},
        "classes": {"type": "integer", "minimum": 2},
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["data", "loss", "train", "output_dir", "seeds"],
    "properties": {
        "data": {"oneOf": [SYNTH_DATA, CSV_DATA]},
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "required": ["variant"],
            "properties": {
                "variant": {"enum": ["ce", "ldam", "elm"]},
                "s": {"type": "number", "exclusiveMinimum": 0},
                "lambda": {"type": "number", "minimum": 0},
                "M": {"type": "number", "exclusiveMinimum": 0},
                "margin_mode": {"enum": ["normalized", "literal"]},
                "use_target_margin": {"type": "boolean"},
                "scale_mode": {"enum": ["all", "target_only"]},
            },
        },
        "reweight": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "beta": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "defer_epoch": {"type": ["integer", "null"], "minimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "required": ["epochs"],
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "base_lr": {"type": "number", "minimum": 0},
                "momentum": {"type": "number", "minimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "warmup_epochs": {"type": "integer", "minimum": 0},
                "milestones": {"type": ["array", "null"], "items": _int},
                "decay_factor": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "hidden": {"type": ["integer", "null"], "minimum": 0},
                "cosine": {"type": "boolean"},
            },
        },
        "output_dir": {"type": "string"},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
    },
}

DEFAULTS = {
    "synth": {"dims": 2, "std": 1.0, "test_per_class": 500, "seed": None},
    "csv": {"test_csv": None, "header": False},
    "loss": {"s": 30.0, "lambda": 0.5, "M": 0.5, "margin_mode": "normalized",
             "use_target_margin": True, "scale_mode": "all"},
    "reweight": {"enabled": False, "beta": 0.9999, "defer_epoch": None},
    "train": {"batch_size": 128, "base_lr": 0.1, "momentum": 0.9, "weight_decay": 2e-4,
              "warmup_epochs": 5, "milestones": None, "decay_factor": 0.01, "hidden": None,
              "cosine": True},
}


class ConfigError(ValueError):
    pass


def _path(err: jsonschema.ValidationError) -> str:
    return ".".join(["config", *(str(p) for p in err.absolute_path)])


def validate_config(raw: dict) -> dict:
    """Check ``raw`` against the schema and return a copy with defaults filled in."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for err in errors:
            # oneOf failures carry the useful message in the closest sub-error
            best = jsonschema.exceptions.best_match([err]) if err.context else err
            lines.append(f"{_path(best)}: {best.message}")
        raise ConfigError("; ".join(lines))
    cfg = copy.deepcopy(raw)
    kind = "csv" if "csv" in cfg["data"] else "synth"
    cfg["data"] = {**DEFAULTS[kind], **cfg["data"]}
    for section in ("loss", "reweight", "train"):
        cfg[section] = {**DEFAULTS[section], **cfg.get(section, {})}
    epochs = cfg["train"]["epochs"]
    if cfg["train"]["milestones"] is None:
        cfg["train"]["milestones"] = list(default_milestones(epochs))
    ms = cfg["train"]["milestones"]
    if any(b <= a for a, b in zip(ms, ms[1:])) or any(not 0 <= m < epochs for m in ms):
        raise ConfigError(f"config.train.milestones: must be strictly increasing within [0, {epochs}), got {ms}")
    if cfg["reweight"]["defer_epoch"] is None:
        cfg["reweight"]["defer_epoch"] = ms[0] if ms else 0
    return cfg


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return validate_config(raw)


def resolve_output(path) -> Path:
    """Relative output paths land under ``$MARGIN_LAB_OUTPUT_ROOT`` when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def synthetic_split(data_cfg: dict, seed: int) -> tuple[Dataset, Dataset]:
    """Imbalanced training blobs and a balanced test draw from the same class means."""
    profile = ImbalanceProfile(data_cfg["kind"], data_cfg["nmax"], data_cfg["ratio"], data_cfg["classes"])
    c, d = data_cfg["classes"], data_cfg["dims"]
    rng = RandomSource(seed)
    sep, std = data_cfg["separation"], data_cfg["std"]
    train = synth_gaussian_blobs(c, d, profile.counts(), sep, std, rng.child(10))
    test = synth_gaussian_blobs(c, d, np.full(c, data_cfg["test_per_class"]), sep, std, rng.child(11))
    return train, test


def load_data(cfg: dict, seed: int) -> tuple[Dataset, Dataset]:
    data_cfg = cfg["data"]
    if "csv" in data_cfg:
        classes = data_cfg.get("classes")
        train = load_csv_dataset(data_cfg["csv"], data_cfg["header"], classes)
        test = train
        if data_cfg["test_csv"]:
            test = load_csv_dataset(data_cfg["test_csv"], data_cfg["header"], train.num_classes)
        return train, test
    data_seed = data_cfg["seed"] if data_cfg["seed"] is not None else seed
    return synthetic_split(data_cfg, data_seed)


def build_train_config(cfg: dict, seed: int, counts) -> TrainConfig:
    lc, rc, tc = cfg["loss"], cfg["reweight"], cfg["train"]
    margins = None
    if lc["variant"] != "ce":
        margins = compute_margin_table(counts, lc["M"], lc["margin_mode"])
    loss = LossConfig(
        variant=lc["variant"], s=lc["s"], lam=lc["lambda"], use_target_margin=lc["use_target_margin"],
        margins=margins, scale_mode=lc["scale_mode"],
    )
    reweight = ReweightConfig(rc["beta"], rc["defer_epoch"]) if rc["enabled"] else None
    return TrainConfig(
        epochs=tc["epochs"], batch_size=tc["batch_size"], base_lr=tc["base_lr"], momentum=tc["momentum"],
        weight_decay=tc["weight_decay"], warmup_epochs=tc["warmup_epochs"],
        milestones=tuple(tc["milestones"]), decay_factor=tc["decay_factor"], seed=seed,
        loss=loss, reweight=reweight, hidden=tc["hidden"], cosine=tc["cosine"],
    )


@dataclass
class SeedResult:
    seed: int
    params: ModelParams
    report: RunReport
    train_counts: np.ndarray


def run_seed(cfg: dict, seed: int) -> SeedResult:
    train, test = load_data(cfg, seed)
    counts = train.counts
    if np.any(counts == 0):
        raise ConfigError(f"training data has empty classes: counts {counts.tolist()}")
    tcfg = build_train_config(cfg, seed, counts)
    params, report = train_run(train, tcfg, test)
    return SeedResult(seed, params, report, counts)


def _mean_std(values) -> dict:
    arr = np.array([np.nan if v is None else v for v in values], dtype=np.float64)
    arr = arr[~np.isnan(arr)]
    if arr.size == 0:
        return {"mean": None, "std": None}
    std = float(arr.std(ddof=1)) if arr.size > 1 else None
    return {"mean": float(arr.mean()), "std": std}


def aggregate(results: list[SeedResult]) -> dict:
    """Seed-averaged metrics: arithmetic mean and sample standard deviation."""
    finals = [r.report.final.to_dict() for r in results]
    ks = list(finals[0]["topk"])
    num_classes = len(finals[0]["class_recall"])
    return {
        "seeds": [r.seed for r in results],
        "train_counts": results[0].train_counts.tolist(),
        "topk": {k: _mean_std([f["topk"][k] for f in finals]) for k in ks},
        "balanced_accuracy": _mean_std([f["balanced_accuracy"] for f in finals]),
        "class_recall": [_mean_std([f["class_recall"][c] for f in finals]) for c in range(num_classes)],
        "group_accuracy": {
            g: _mean_std([f["group_accuracy"][g] for f in finals]) for g in ("frequent", "rare")
        },
    }


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def run_experiment(cfg: dict) -> dict:
    """Train every seed and write per-seed artifacts plus ``summary.json``.

    Layout under ``output_dir``: ``seed_<n>/{report.json, eval.json,
    model.json, features.csv}`` and ``summary.json``.
    """
    out = resolve_output(cfg["output_dir"])
    results = [run_seed(cfg, seed) for seed in cfg["seeds"]]
    out.mkdir(parents=True, exist_ok=True)
    for res in results:
        seed_dir = out / f"seed_{res.seed}"
        seed_dir.mkdir(exist_ok=True)
        _write(seed_dir / "report.json", res.report.to_json())
        _write(seed_dir / "eval.json", res.report.final.to_json())
        _write(seed_dir / "model.json", json.dumps(res.params.to_dict()) + "\n")
        train, _ = load_data(cfg, res.seed)
        dump_features(res.params, train, seed_dir / "features.csv")
    summary = aggregate(results)
    _write(out / "summary.json", json.dumps(summary, indent=2) + "\n")
    return summary


def load_model(path) -> ModelParams:
    return ModelParams.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def rarest_recall(recall, counts, n: int = 2) -> float:
    """Mean recall over the ``n`` classes with the fewest training samples."""
    recall = np.asarray(recall, dtype=np.float64)
    rarest = np.argsort(np.asarray(counts), kind="stable")[:n]
    return float(np.mean(recall[rarest]))


def reference_config(variant: str, drw: bool, output_dir: str = "runs/reference",
                     seeds=(0, 1, 2, 3, 4), ratio: float = 100.0) -> dict:
    """The desk-scale ordering experiment: 5 long-tailed 2-D blobs, cosine head, 60 epochs."""
    return validate_config({
        "data": {"kind": "longtail", "classes": 5, "nmax": 1000, "ratio": ratio, "dims": 2,
                 "separation": REFERENCE_SEPARATION, "std": 1.0, "test_per_class": 500},
        "loss": {"variant": variant, "s": 30.0, "lambda": 0.5, "M": 0.5},
        "reweight": {"enabled": drw, "beta": 0.9999},
        "train": {"epochs": 60, "cosine": True},
        "output_dir": output_dir,
        "seeds": list(seeds),
    })


def run_summaries(cfg: dict) -> list[SeedResult]:
    """Train every seed without writing files."""
    return [run_seed(cfg, seed) for seed in cfg["seeds"]]


def seed_recalls(results: list[SeedResult]) -> list[np.ndarray]:
    return [np.array([np.nan if v is None else v for v in r.report.final.to_dict()["class_recall"]])
            for r in results]


def summarize_rarest(results: list[SeedResult], n: int = 2) -> float:
    """Seed-averaged mean recall of the ``n`` rarest classes."""
    return float(np.mean([rarest_recall(rec, r.train_counts, n) for rec, r in zip(seed_recalls(results), results)]))
