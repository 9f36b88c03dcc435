"""Experiment configuration: schema validation, defaults, hashing, manifests.

The JSON schema shipped with the package is the single source of truth for
defaults and allowed keys; unknown keys fail validation at every nesting
level. A config is canonicalized by filling every default and applying
variant normalization, and the run hash is the sha256 of the canonical
sorted-keys JSON, so two configs that run identically hash identically.
"""

import copy
import hashlib
import json
import os
import time
from importlib import resources

import jsonschema

from . import data as data_mod
from . import models, objective, training

ARTIFACT_VERSION = "0.1.0"


class ConfigError(ValueError):
    """Invalid or unusable experiment configuration."""


def load_schema() -> dict:
    with resources.files("tssl").joinpath("config_schema.json").open("r") as f:
        return json.load(f)


def load_report_schema() -> dict:
    with resources.files("tssl").joinpath("report_schema.json").open("r") as f:
        return json.load(f)


_SCHEMA = None
_REPORT_SCHEMA = None


def _schema() -> dict:
    global _SCHEMA
    if _SCHEMA is None:
        _SCHEMA = load_schema()
    return _SCHEMA


def validate_report(kind: str, payload: dict) -> None:
    """Check an emitted report against its published schema."""
    global _REPORT_SCHEMA
    if _REPORT_SCHEMA is None:
        _REPORT_SCHEMA = load_report_schema()
    defs = _REPORT_SCHEMA["$defs"]
    if kind not in defs:
        raise ConfigError(f"no report schema named {kind!r}")
    schema = {"$defs": defs, **defs[kind]}
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(payload),
                    key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{kind} report invalid at {where}: {e.message}")


def _apply_defaults(instance, schema):
    """Fill in schema defaults recursively (objects only; desk configs
    never default array items)."""
    if schema.get("type") == "object" and isinstance(instance, dict):
        for key, sub in schema.get("properties", {}).items():
            if key not in instance and "default" in sub:
                instance[key] = copy.deepcopy(sub["default"])
            if key in instance:
                _apply_defaults(instance[key], sub)
    return instance


def validate_config(config: dict) -> None:
    """Schema validation plus the cross-field checks a schema cannot say."""
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {e.message}")

    sched = config.get("schedule", {})
    start = sched.get("ramp_start_frac", 0.5)
    end = sched.get("ramp_end_frac", 0.75)
    if not start < end:
        raise ConfigError(
            f"config invalid at schedule: ramp_start_frac ({start}) must be "
            f"less than ramp_end_frac ({end})")
    aug = config.get("augment", {})
    if aug.get("severity_min", 1) > aug.get("severity_max", 3):
        raise ConfigError("config invalid at augment: severity_min exceeds severity_max")
    if aug.get("crop_scale_min", 0.6) > aug.get("crop_scale_max", 1.0):
        raise ConfigError("config invalid at augment: crop_scale_min exceeds crop_scale_max")
    ds = config.get("dataset", {})
    if ds.get("source") == "directory":
        for key in ("train_path", "test_path"):
            if not ds.get(key):
                raise ConfigError(f"config invalid at dataset: source=directory requires {key}")


def canonicalize(config: dict) -> dict:
    """Validate, fill every default, and normalize variant constraints."""
    out = copy.deepcopy(config)
    validate_config(out)
    _apply_defaults(out, _schema())
    if out["variant"] == "scalar_uncertainty":
        # A single scalar uncertainty channel is exactly the T = 1 model.
        out["model"]["num_factors"] = 1
    if out["dataset"]["data_seed"] is None:
        out["dataset"]["data_seed"] = out["seed"]
    validate_config(out)
    return out


def canonical_json(config: dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(canonicalize(config)).encode()).hexdigest()


def load_config(path: str) -> dict:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return raw


# ---------------------------------------------------------------------------
# Builders from a canonical config


def build_model_config(config: dict) -> models.ModelConfig:
    m = config["model"]
    return models.ModelConfig(
        image_size=m["image_size"],
        conv_widths=tuple(m["conv_widths"]),
        backbone_dim=m["backbone_dim"],
        projector_dim=m["projector_dim"],
        num_factors=m["num_factors"],
        factor_dim=m["factor_dim"],
        num_prototypes=m["num_prototypes"],
        prior_strength=m["prior_strength"],
    )


def build_settings(config: dict, threads: int = 1) -> training.TrainSettings:
    cfg = config
    t = cfg["train"]
    s = cfg["schedule"]
    a = cfg["augment"]
    w = cfg["weights"]
    schedule = objective.ScheduleState(
        total_epochs=t["epochs"],
        ramp_start_frac=s["ramp_start_frac"],
        ramp_end_frac=s["ramp_end_frac"],
        lambda_sel_max=s["lambda_sel_max"],
        lambda_min_start=s["lambda_min_start"],
        lambda_min_end=s["lambda_min_end"],
        lambda_min_anneal=s["lambda_min_anneal"],
    )
    augment = data_mod.AugmentConfig(
        out_size=cfg["model"]["image_size"],
        crop_scale_min=a["crop_scale_min"],
        crop_scale_max=a["crop_scale_max"],
        corruption_prob=a["corruption_prob"],
        eligible_families=tuple(a["eligible_families"]),
        severity_min=a["severity_min"],
        severity_max=a["severity_max"],
    )
    return training.TrainSettings(
        variant=cfg["variant"],
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        learning_rate=t["learning_rate"],
        momentum=t["momentum"],
        weight_decay=t["weight_decay"],
        seed=cfg["seed"],
        checkpoint_every=t["checkpoint_every"],
        ntxent_tau=t["ntxent_tau"],
        anchor_tau=t["anchor_tau"],
        threads=threads,
        model=build_model_config(cfg),
        weights=objective.LossWeights(
            anchor=w["anchor"], diversity=w["diversity"],
            aux=w["aux"], kl=w["kl"]),
        schedule=schedule,
        augment=augment,
    )


def load_dataset_pair(config: dict):
    """(train, test) datasets for a canonical config."""
    ds = config["dataset"]
    size = config["model"]["image_size"]
    if ds["source"] == "synthetic":
        train = data_mod.generate_synthetic_dataset(
            num_samples=ds["num_train"], num_classes=ds["num_classes"],
            size=size, seed=ds["data_seed"], split="train")
        test = data_mod.generate_synthetic_dataset(
            num_samples=ds["num_test"], num_classes=ds["num_classes"],
            size=size, seed=ds["data_seed"], split="test")
    else:
        train = data_mod.load_dataset(ds["train_path"])
        test = data_mod.load_dataset(ds["test_path"])
        for name, d in (("train", train), ("test", test)):
            if d.images.shape[2] != size or d.images.shape[3] != size:
                raise ConfigError(
                    f"dataset invalid: {name} images are "
                    f"{d.images.shape[2]}x{d.images.shape[3]} but the model "
                    f"expects {size}x{size}")
    return train, test


# ---------------------------------------------------------------------------
# Run manifest


def _inventory_entry(root: str, rel: str) -> dict:
    path = os.path.join(root, rel)
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return {"path": rel, "bytes": os.path.getsize(path), "sha256": digest.hexdigest()}


def write_manifest(out_dir: str, config: dict, files: list, command: str) -> str:
    """Write manifest.json describing one finished run; returns its path."""
    canon = canonicalize(config)
    manifest = {
        "artifact_version": ARTIFACT_VERSION,
        "command": command,
        "config": canon,
        "config_hash": config_hash(config),
        "created_unix": time.time(),
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "files": [_inventory_entry(out_dir, rel) for rel in sorted(files)],
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path
