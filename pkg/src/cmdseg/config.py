"""JSON experiment configuration with strict schema validation.

Unknown keys are rejected at every level so typos fail fast instead of
silently running with defaults.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .synthdata import DatasetConfig, LayoutConfig, ModalityProfile
from .trainer import TrainingConfig


class ConfigError(ValueError):
    """Malformed or schema-violating experiment configuration."""


@dataclass
class ArchSection:
    name: str = "dilated-mini"
    norm: str = "batch"
    input_channels: int = 1


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    arch: ArchSection = field(default_factory=ArchSection)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    data_dir: str | None = None
    out_dir: str | None = None


def _build(cls, doc: dict, path: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in section '{path}'")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid section '{path}': {err}") from err


def _coerce_profile(doc, path):
    if "affine" in doc:
        doc["affine"] = tuple(doc["affine"])
    return _build(ModalityProfile, doc, path)


def load_experiment_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    return experiment_config_from_dict(doc)


def experiment_config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    allowed = {"dataset", "arch", "training", "data_dir", "out_dir"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")

    ds_doc = dict(doc.get("dataset", {}))
    if "fractions" in ds_doc:
        ds_doc["fractions"] = tuple(ds_doc["fractions"])
    if "layout" in ds_doc:
        ds_doc["layout"] = _build(LayoutConfig, dict(ds_doc["layout"]), "dataset.layout")
    for key in ("profile_a", "profile_b"):
        if key in ds_doc:
            ds_doc[key] = _coerce_profile(dict(ds_doc[key]), f"dataset.{key}")
    dataset = _build(DatasetConfig, ds_doc, "dataset")
    arch = _build(ArchSection, dict(doc.get("arch", {})), "arch")
    training = _build(TrainingConfig, dict(doc.get("training", {})), "training")
    return ExperimentConfig(dataset=dataset, arch=arch, training=training,
                            data_dir=doc.get("data_dir"), out_dir=doc.get("out_dir"))
