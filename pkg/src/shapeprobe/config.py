"""Experiment configuration: schema, defaults, digests and the cache root."""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import jsonschema
import yaml

from . import __version__
from .errors import ValidationError

CACHE_ENV = "PROBE_CACHE_ROOT"

KINDS = ("dims", "snapshot_series", "readout", "keep", "remove", "dissect", "bias")
STAGES = ("f1", "f2", "f3", "f4")

DEFAULTS = {
    "dataset": {"num_images": 2000, "num_classes": 4, "image_size": 32, "seed": 0,
                "texture_mode": "signature", "signature_prob": 0.5},
    "probe_set": {"num_images": 200, "seed": 0},
    "readout_set": {"num_images": 300, "seed": 1},
    "styles": {"k": 5, "seed": 0},
    "train_styles": {"mode": "fresh", "k": 12, "seed": 100},
    "encoder": {"arch": "tiny_resnet", "receptive_field_cap": 3},
    "train": {"epochs": 12, "lr": 1e-3, "batch_size": 32, "optimizer": "adam", "milestones": [9],
              "snapshot_every": 3, "stylized": False},
    "dims": {"baseline": None, "temperature": 0.1, "stage": "f4"},
    "readout": {"stages": ["f4"], "layers": 3, "task": "semantic", "mode": "frozen", "hidden": 64,
                "epochs": 40, "lr": 1e-3, "batch_size": 16},
    "targeting": {"stage": "f4", "percents": [25, 50, 100], "Ns": [0, 6, 12, 19],
                  "factors": ["shape", "texture"], "remove_factors": ["shape", "texture", "residual"],
                  "tasks": ["semantic", "binary"]},
    "dissection": {"stage": "f4", "q": 0.005, "iou": 0.04, "num_images": 320, "seed": 0,
                   "period_range": [8.0, 16.0]},
    "bias": {"num_images": 200, "seed": 0},
}

_pos_int = {"type": "integer", "minimum": 1}
_stage = {"type": "string", "enum": list(STAGES)}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "probe experiment",
    "type": "object",
    "required": ["kind", "seeds"],
    "additionalProperties": False,
    "properties": {
        "kind": {"type": "string", "enum": list(KINDS)},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "out_dir": {"type": "string"},
        "dataset": {"type": "object", "additionalProperties": False, "properties": {
            "num_images": _pos_int, "num_classes": {"type": "integer", "minimum": 2, "maximum": 8},
            "image_size": {"type": "integer", "minimum": 32}, "seed": {"type": "integer", "minimum": 0},
            "texture_mode": {"enum": ["independent", "signature"]},
            "signature_prob": {"type": "number", "minimum": 0, "maximum": 1}}},
        "probe_set": {"type": "object", "additionalProperties": False,
                      "properties": {"num_images": _pos_int, "seed": {"type": "integer", "minimum": 0}}},
        "readout_set": {"type": "object", "additionalProperties": False,
                        "properties": {"num_images": _pos_int, "seed": {"type": "integer", "minimum": 0}}},
        "styles": {"type": "object", "additionalProperties": False,
                   "properties": {"k": {"type": "integer", "minimum": 2}, "seed": {"type": "integer", "minimum": 0}}},
        "train_styles": {"type": "object", "additionalProperties": False,
                         "properties": {"mode": {"enum": ["fresh", "bank"]},
                                        "k": {"type": "integer", "minimum": 2},
                                        "seed": {"type": "integer", "minimum": 0}}},
        "encoder": {"type": "object", "additionalProperties": False, "properties": {
            "arch": {"enum": ["tiny_resnet", "tiny_bagnet"]},
            "receptive_field_cap": {"enum": [3, 5, 9]}}},
        "train": {"type": "object", "additionalProperties": False, "properties": {
            "epochs": {"type": "integer", "minimum": 0}, "lr": {"type": "number", "exclusiveMinimum": 0},
            "batch_size": _pos_int, "optimizer": {"enum": ["adam", "sgd"]},
            "milestones": {"type": "array", "items": _pos_int},
            "snapshot_every": _pos_int, "stylized": {"type": "boolean"}}},
        "dims": {"type": "object", "additionalProperties": False, "properties": {
            "baseline": {"type": ["number", "null"]}, "temperature": {"type": "number", "exclusiveMinimum": 0},
            "stage": _stage}},
        "readout": {"type": "object", "additionalProperties": False, "properties": {
            "stages": {"type": "array", "items": _stage, "minItems": 1, "uniqueItems": True},
            "layers": {"enum": [1, 3]}, "task": {"enum": ["semantic", "binary"]},
            "mode": {"enum": ["frozen", "none", "end_to_end"]}, "hidden": _pos_int,
            "epochs": _pos_int, "lr": {"type": "number", "exclusiveMinimum": 0}, "batch_size": _pos_int,
            "mask": {"type": ["string", "null"]}}},
        "targeting": {"type": "object", "additionalProperties": False, "properties": {
            "stage": _stage,
            "percents": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 100},
                         "minItems": 1},
            "Ns": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
            "factors": {"type": "array", "items": {"enum": ["shape", "texture", "residual"]}, "minItems": 1},
            "remove_factors": {"type": "array", "items": {"enum": ["shape", "texture", "residual"]},
                               "minItems": 1},
            "tasks": {"type": "array", "items": {"enum": ["semantic", "binary"]}, "minItems": 1}}},
        "dissection": {"type": "object", "additionalProperties": False, "properties": {
            "stage": _stage, "q": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "iou": {"type": "number", "minimum": 0}, "num_images": _pos_int,
            "seed": {"type": "integer", "minimum": 0},
            "period_range": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                             "minItems": 2, "maxItems": 2}}},
        "bias": {"type": "object", "additionalProperties": False,
                 "properties": {"num_images": _pos_int, "seed": {"type": "integer", "minimum": 0}}},
    },
}


def cache_root() -> Path:
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path.home() / ".cache" / "shapeprobe"


@lru_cache(maxsize=1)
def code_version() -> str:
    """Package version plus a hash of the package sources, so edits invalidate caches."""
    h = hashlib.sha256(__version__.encode())
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(payload, with_code: bool = True) -> str:
    body = {"payload": payload, "code": code_version() if with_code else None}
    return hashlib.sha256(canonical_json(body).encode()).hexdigest()


def _merge(defaults, given):
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    kind: str
    seeds: list
    out_dir: str = "runs"
    sections: dict = field(default_factory=dict)

    def __getitem__(self, section):
        return self.sections[section]

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "seeds": list(self.seeds), "out_dir": self.out_dir}
        d.update(copy.deepcopy(self.sections))
        return d

    def identity(self) -> dict:
        """Everything that determines results (the output location does not)."""
        d = self.to_dict()
        d.pop("out_dir")
        return d

    @property
    def digest(self) -> str:
        return digest(self.identity())

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        validate_config(raw)
        full = _merge(DEFAULTS, {k: v for k, v in raw.items() if k not in ("kind", "seeds", "out_dir")})
        cfg = cls(raw["kind"], [int(s) for s in raw["seeds"]], raw.get("out_dir", "runs"), full)
        _semantic_checks(cfg)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as e:
            raise ValidationError(f"cannot parse {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ValidationError(f"{path} does not hold a mapping")
        return cls.from_dict(raw)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        return path


def validate_config(raw) -> None:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ValidationError(f"config invalid at {where}: {e.message}") from e


def _semantic_checks(cfg: ExperimentConfig) -> None:
    enc = cfg["encoder"]
    if enc["arch"] == "tiny_resnet" and enc["receptive_field_cap"] != 3:
        # the cap only applies to bagnets; keep the digest canonical
        cfg.sections["encoder"]["receptive_field_cap"] = 3
    tr = cfg["train"]
    if list(tr["milestones"]) != sorted(tr["milestones"]):
        raise ValidationError("train.milestones must be increasing")
    if 0 not in cfg["targeting"]["Ns"] and cfg.kind == "remove":
        raise ValidationError("targeting.Ns must include 0 (the unmasked baseline row)")
    if cfg.kind == "readout" and cfg["readout"].get("mask") and len(cfg["readout"]["stages"]) != 1:
        raise ValidationError("a channel mask needs a single-stage read-out")
