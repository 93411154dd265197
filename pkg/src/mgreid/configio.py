"""INI run-configuration files mirroring every config dataclass field."""
from __future__ import annotations

import configparser
from dataclasses import dataclass

from .association import AssociationConfig
from .backbone import BackboneConfig
from .errors import ConfigurationError
from .heads import HeadConfig
from .memory import LossWeights, MemoryConfig
from .trainer import TrainConfig


@dataclass
class RunConfig:
    backbone: BackboneConfig
    head: HeadConfig
    association: AssociationConfig
    memory: MemoryConfig
    weights: LossWeights
    train: TrainConfig
    manifest: str | None = None
    out_dir: str | None = None


_SCHEMA = {
    "backbone": {
        "image_height": int, "image_width": int, "patch_size": int, "embed_dim": int,
        "num_layers": int, "num_heads": int, "num_cameras": int,
        "camera_weight": float, "stem_channels": int,
    },
    "head": {"partitions": "ints", "duplicate_last_layer": "bool", "fusion_mode": str},
    "association": {
        "dbscan_eps": float, "dbscan_min_samples": int,
        "num_hard_negatives": int, "online_topk": int,
    },
    "memory": {"momentum": float, "temperature": float, "lambda_p": float},
    "train": {
        "epochs": int, "base_lr": float, "weight_decay": float, "momentum": float,
        "warmup_epochs": int, "warmup_start_factor": float, "step_epochs": "ints",
        "step_factor": float, "batch_size": int, "seed": int,
        "flip_p": float, "crop_pad": int, "erase_p": float,
    },
    "data": {"manifest": str, "out_dir": str},
}

_OPTIONAL_SECTION = "data"


def _convert(raw: str, kind, where: str):
    try:
        if kind == "ints":
            raw = raw.strip()
            return tuple(int(s) for s in raw.replace(",", " ").split()) if raw else ()
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError:
        raise ConfigurationError(f"bad value for {where}: {raw!r}") from None


def load_run_config(path: str) -> RunConfig:
    """Parse an INI run config; every non-[data] key is required and unknown
    keys are rejected."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigurationError(f"config file {path} not found")
    values: dict[str, dict] = {}
    for section, fields in _SCHEMA.items():
        if not parser.has_section(section):
            if section == _OPTIONAL_SECTION:
                values[section] = {}
                continue
            raise ConfigurationError(f"missing config section [{section}]")
        present = dict(parser.items(section))
        unknown = set(present) - set(fields)
        if unknown:
            raise ConfigurationError(
                f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
        parsed = {}
        for key, kind in fields.items():
            if key not in present:
                if section == _OPTIONAL_SECTION:
                    continue
                raise ConfigurationError(f"missing config key [{section}] {key}")
            parsed[key] = _convert(present[key], kind, f"[{section}] {key}")
        values[section] = parsed
    extra_sections = set(parser.sections()) - set(_SCHEMA)
    if extra_sections:
        raise ConfigurationError(
            f"unknown config section(s): {', '.join(sorted(extra_sections))}")
    head_kv = dict(values["head"])
    mem_kv = dict(values["memory"])
    lambda_p = mem_kv.pop("lambda_p")
    return RunConfig(
        backbone=BackboneConfig(**values["backbone"]),
        head=HeadConfig(**head_kv),
        association=AssociationConfig(**values["association"]),
        memory=MemoryConfig(**mem_kv),
        weights=LossWeights(lambda_p),
        train=TrainConfig(**values["train"]),
        manifest=values["data"].get("manifest"),
        out_dir=values["data"].get("out_dir"),
    )


def write_run_config(cfg: RunConfig, path: str) -> None:
    parser = configparser.ConfigParser()
    b, h, a, m, t = cfg.backbone, cfg.head, cfg.association, cfg.memory, cfg.train
    parser["backbone"] = {k: str(getattr(b, k)) for k in _SCHEMA["backbone"]}
    parser["head"] = {
        "partitions": ", ".join(str(k) for k in h.partitions),
        "duplicate_last_layer": str(h.duplicate_last_layer).lower(),
        "fusion_mode": h.fusion_mode,
    }
    parser["association"] = {k: str(getattr(a, k)) for k in _SCHEMA["association"]}
    parser["memory"] = {
        "momentum": str(m.momentum),
        "temperature": str(m.temperature),
        "lambda_p": str(cfg.weights.lambda_p),
    }
    parser["train"] = {
        **{k: str(getattr(t, k)) for k in _SCHEMA["train"] if k != "step_epochs"},
        "step_epochs": ", ".join(str(s) for s in t.step_epochs),
    }
    data = {}
    if cfg.manifest is not None:
        data["manifest"] = cfg.manifest
    if cfg.out_dir is not None:
        data["out_dir"] = cfg.out_dir
    if data:
        parser["data"] = data
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
