"""Flattened run configuration: every tunable in one key/value document.

Configs are plain JSON with dotted keys, a schema_version field, and strict
validation (unknown keys are rejected). Every run directory embeds its
resolved config and the config's hash so stages can refuse silently mixing
artifacts produced under different settings.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch

from .backbone import BackboneConfig
from .diffusion import DiffusionConfig, GaussianSchedule
from .schedule import VisibilitySchedule, build_schedule, log_gene_zeta
from .synthdata import GeneratorSpec, make_spec
from .trainer import TrainConfig

SCHEMA_VERSION = 1

DEFAULT_CONFIG: dict[str, object] = {
    "schema_version": SCHEMA_VERSION,
    # synthetic dataset
    "data.family": "linear_gaussian",
    "data.genes": 100,
    "data.latent_dim": 8,
    "data.grid_rows": 24,
    "data.grid_cols": 24,
    "data.cond_block1": 32,
    "data.cond_block2": 16,
    "data.sigma_x": 0.75,
    "data.sigma_v": 0.1,
    "data.length_scale": 0.2,
    "data.mix_archetypes": 0,
    "data.mix_concentration": 1.0,
    "data.slices": 6,
    "data.pretrain_slices": 2,
    "data.seed": 42,
    # visibility schedule; zeta "auto" means ln(G)/ln(T)
    "schedule.kind": "power",
    "schedule.T": 50,
    "schedule.zeta": "auto",
    # diffusion objective
    "diffusion.variant": "mask_diff",
    "diffusion.gauss_steps": 1000,
    "diffusion.gauss_infer_steps": 50,
    # backbone architecture
    "model.D": 64,
    "model.L": 2,
    "model.H": 4,
    "model.ff_dim": 128,
    "model.residual_scale": 1.0,
    # conditioning pathway
    "conditioning.variant": "softadaln",
    "conditioning.gate_bias": 10.0,
    # condition sub-block selection: both | first | second
    "conditioning.blocks": "both",
    # trainer
    "train.lr": 1e-4,
    "train.weight_decay": 0.0,
    "train.batch": 32,
    "train.milestones": [20, 30],
    "train.lr_decay": 0.2,
    "train.max_epochs": 50,
    "train.patience": 5,
    "train.val_warmup": 15,
    "train.warm_epochs": 5,
    "train.rho": 0.20,
    "train.seed": 42,
    "train.val_fraction": 0.10,
    "train.update_scheme": "modulators_only",
    "train.lora_rank": 8,
    "train.pretrain_epochs": 100,
    # evaluation: toy-scale stand-ins for the two top-k tiers
    "eval.pcc_small_k": 10,
    "eval.pcc_large_k": 30,
}


class ConfigError(ValueError):
    """Invalid or mismatched run configuration."""


def resolve_config(overrides: dict[str, object] | None = None) -> dict[str, object]:
    """Defaults plus overrides; rejects unknown keys."""
    cfg = dict(DEFAULT_CONFIG)
    for key, value in (overrides or {}).items():
        if key not in DEFAULT_CONFIG:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            cfg[key] = value
    return cfg


def config_hash(cfg: dict[str, object]) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def save_config(cfg: dict[str, object], path: str | Path, extra: dict | None = None) -> None:
    doc = dict(cfg)
    doc["config_hash"] = config_hash(cfg)
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_config(path: str | Path) -> dict[str, object]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError("unsupported config schema version")
    known = set(DEFAULT_CONFIG) | {"config_hash", "dataset_hash", "consumed", "notes"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return doc


def dataset_spec_from_config(cfg: dict[str, object]) -> GeneratorSpec:
    return make_spec(
        seed=int(cfg["data.seed"]),
        family=str(cfg["data.family"]),
        G=int(cfg["data.genes"]),
        latent_dim=int(cfg["data.latent_dim"]),
        grid=(int(cfg["data.grid_rows"]), int(cfg["data.grid_cols"])),
        cond_blocks=(int(cfg["data.cond_block1"]), int(cfg["data.cond_block2"])),
        sigma_x=float(cfg["data.sigma_x"]),
        sigma_v=float(cfg["data.sigma_v"]),
        length_scale=float(cfg["data.length_scale"]),
        mix_archetypes=int(cfg["data.mix_archetypes"]),
        mix_concentration=float(cfg["data.mix_concentration"]),
    )


def schedule_from_config(cfg: dict[str, object]) -> VisibilitySchedule:
    T = int(cfg["schedule.T"])
    zeta = cfg["schedule.zeta"]
    if zeta == "auto":
        zeta = log_gene_zeta(T, int(cfg["data.genes"]))
    return build_schedule(str(cfg["schedule.kind"]), T, float(zeta))


def diffusion_from_config(cfg: dict[str, object]) -> DiffusionConfig:
    variant = str(cfg["diffusion.variant"])
    gauss = None
    if variant == "gauss_diff":
        gauss = GaussianSchedule.linear(steps=int(cfg["diffusion.gauss_steps"]))
    return DiffusionConfig(
        schedule=schedule_from_config(cfg),
        variant=variant,
        gauss=gauss,
        gauss_infer_steps=int(cfg["diffusion.gauss_infer_steps"]),
    )


def backbone_from_config(cfg: dict[str, object]) -> BackboneConfig:
    return BackboneConfig(
        G=int(cfg["data.genes"]),
        D=int(cfg["model.D"]),
        L=int(cfg["model.L"]),
        H=int(cfg["model.H"]),
        ff_dim=int(cfg["model.ff_dim"]),
        residual_scale=float(cfg["model.residual_scale"]),
    )


def train_from_config(cfg: dict[str, object]) -> TrainConfig:
    return TrainConfig(
        lr=float(cfg["train.lr"]),
        weight_decay=float(cfg["train.weight_decay"]),
        batch=int(cfg["train.batch"]),
        milestones=tuple(cfg["train.milestones"]),
        lr_decay=float(cfg["train.lr_decay"]),
        max_epochs=int(cfg["train.max_epochs"]),
        patience=int(cfg["train.patience"]),
        val_warmup=int(cfg["train.val_warmup"]),
        warm_epochs=int(cfg["train.warm_epochs"]),
        rho=float(cfg["train.rho"]),
        seed=int(cfg["train.seed"]),
        val_fraction=float(cfg["train.val_fraction"]),
        update_scheme=str(cfg["train.update_scheme"]),
        lora_rank=int(cfg["train.lora_rank"]),
        pretrain_epochs=int(cfg["train.pretrain_epochs"]),
    )


def torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]
