"""Config parsing, validation, and content fingerprinting.

A run is described by one YAML file. The fingerprint is the sha256 of the
canonical JSON serialization of the config mapping; every artifact a run
produces embeds it, so artifacts from identical configs are linkable.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .encoders import SurrogateEnsemble, load_external_encoder, make_toy_encoder
from .data import SyntheticDataset, load_dataset
from .errors import ConfigError
from .objectives import OBJECTIVES

EPSILON_DEFAULT = 16 / 255

TRAIN_DEFAULTS = {
    "objective": None,  # contrastive for pretrain, bidirectional for finetune
    "batch_size": 64,
    "k": 5,
    "steps": 10000,
    "epochs": 20,
    "learning_rate": 1e-4,
    "lr_floor": 1e-6,
    "weight_decay": 0.01,
    "tau0": 1.0,
    "tau_final": 0.07,
    "tau_horizon": 10000,
    "fixed_tau": 0.07,
    "derange": True,
    "checkpoint_every": 0,
}


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return cfg


def config_fingerprint(cfg: dict) -> str:
    """sha256 over canonical JSON; stable across key order and platforms."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canon.encode()).hexdigest()


@dataclass
class TrainConfig:
    """Validated training parameters for one stage."""

    stage: str
    seed: int
    objective: str
    epsilon: float
    k: int
    batch_size: int
    steps: int
    epochs: int
    learning_rate: float
    lr_floor: float
    weight_decay: float
    tau0: float
    tau_final: float
    tau_horizon: int
    fixed_tau: float
    derange: bool
    checkpoint_every: int
    encoder: dict
    decoder_width: int
    data: dict
    auxiliaries: list = field(default_factory=list)
    ensemble_weights: Optional[list] = None
    fingerprint: str = ""

    @classmethod
    def from_dict(cls, cfg: dict) -> "TrainConfig":
        stage = cfg.get("stage")
        if stage not in ("pretrain", "finetune"):
            raise ConfigError(f"stage must be pretrain or finetune, got {stage!r}")
        t = dict(TRAIN_DEFAULTS)
        t.update(cfg.get("train") or {})
        objective = t["objective"] or ("contrastive" if stage == "pretrain" else "bidirectional")
        if objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {objective!r}")
        if stage == "pretrain" and objective != "contrastive":
            raise ConfigError("pretrain uses the scheduled contrastive objective")
        if stage == "finetune" and objective == "contrastive":
            raise ConfigError("finetune uses the bidirectional or cosine objective")
        ens = cfg.get("ensemble") or {}
        aux = ens.get("auxiliaries") or []
        if stage == "pretrain" and aux:
            raise ConfigError("pretrain uses only the primary encoder as surrogate; "
                              "auxiliaries are a finetune-stage feature")
        dec = cfg.get("decoder") or {}
        epsilon = float(dec.get("epsilon", EPSILON_DEFAULT))
        self_obj = cls(
            stage=stage,
            seed=int(cfg.get("seed", 0)),
            objective=objective,
            epsilon=epsilon,
            k=int(t["k"]),
            batch_size=int(t["batch_size"]),
            steps=int(t["steps"]),
            epochs=int(t["epochs"]),
            learning_rate=float(t["learning_rate"]),
            lr_floor=float(t["lr_floor"]),
            weight_decay=float(t["weight_decay"]),
            tau0=float(t["tau0"]),
            tau_final=float(t["tau_final"]),
            tau_horizon=int(t["tau_horizon"]),
            fixed_tau=float(t["fixed_tau"]),
            derange=bool(t["derange"]),
            checkpoint_every=int(t["checkpoint_every"]),
            encoder=cfg.get("encoder") or {"kind": "toy", "seed": 7},
            decoder_width=int(dec.get("width", 32)),
            data=cfg.get("data") or {},
            auxiliaries=aux,
            ensemble_weights=ens.get("weights"),
            fingerprint=config_fingerprint(cfg),
        )
        self_obj.validate()
        return self_obj

    def validate(self):
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive for training, got {self.epsilon}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 (pairing needs a derangement), "
                              f"got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.steps < 0 or self.epochs < 0:
            raise ConfigError("steps and epochs must be >= 0")
        return self


def build_encoder(spec: dict, dtype=None):
    """Build the encoder named by a config block (kind: toy or external)."""
    import torch

    kind = spec.get("kind", "toy")
    if kind == "toy":
        size = spec.get("image_size", [32, 32])
        kwargs = {}
        if dtype is not None:
            kwargs["dtype"] = dtype
        return make_toy_encoder(
            int(spec.get("seed", 7)),
            input_shape=(int(size[0]), int(size[1]), 3),
            embed_dim=int(spec.get("embed_dim", 32)),
            channels=int(spec.get("channels", 8)),
            **kwargs)
    if kind == "external":
        if "config" not in spec:
            raise ConfigError("external encoder block needs a 'config' path")
        return load_external_encoder(spec["config"])
    raise ConfigError(f"unknown encoder kind {kind!r}")


def build_dataset(spec: dict):
    """Build a dataset handle from a config block."""
    if not spec:
        raise ConfigError("missing dataset block")
    kind = spec.get("kind", "directory")
    if kind == "synthetic":
        size = spec.get("image_size", [32, 32])
        return SyntheticDataset(count=int(spec["count"]), seed=int(spec.get("seed", 0)),
                                size=(int(size[0]), int(size[1])))
    if kind in ("directory", "sharded-archive"):
        if "path" not in spec:
            raise ConfigError(f"dataset kind {kind!r} needs a 'path'")
        resize = spec.get("image_size")
        return load_dataset(spec["path"], kind=kind,
                            resize=None if resize is None else (int(resize[0]), int(resize[1])))
    raise ConfigError(f"unknown dataset kind {kind!r}")


def build_ensemble(tc: TrainConfig, primary) -> SurrogateEnsemble:
    aux = tuple(build_encoder(spec) for spec in tc.auxiliaries)
    weights = None if tc.ensemble_weights is None else tuple(float(w) for w in tc.ensemble_weights)
    return SurrogateEnsemble(primary=primary, auxiliaries=aux, weights=weights)
