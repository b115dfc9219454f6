"""Experiment configuration: one YAML file with flat sections per module.

Sections: ``dataset``, ``encoder``, ``pretrain``, ``rerank``, ``cluster``,
``episodic``, ``augment`` plus top-level ``name`` and ``seed``. Every command
writes the fully resolved config back out as ``config.echo``; re-running from
that echo reproduces the outputs bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, fields, replace
from pathlib import Path

import yaml

from .augment import AugmentationPolicy
from .cluster import ClusterConfig
from .data import PROFILES, DatasetProfile
from .encoder import EncoderConfig
from .episodic import FinetuneConfig
from .pretrain import PretrainConfig
from .rerank import RerankConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration content; message names the field."""


@dataclass(frozen=True)
class EpisodicConfig:
    split: str = "test"
    n_way: int = 5
    k_shot: int = 1
    queries_per_class: int = 15
    episodes: int = 600
    runs: int = 3
    finetune_epochs: int = 15
    finetune_lr: float = 1e-3

    @property
    def finetune(self) -> FinetuneConfig:
        return FinetuneConfig(epochs=self.finetune_epochs, lr=self.finetune_lr)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    dataset_profile: str = "omniglot"
    dataset_root: str = "data/omniglot-synth"
    encoder: EncoderConfig = EncoderConfig()
    pretrain: PretrainConfig = PretrainConfig()
    episodic: EpisodicConfig = EpisodicConfig()
    augment: AugmentationPolicy = AugmentationPolicy()

    @property
    def profile(self) -> DatasetProfile:
        try:
            return PROFILES[self.dataset_profile]
        except KeyError:
            raise ConfigError(
                f"dataset.profile: unknown profile {self.dataset_profile!r}; "
                f"known: {sorted(PROFILES)}"
            ) from None


def _build(section: str, cls, payload: dict, **forced):
    allowed = {f.name for f in fields(cls)}
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}; allowed: {sorted(allowed)}")
    merged = {**payload, **forced}
    for key, value in merged.items():
        if isinstance(value, list):
            merged[key] = tuple(value)
    try:
        obj = cls(**merged)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc
    return obj


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    known = {"name", "seed", "dataset", "encoder", "pretrain", "rerank", "cluster",
             "episodic", "augment"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}; allowed: {sorted(known)}")

    name = raw.get("name", "experiment")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"seed: expected an integer, got {seed!r}")

    dataset = raw.get("dataset") or {}
    unknown = set(dataset) - {"profile", "root"}
    if unknown:
        raise ConfigError(f"dataset: unknown keys {sorted(unknown)}")
    profile_name = dataset.get("profile", "omniglot")
    if profile_name not in PROFILES:
        raise ConfigError(f"dataset.profile: unknown profile {profile_name!r}; known: {sorted(PROFILES)}")
    profile = PROFILES[profile_name]
    root = dataset.get("root", "data/omniglot-synth")

    enc_raw = dict(raw.get("encoder") or {})
    enc_raw.pop("image_shape", None)  # always derived from the profile
    encoder = _build("encoder", EncoderConfig, enc_raw, image_shape=profile.image_shape)
    try:
        encoder.validate()
    except ValueError as exc:
        raise ConfigError(f"encoder: {exc}") from exc

    rerank_cfg = _build("rerank", RerankConfig, raw.get("rerank") or {})
    cluster_raw = raw.get("cluster")
    cluster_cfg = _build("cluster", ClusterConfig, cluster_raw) if cluster_raw else None
    pretrain_raw = dict(raw.get("pretrain") or {})
    for nested in ("rerank", "cluster", "seed"):
        if nested in pretrain_raw:
            raise ConfigError(
                f"pretrain.{nested}: move this to the top-level "
                f"{'seed key' if nested == 'seed' else nested + ' section'}"
            )
    pretrain_cfg = _build(
        "pretrain", PretrainConfig, pretrain_raw, rerank=rerank_cfg, cluster=cluster_cfg, seed=seed
    )
    try:
        pretrain_cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"pretrain: {exc}") from exc

    episodic_cfg = _build("episodic", EpisodicConfig, raw.get("episodic") or {})
    if episodic_cfg.split not in ("train", "val", "test"):
        raise ConfigError(f"episodic.split: expected train/val/test, got {episodic_cfg.split!r}")

    if "augment" in raw and raw["augment"] is not None:
        augment = _build("augment", AugmentationPolicy, raw["augment"])
    else:
        augment = AugmentationPolicy.for_profile(profile)

    return ExperimentConfig(
        name=name,
        seed=seed,
        dataset_profile=profile_name,
        dataset_root=root,
        encoder=encoder,
        pretrain=pretrain_cfg,
        episodic=episodic_cfg,
        augment=augment,
    )


def config_to_dict(cfg: ExperimentConfig) -> dict:
    pretrain = asdict(cfg.pretrain)
    rerank_cfg = pretrain.pop("rerank")
    pretrain.pop("cluster")
    pretrain.pop("seed")
    cluster_cfg = asdict(cfg.pretrain.resolved_cluster)
    encoder = asdict(cfg.encoder)
    encoder.pop("image_shape")

    def listify(d: dict) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    return {
        "name": cfg.name,
        "seed": cfg.seed,
        "dataset": {"profile": cfg.dataset_profile, "root": cfg.dataset_root},
        "encoder": encoder,
        "pretrain": listify(pretrain),
        "rerank": asdict(cfg.pretrain.rerank),
        "cluster": cluster_cfg,
        "episodic": asdict(cfg.episodic),
        "augment": listify(asdict(cfg.augment)),
    }


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    raw.pop("checkpoint", None)  # present in evaluate/inspect echoes
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig, path: str | Path, extra: dict | None = None) -> None:
    payload = config_to_dict(cfg)
    if extra:
        payload.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(payload, sort_keys=True))
