"""Run configuration: a YAML file with one section per subsystem, strict
key validation and dotted-path command-line overrides."""

import copy
from dataclasses import dataclass

import yaml

from .aggregation import AggregationConfig
from .backbone import BackboneConfig, ConfigurationError
from .data import AugmentConfig, SamplerConfig
from .losses import LossConfig
from .training import ScheduleConfig


DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/out",
    "backbone": {
        "stage_channels": [32, 64, 128, 256],
        "blocks_per_stage": [1, 1, 1, 1],
        "common_channels": 64,
        "scaling_divisor": 16,
        "image_h": 64,
        "image_w": 32,
    },
    "dsa": {
        "depths": [3, 3, 6, 0],
        "num_heads": 8,
        "ffn_ratio": 4,
        "use_aux_loss": True,
        "use_nea": True,
        "use_mfe_supervision": True,
        "first_level_bootstrap": "duplicate",
    },
    "loss": {
        "epsilon": 0.1,
        "margin": 0.3,
        "lambda": 0.5,
        "normalize_embeddings": False,
    },
    "data": {
        "source": "synth://16/8/0",
        "p_ids": 16,
        "l": 4,
        "mean": [0.485, 0.456, 0.406],
        "std": [0.229, 0.224, 0.225],
        "pad": 10,
    },
    "schedule": {
        "base_lr": 4e-4,
        "warmup_start_lr": 4e-6,
        "warmup_epochs": 10,
        "decay_start_epoch": 50,
        "decay_every": 20,
        "decay_factor": 0.4,
        "total_epochs": 150,
        "tfc_lr_scale": 0.5,
        "beta1": 0.9,
        "beta2": 0.999,
        "weight_decay": 0.0,
    },
    "train": {
        "epochs": None,   # None: schedule.total_epochs
        "checkpoint_every": 0,
    },
    "eval": {
        "features": "concat",
        "l2_normalize": False,
        "max_rank": 10,
    },
}


class ValidationError(ConfigurationError):
    pass


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ValidationError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValidationError(f"{here} must be a mapping")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = value
    return out


def parse_override(expr):
    """`a.b=value`; the value is parsed as YAML, with bare comma lists
    (e.g. 3,3,6,0) accepted for convenience."""
    if "=" not in expr:
        raise ValidationError(f"override must look like key=value: {expr!r}")
    key, raw = expr.split("=", 1)
    if "," in raw and not raw.strip().startswith("["):
        raw = f"[{raw}]"
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ValidationError(f"cannot parse override value {raw!r}: {exc}")
    return key.strip(), value


def apply_override(tree, dotted_key, value):
    parts = dotted_key.split(".")
    node = tree
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ValidationError(f"unknown config key: {dotted_key}")
        node = node[part]
    if parts[-1] not in node:
        raise ValidationError(f"unknown config key: {dotted_key}")
    node[parts[-1]] = value


@dataclass
class RunConfig:
    raw: dict
    seed: int
    output_dir: str
    backbone: BackboneConfig
    dsa: AggregationConfig
    loss: LossConfig
    sampler: SamplerConfig
    augment: AugmentConfig
    schedule: ScheduleConfig
    data_source: str
    train_epochs: int
    checkpoint_every: int
    eval_features: str
    eval_l2_normalize: bool
    eval_max_rank: int


def build_config(tree):
    try:
        backbone = BackboneConfig(
            stage_channels=tree["backbone"]["stage_channels"],
            blocks_per_stage=tree["backbone"]["blocks_per_stage"],
            common_channels=tree["backbone"]["common_channels"],
            scaling_divisor=tree["backbone"]["scaling_divisor"],
            image_h=tree["backbone"]["image_h"],
            image_w=tree["backbone"]["image_w"],
        )
        dsa = AggregationConfig(
            depths=tree["dsa"]["depths"],
            lam=tree["loss"]["lambda"],
            num_heads=tree["dsa"]["num_heads"],
            ffn_ratio=tree["dsa"]["ffn_ratio"],
            use_aux_loss=tree["dsa"]["use_aux_loss"],
            use_nea=tree["dsa"]["use_nea"],
            use_mfe_supervision=tree["dsa"]["use_mfe_supervision"],
            first_level_bootstrap=tree["dsa"]["first_level_bootstrap"],
        )
        loss = LossConfig(
            epsilon=tree["loss"]["epsilon"],
            margin=tree["loss"]["margin"],
            lam=tree["loss"]["lambda"],
            normalize_embeddings=tree["loss"]["normalize_embeddings"],
        )
        if 2 * backbone.common_channels % dsa.num_heads:
            raise ValidationError(
                f"head count {dsa.num_heads} must divide token width "
                f"{2 * backbone.common_channels}"
            )
        sampler = SamplerConfig(p_ids=tree["data"]["p_ids"], l=tree["data"]["l"])
        augment = AugmentConfig(
            image_h=tree["backbone"]["image_h"],
            image_w=tree["backbone"]["image_w"],
            mean=tuple(tree["data"]["mean"]),
            std=tuple(tree["data"]["std"]),
            pad=tree["data"]["pad"],
        )
        schedule = ScheduleConfig(
            **{k: tree["schedule"][k] for k in DEFAULTS["schedule"]}
        )
        if not tree["data"]["source"]:
            raise ValidationError("data.source is required")
        return RunConfig(
            raw=tree,
            seed=int(tree["seed"]),
            output_dir=str(tree["output_dir"]),
            backbone=backbone,
            dsa=dsa,
            loss=loss,
            sampler=sampler,
            augment=augment,
            schedule=schedule,
            data_source=tree["data"]["source"],
            train_epochs=tree["train"]["epochs"] or schedule.total_epochs,
            checkpoint_every=tree["train"]["checkpoint_every"],
            eval_features=tree["eval"]["features"],
            eval_l2_normalize=tree["eval"]["l2_normalize"],
            eval_max_rank=tree["eval"]["max_rank"],
        )
    except (ConfigurationError, ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(str(exc)) from exc


def load_config(path=None, overrides=()):
    """Load a YAML config (defaults when path is None) and apply dotted-path
    overrides, validating every key."""
    tree = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ValidationError(f"config file {path} must hold a mapping")
        tree = _merge(tree, user)
    for expr in overrides:
        key, value = parse_override(expr)
        apply_override(tree, key, value)
    return build_config(tree)
