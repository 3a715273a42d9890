"""Optimization harness: warmup + step-decay schedule with a half-rate group
for the calibration stack, Adam driver, epoch loop, checkpointing and the
final retrieval evaluation."""

import csv
import hashlib
import json
import logging
import os
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .aggregation import ReIDNet
from .backbone import ConfigurationError
from .data import (AugmentConfig, ReIDDataset, SamplerConfig, eval_batches,
                   pk_batches)
from .losses import LossConfig, total_loss
from .metrics import evaluate, distance_matrix

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class ScheduleConfig:
    base_lr: float = 4e-4
    warmup_start_lr: float = 4e-6
    warmup_epochs: int = 10
    decay_start_epoch: int = 50
    decay_every: int = 20
    decay_factor: float = 0.4
    total_epochs: int = 150
    tfc_lr_scale: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0


def lr_at(epoch, cfg: ScheduleConfig):
    """Learning rates for (base, calibration) groups at a 1-based epoch:
    linear warmup over the first warmup_epochs, flat until decay_start_epoch,
    then multiplied by decay_factor every decay_every epochs. The calibration
    group is always scaled by tfc_lr_scale."""
    if not 1 <= epoch <= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [1, {cfg.total_epochs}]")
    if epoch <= cfg.warmup_epochs:
        frac = (
            1.0 if cfg.warmup_epochs == 1
            else (epoch - 1) / (cfg.warmup_epochs - 1)
        )
        base = cfg.warmup_start_lr + frac * (cfg.base_lr - cfg.warmup_start_lr)
    elif epoch < cfg.decay_start_epoch:
        base = cfg.base_lr
    else:
        steps = (epoch - cfg.decay_start_epoch) // cfg.decay_every + 1
        base = cfg.base_lr * cfg.decay_factor ** steps
    return base, base * cfg.tfc_lr_scale


def make_optimizer(model: ReIDNet, cfg: ScheduleConfig):
    base, calib = model.parameter_groups()
    return torch.optim.Adam(
        [{"params": base}, {"params": calib}],
        lr=cfg.base_lr,
        betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )


def config_hash(config_dict):
    payload = json.dumps(config_dict, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def rng_states():
    return {
        "torch": torch.get_rng_state(),
        "numpy": np.random.get_state(),
        "python": random.getstate(),
    }


def restore_rng_states(states):
    torch.set_rng_state(states["torch"])
    np.random.set_state(states["numpy"])
    random.setstate(states["python"])


def save_checkpoint(path, model, optimizer, epoch, config_dict):
    """Atomic write: serialize to a temp file then rename."""
    path = Path(path)
    payload = {
        "manifest": {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config_hash": config_hash(config_dict),
            "epoch": epoch,
        },
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng": rng_states(),
        "config": config_dict,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    manifest = payload.get("manifest")
    if not manifest or manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format in {path}: {manifest}"
        )
    return payload


def apply_checkpoint(payload, model, optimizer=None, restore_rng=True):
    """Load parameters into a model; a key-set mismatch (e.g. a different
    layer allocation) is reported as a keyed diff and refused."""
    state = payload["model"]
    own = model.state_dict()
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    if missing or unexpected:
        raise CheckpointError(
            f"architecture mismatch: missing keys {missing}, "
            f"unexpected keys {unexpected}"
        )
    model.load_state_dict(state)
    if optimizer is not None and payload["optimizer"] is not None:
        optimizer.load_state_dict(payload["optimizer"])
    if restore_rng:
        restore_rng_states(payload["rng"])
    return payload["manifest"]["epoch"]


def step_loss(outputs, labels, loss_cfg: LossConfig, use_mfe_supervision=True,
              use_aux_loss=True):
    """Compose the per-step objective: the global backbone head provides the
    main id + triplet terms (toggleable), the per-level CLS heads the
    lambda-weighted auxiliary terms."""
    if use_mfe_supervision:
        main_logits = outputs["backbone_logits"]
        main_embedding = outputs["backbone_embedding"]
    else:
        main_logits = main_embedding = None
    aux = (
        list(zip(outputs["level_logits"], outputs["level_cls"]))
        if use_aux_loss
        else []
    )
    return total_loss(main_logits, main_embedding, aux, labels, loss_cfg)


LOG_COLUMNS = ["epoch", "step", "lr_base", "lr_tfc", "id_loss", "tri_loss",
               "aux_total", "total"]


def extract_features(model, dataset: ReIDDataset, aug: AugmentConfig,
                     mode="concat", batch_size=64):
    model.eval()
    feats, pids, camids = [], [], []
    with torch.no_grad():
        for batch in eval_batches(dataset, aug, batch_size):
            feats.append(
                model.extract_test_features(batch.images, mode=mode).numpy()
            )
            pids.append(batch.pids.numpy())
            camids.append(batch.camids.numpy())
    return np.concatenate(feats), np.concatenate(pids), np.concatenate(camids)


def evaluate_model(model, query_ds, gallery_ds, aug, mode="concat",
                   l2_normalize=False, max_rank=10):
    qf, qp, qc = extract_features(model, query_ds, aug, mode)
    gf, gp, gc = extract_features(model, gallery_ds, aug, mode)
    dist = distance_matrix(qf, gf, l2_normalize=l2_normalize)
    return evaluate(dist, qp, qc, gp, gc, max_rank=max_rank)


def train(model: ReIDNet, train_ds: ReIDDataset, schedule: ScheduleConfig,
          sampler: SamplerConfig, aug: AugmentConfig, loss_cfg: LossConfig,
          seed: int, out_dir, config_dict=None, start_epoch=1, optimizer=None,
          checkpoint_every=0, epochs=None, log_name="train_log.csv"):
    """Epoch loop over identity-balanced batches. Batch composition and
    augmentation randomness derive only from (seed, epoch), so a run resumed
    from an epoch-boundary checkpoint reproduces the uninterrupted run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_dict = config_dict or {}
    epochs = epochs or schedule.total_epochs
    if epochs > schedule.total_epochs:
        raise ConfigurationError("epochs exceeds schedule.total_epochs")
    if optimizer is None:
        optimizer = make_optimizer(model, schedule)
    log_path = out_dir / log_name
    mode = "a" if start_epoch > 1 and log_path.exists() else "w"
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(LOG_COLUMNS)
        for epoch in range(start_epoch, epochs + 1):
            lr_base, lr_tfc = lr_at(epoch, schedule)
            optimizer.param_groups[0]["lr"] = lr_base
            optimizer.param_groups[1]["lr"] = lr_tfc
            model.train()
            for step, batch in enumerate(
                pk_batches(train_ds, sampler, aug, seed, epoch), start=1
            ):
                outputs = model(batch.images)
                report = step_loss(
                    outputs, batch.labels, loss_cfg,
                    use_mfe_supervision=model.agg_cfg.use_mfe_supervision,
                    use_aux_loss=model.agg_cfg.use_aux_loss,
                )
                if not torch.isfinite(report.total):
                    snap = save_checkpoint(
                        out_dir / "diverged.ckpt", model, optimizer, epoch,
                        config_dict,
                    )
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} step {step}; "
                        f"state saved to {snap}"
                    )
                optimizer.zero_grad()
                report.total.backward()
                optimizer.step()
                writer.writerow(
                    [epoch, step, f"{lr_base:.6e}", f"{lr_tfc:.6e}",
                     f"{report.id_loss:.6f}", f"{report.triplet_loss:.6f}",
                     f"{report.aux_total:.6f}", f"{float(report.total.detach()):.6f}"]
                )
            fh.flush()
            if checkpoint_every and epoch % checkpoint_every == 0:
                save_checkpoint(
                    out_dir / f"epoch_{epoch:04d}.ckpt", model, optimizer,
                    epoch, config_dict,
                )
    final = save_checkpoint(
        out_dir / "final.ckpt", model, optimizer, epochs, config_dict
    )
    return {"checkpoint": final, "log": log_path, "optimizer": optimizer}
