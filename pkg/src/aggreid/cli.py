"""Command-line entry points: train, eval, inspect and sweep."""

import argparse
import json
import logging
import os
import random
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .aggregation import ReIDNet
from .backbone import ConfigurationError
from .config import RunConfig, ValidationError, load_config, parse_override
from .data import AugmentConfig, ReIDDataset, load_splits, parse_synth_uri, \
    synth_image, load_image, Sample, augment
from .metrics import EvaluationError
from .training import (CheckpointError, TrainingError, apply_checkpoint,
                       config_hash, evaluate_model, load_checkpoint, train)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def resolve_output_dir(cfg: RunConfig):
    root = os.environ.get("AGGREID_OUTPUT_ROOT")
    out = Path(cfg.output_dir)
    if root:
        out = Path(root) / out
    return out


def build_datasets(cfg: RunConfig):
    splits = load_splits(
        cfg.data_source, image_size=(cfg.backbone.image_h, cfg.backbone.image_w)
    )
    train_ds = ReIDDataset(splits["train"], relabel=True)
    query_ds = ReIDDataset(splits["query"], relabel=False)
    gallery_ds = ReIDDataset(splits["gallery"], relabel=False)
    if train_ds.num_ids == 0:
        raise ValidationError(f"no training identities in {cfg.data_source}")
    return train_ds, query_ds, gallery_ds


def build_model(cfg: RunConfig, num_ids):
    return ReIDNet(cfg.backbone, cfg.dsa, num_ids)


def write_eval_report(path, result, cfg_hash):
    report = {
        "map": result.map,
        "cmc": [float(c) for c in result.cmc],
        "num_valid_queries": result.num_valid_queries,
        "config_hash": cfg_hash,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
    return report


def run_training(cfg: RunConfig, out_dir=None, resume=None):
    seed_everything(cfg.seed)
    out_dir = Path(out_dir) if out_dir else resolve_output_dir(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.yaml", "w") as fh:
        yaml.safe_dump(cfg.raw, fh, sort_keys=True)
    train_ds, query_ds, gallery_ds = build_datasets(cfg)
    model = build_model(cfg, train_ds.num_ids)
    start_epoch, optimizer = 1, None
    if resume:
        payload = load_checkpoint(resume)
        from .training import make_optimizer

        optimizer = make_optimizer(model, cfg.schedule)
        start_epoch = apply_checkpoint(payload, model, optimizer) + 1
    artifacts = train(
        model, train_ds, cfg.schedule, cfg.sampler, cfg.augment, cfg.loss,
        seed=cfg.seed, out_dir=out_dir, config_dict=cfg.raw,
        start_epoch=start_epoch, optimizer=optimizer,
        checkpoint_every=cfg.checkpoint_every, epochs=cfg.train_epochs,
    )
    result = evaluate_model(
        model, query_ds, gallery_ds, cfg.augment, mode=cfg.eval_features,
        l2_normalize=cfg.eval_l2_normalize, max_rank=cfg.eval_max_rank,
    )
    report = write_eval_report(
        out_dir / "eval.json", result, config_hash(cfg.raw)
    )
    print(result.summary())
    return model, artifacts, report


def cmd_train(args):
    cfg = load_config(args.config, args.set or [])
    run_training(cfg, resume=args.resume)
    return EXIT_OK


def cmd_eval(args):
    payload = load_checkpoint(args.checkpoint)
    from .config import build_config

    cfg = build_config(payload["config"])
    if args.dataset:
        cfg.data_source = args.dataset
    _, query_ds, gallery_ds = build_datasets(cfg)
    model = build_model(cfg, payload["model"]["backbone_head.classifier.weight"].shape[0])
    apply_checkpoint(payload, model, restore_rng=False)
    result = evaluate_model(
        model, query_ds, gallery_ds, cfg.augment, mode=args.features,
        l2_normalize=cfg.eval_l2_normalize, max_rank=cfg.eval_max_rank,
    )
    print(result.summary())
    if args.out:
        write_eval_report(args.out, result, payload["manifest"]["config_hash"])
    return EXIT_OK


def cmd_inspect(args):
    payload = load_checkpoint(args.checkpoint)
    from .config import build_config

    cfg = build_config(payload["config"])
    model = build_model(cfg, payload["model"]["backbone_head.classifier.weight"].shape[0])
    apply_checkpoint(payload, model, restore_rng=False)
    model.eval()
    if args.image.startswith("synth://"):
        num_ids, _, seed = parse_synth_uri(args.image)
        rng = np.random.default_rng(seed)
        image = synth_image(0, rng, (cfg.backbone.image_h, cfg.backbone.image_w))
    else:
        image = load_image(Sample(args.image, 0, 0))
    image = augment(image, cfg.augment, train=False).unsqueeze(0)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        outputs = model(image)
    from PIL import Image

    emitted = []
    for level, calib_out in zip(
        outputs["trace"].levels, outputs["trace"].outputs
    ):
        fmap = calib_out.feature[0].mean(dim=0).numpy()
        np.save(out_dir / f"level{level}_map.npy", fmap)
        lo, hi = fmap.min(), fmap.max()
        norm = (fmap - lo) / (hi - lo) if hi > lo else np.zeros_like(fmap)
        img = Image.fromarray((norm * 255).astype(np.uint8), mode="L")
        img_path = out_dir / f"level{level}_map.png"
        img.save(img_path)
        emitted.append(str(img_path))
    print("\n".join(emitted))
    return EXIT_OK


def cmd_sweep(args):
    if not args.values:
        raise ValidationError("sweep needs at least one value")
    rows = []
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    for i, raw_value in enumerate(args.values):
        key, value = parse_override(f"{args.axis}={raw_value}")
        cfg = load_config(args.config, list(args.set or []) + [f"{key}={raw_value}"])
        arm_dir = out_root / f"arm_{i:02d}"
        _, _, report = run_training(cfg, out_dir=arm_dir)
        rows.append((raw_value, report["map"], report["cmc"][0]))
    table_path = out_root / "sweep.csv"
    with open(table_path, "w") as fh:
        fh.write(f"{args.axis},mAP,Rank-1\n")
        for value, m, r1 in rows:
            fh.write(f"\"{value}\",{m:.4f},{r1:.4f}\n")
    width = max(len(str(v)) for v, _, _ in rows + [(args.axis, 0, 0)])
    lines = [f"{args.axis:<{width}}  mAP     Rank-1"]
    for value, m, r1 in rows:
        lines.append(f"{str(value):<{width}}  {m:.4f}  {r1:.4f}")
    text = "\n".join(lines)
    (out_root / "sweep.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="aggreid",
        description="Train and evaluate the hierarchical-aggregation "
                    "retrieval model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", help="YAML run configuration")
    p_train.add_argument("--set", action="append", metavar="KEY=VALUE",
                         help="dotted-path config override")
    p_train.add_argument("--resume", help="checkpoint to resume from")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--dataset", help="override the dataset source")
    p_eval.add_argument("--features", default="concat",
                        choices=["concat", "backbone-only", "hat-only"])
    p_eval.add_argument("--out", help="write the JSON report here")
    p_eval.set_defaults(func=cmd_eval)

    p_inspect = sub.add_parser(
        "inspect", help="dump channel-averaged calibration maps"
    )
    p_inspect.add_argument("checkpoint")
    p_inspect.add_argument("image", help="image path or synth:// URI")
    p_inspect.add_argument("--out", default="inspect_out")
    p_inspect.set_defaults(func=cmd_inspect)

    p_sweep = sub.add_parser("sweep", help="train+eval across one config axis")
    p_sweep.add_argument("--config", help="YAML run configuration")
    p_sweep.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_sweep.add_argument("--axis", required=True,
                         help="config key to vary, e.g. loss.lambda")
    p_sweep.add_argument("--values", nargs="+", required=True)
    p_sweep.add_argument("--out", default="sweep_out")
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ConfigurationError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, CheckpointError, EvaluationError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
