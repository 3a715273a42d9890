"""Deeply supervised aggregation: drives the low-to-high recursion over the
aligned hierarchy, skipping levels with zero transformer depth, and exposes
per-level CLS representations with classifier heads for auxiliary
supervision. Also assembles the full retrieval network."""

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .backbone import BackboneConfig, ConfigurationError, MultiScaleBackbone
from .calibration import CalibrationOutput, FeatureCalibration


@dataclass
class AggregationConfig:
    depths: tuple = (3, 3, 6, 0)
    lam: float = 0.5
    num_heads: int = 8
    ffn_ratio: int = 4
    use_aux_loss: bool = True
    use_nea: bool = True
    use_mfe_supervision: bool = True
    # "duplicate": first active stage sees its own map as the previous input
    # (uniform token width); "solo": first stage tokenizes its map alone.
    first_level_bootstrap: str = "duplicate"

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        if len(self.depths) != 4 or any(d < 0 for d in self.depths):
            raise ConfigurationError(f"depths must be 4 non-negative ints: {self.depths}")
        if not any(self.depths):
            raise ConfigurationError("at least one level must have depth > 0")
        if self.lam < 0:
            raise ConfigurationError("lambda must be non-negative")
        if self.first_level_bootstrap not in ("duplicate", "solo"):
            raise ConfigurationError(
                f"unknown bootstrap mode {self.first_level_bootstrap!r}"
            )

    @property
    def active_levels(self):
        """1-based levels participating in the recursion."""
        return [i + 1 for i, d in enumerate(self.depths) if d > 0]


@dataclass
class AggregationTrace:
    levels: list                    # active levels, low to high
    outputs: list                   # CalibrationOutput per active level

    @property
    def final_cls(self):
        return self.outputs[-1].cls


def dsa_aggregate(aligned, cfg: AggregationConfig, stages):
    """Run the recursion: the first active level is calibrated against its
    own aligned map, each later active level against the previous stage's
    output feature. `stages` maps level -> callable(current, previous).
    """
    if len(aligned) != 4:
        raise ConfigurationError(f"expected 4 aligned maps, got {len(aligned)}")
    levels = cfg.active_levels
    outputs = []
    previous = None
    for level in levels:
        current = aligned[level - 1]
        out = stages[level](current, current if previous is None else previous)
        outputs.append(out)
        previous = out.feature
    return AggregationTrace(levels=levels, outputs=outputs)


class ClassifierHead(nn.Module):
    """Batch-norm neck followed by a bias-free linear classifier. The necked
    feature is the retrieval embedding; logits come from the classifier."""

    def __init__(self, dim, num_ids):
        super().__init__()
        self.neck = nn.BatchNorm1d(dim)
        self.neck.bias.requires_grad_(False)
        self.classifier = nn.Linear(dim, num_ids, bias=False)

    def forward(self, x):
        necked = self.neck(x)
        return self.classifier(necked), necked


class ReIDNet(nn.Module):
    """Backbone hierarchy + per-level transformer calibration, with a global
    backbone head and one auxiliary head per active level."""

    def __init__(self, backbone_cfg: BackboneConfig, agg_cfg: AggregationConfig,
                 num_ids: int):
        super().__init__()
        self.backbone_cfg = backbone_cfg
        self.agg_cfg = agg_cfg
        self.num_ids = num_ids
        self.backbone = MultiScaleBackbone(backbone_cfg)
        gh, gw = backbone_cfg.aligned_hw
        c = backbone_cfg.common_channels
        stages = {}
        for i, level in enumerate(agg_cfg.active_levels):
            stages[str(level)] = FeatureCalibration(
                common_channels=c,
                grid_h=gh,
                grid_w=gw,
                depth=agg_cfg.depths[level - 1],
                num_heads=agg_cfg.num_heads,
                ffn_ratio=agg_cfg.ffn_ratio,
                use_nea=agg_cfg.use_nea,
                solo_input=(i == 0 and agg_cfg.first_level_bootstrap == "solo"),
            )
        self.stages = nn.ModuleDict(stages)
        self.aux_heads = nn.ModuleDict(
            {
                str(level): ClassifierHead(self.stages[str(level)].token_dim, num_ids)
                for level in agg_cfg.active_levels
            }
        )
        self.backbone_head = ClassifierHead(backbone_cfg.stage_channels[-1], num_ids)

    def stage_fns(self):
        return {int(k): v for k, v in self.stages.items()}

    def forward(self, images):
        hierarchy = self.backbone.extract_hierarchy(images)
        aligned = self.backbone.align(hierarchy)
        trace = dsa_aggregate(aligned, self.agg_cfg, self.stage_fns())
        bb_embedding = self.backbone.global_feature(hierarchy)
        bb_logits, bb_necked = self.backbone_head(bb_embedding)
        level_logits, level_necked = [], []
        for level, out in zip(trace.levels, trace.outputs):
            logits, necked = self.aux_heads[str(level)](out.cls)
            level_logits.append(logits)
            level_necked.append(necked)
        return {
            "aligned": aligned,
            "trace": trace,
            "backbone_embedding": bb_embedding,
            "backbone_necked": bb_necked,
            "backbone_logits": bb_logits,
            "level_cls": [o.cls for o in trace.outputs],
            "level_necked": level_necked,
            "level_logits": level_logits,
        }

    @torch.no_grad()
    def extract_test_features(self, images, mode="concat"):
        """Retrieval features: necked backbone global feature concatenated
        with the necked final-level CLS (or either alone)."""
        out = self.forward(images)
        if mode == "backbone-only":
            return out["backbone_necked"]
        if mode == "hat-only":
            return out["level_necked"][-1]
        if mode == "concat":
            return torch.cat([out["backbone_necked"], out["level_necked"][-1]], dim=1)
        raise ConfigurationError(f"unknown feature mode {mode!r}")

    def parameter_groups(self):
        """(base, calibration) parameter lists; the calibration group is
        trained at half the base learning rate."""
        calib_prefixes = ("stages.", "aux_heads.")
        base, calib = [], []
        for name, p in self.named_parameters():
            (calib if name.startswith(calib_prefixes) else base).append(p)
        return base, calib
