"""Multi-scale feature extractor: a 4-stage residual CNN plus the bottleneck
and scaling modules that align every stage to a common channel width and
spatial resolution."""

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigurationError(ValueError):
    pass


@dataclass
class BackboneConfig:
    stage_channels: tuple = (32, 64, 128, 256)
    blocks_per_stage: tuple = (1, 1, 1, 1)
    common_channels: int = 64
    scaling_divisor: int = 16
    image_h: int = 256
    image_w: int = 128

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.blocks_per_stage = tuple(self.blocks_per_stage)
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ConfigurationError("backbone needs exactly 4 stages")
        if self.scaling_divisor not in (8, 16, 32):
            raise ConfigurationError(
                f"scaling_divisor must be 8, 16 or 32, got {self.scaling_divisor}"
            )
        if self.image_h % self.scaling_divisor or self.image_w % self.scaling_divisor:
            raise ConfigurationError(
                f"scaling_divisor {self.scaling_divisor} must divide input size "
                f"{self.image_h}x{self.image_w}"
            )
        if self.common_channels <= 0:
            raise ConfigurationError("common_channels must be positive")

    @property
    def aligned_hw(self):
        return self.image_h // self.scaling_divisor, self.image_w // self.scaling_divisor


class ResidualBlock(nn.Module):
    """3x3-3x3 residual block with batch norm; 1x1 projection shortcut when
    the channel count or stride changes."""

    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if in_ch != out_ch or stride != 1:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class MultiScaleBackbone(nn.Module):
    """4-stage hierarchical CNN. Stage s halves the resolution of stage s-1;
    the stem reduces by 4x, so stage spatial sizes are H/4, H/8, H/16, H/32.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        c0 = cfg.stage_channels[0]
        self.stem = nn.Sequential(
            nn.Conv2d(3, c0, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(c0),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_ch = c0
        for s, (out_ch, nblocks) in enumerate(
            zip(cfg.stage_channels, cfg.blocks_per_stage)
        ):
            blocks = [ResidualBlock(in_ch, out_ch, stride=2)]
            blocks += [ResidualBlock(out_ch, out_ch) for _ in range(nblocks - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        # per-level bottlenecks projecting each stage to the common width
        self.bottlenecks = nn.ModuleList(
            ResidualBlock(c, cfg.common_channels) for c in cfg.stage_channels
        )

    def extract_hierarchy(self, images):
        """Raw per-stage feature maps, strictly decreasing spatial size."""
        b, c, h, w = images.shape
        if c != 3 or h != self.cfg.image_h or w != self.cfg.image_w:
            raise ConfigurationError(
                f"expected input {3}x{self.cfg.image_h}x{self.cfg.image_w}, "
                f"got {c}x{h}x{w}"
            )
        x = self.stem(images)
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out

    def bottleneck(self, x, level):
        """Project the raw stage output at `level` (1-based) to the common
        channel width; spatial size is unchanged."""
        return self.bottlenecks[level - 1](x)

    def align(self, hierarchy):
        """Bottleneck then rescale every level to (H/d, W/d)."""
        th, tw = self.cfg.aligned_hw
        return [
            rescale(self.bottleneck(x, level), th, tw)
            for level, x in enumerate(hierarchy, start=1)
        ]

    def forward(self, images):
        return self.align(self.extract_hierarchy(images))

    def global_feature(self, hierarchy):
        """Globally average-pooled final-stage feature (pre-neck)."""
        return hierarchy[-1].mean(dim=(2, 3))

    def load_weights(self, arrays, strict=True):
        """Import hook: load a key->array mapping produced elsewhere (e.g. a
        converted full-size backbone checkpoint)."""
        tensors = {k: torch.as_tensor(v) for k, v in arrays.items()}
        missing, unexpected = self.load_state_dict(tensors, strict=strict)
        return missing, unexpected


def rescale(x, target_h, target_w):
    """Max-pool down when the input is larger, bilinear-upsample when smaller
    (align_corners=False), identity when equal."""
    h, w = x.shape[-2:]
    if h == target_h and w == target_w:
        return x
    if h >= target_h and w >= target_w:
        if h % target_h or w % target_w:
            raise ConfigurationError(
                f"non-integer pooling ratio: {h}x{w} -> {target_h}x{target_w}"
            )
        return F.max_pool2d(x, (h // target_h, w // target_w))
    if h <= target_h and w <= target_w:
        return F.interpolate(
            x, size=(target_h, target_w), mode="bilinear", align_corners=False
        )
    raise ConfigurationError(
        f"mixed up/down rescale unsupported: {h}x{w} -> {target_h}x{target_w}"
    )
