"""Transformer-based feature calibration: tokenize the concatenation of the
current aligned level with the previous output, run post-norm encoder layers
over a CLS-prefixed sequence, and restore local spatial bias with a small
convolution stack (neighborhood adjustment)."""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class AggregationError(ValueError):
    pass


def attention(q, k, v):
    """Scaled dot-product attention. Rows of the softmax weight matrix sum
    to 1, so each output row is a convex combination of the rows of v.

    Accepts (..., n, d) tensors; the scale is 1/sqrt(d).
    """
    d = q.shape[-1]
    weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
    return weights @ v


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        if dim % num_heads:
            raise AggregationError(f"heads {num_heads} must divide width {dim}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        def split(t):
            return t.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        out = attention(q, k, v)
        out = out.transpose(1, 2).reshape(b, n, c)
        return self.out_proj(out)


class FeedForward(nn.Module):
    """Two linear projections with GELU in between."""

    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerLayer(nn.Module):
    """Post-norm encoder layer: LN(x + MSA(x)) then LN(x + FFN(x))."""

    def __init__(self, dim, num_heads, ffn_hidden):
        super().__init__()
        self.msa = MultiHeadSelfAttention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_hidden)
        self.norm2 = nn.LayerNorm(dim)

    def msa_block(self, x):
        return self.norm1(x + self.msa(x))

    def ffn_block(self, x):
        return self.norm2(x + self.ffn(x))

    def forward(self, x):
        return self.ffn_block(self.msa_block(x))


class NeighborhoodAdjust(nn.Module):
    """Stack of two 3x3 convolutions with batch norm reducing token width
    back to the common channel width. With `enabled=False` it degrades to a
    single 1x1 projection."""

    def __init__(self, in_ch, out_ch, enabled=True):
        super().__init__()
        if enabled:
            self.conv = nn.Sequential(
                nn.Conv2d(in_ch, in_ch, 3, padding=1, bias=False),
                nn.BatchNorm2d(in_ch),
                nn.ReLU(inplace=True),
                nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.conv = nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        return self.conv(x)


@dataclass
class CalibrationOutput:
    feature: torch.Tensor  # (B, C, h, w), input to the next level
    cls: torch.Tensor      # (B, C_p), per-level representation


class FeatureCalibration(nn.Module):
    """One per-level calibration stage.

    Channel-concatenates (current, previous) aligned maps into tokens of
    width token_dim, prepends a learned CLS token, adds learned position
    embeddings (CLS slot included), runs `depth` encoder layers, then maps
    the spatial tokens back to a (B, C, h, w) map.
    """

    def __init__(self, common_channels, grid_h, grid_w, depth, num_heads,
                 ffn_ratio=4, use_nea=True, solo_input=False):
        super().__init__()
        if depth <= 0:
            raise AggregationError("calibration stage needs depth >= 1")
        self.grid_h = grid_h
        self.grid_w = grid_w
        self.solo_input = solo_input
        self.token_dim = common_channels if solo_input else 2 * common_channels
        num_tokens = grid_h * grid_w
        self.cls_token = nn.Parameter(torch.zeros(1, 1, self.token_dim))
        self.pos_embedding = nn.Parameter(
            torch.zeros(1, num_tokens + 1, self.token_dim)
        )
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embedding, std=0.02)
        self.layers = nn.ModuleList(
            TransformerLayer(self.token_dim, num_heads, ffn_ratio * self.token_dim)
            for _ in range(depth)
        )
        self.adjust = NeighborhoodAdjust(
            self.token_dim, common_channels, enabled=use_nea
        )

    def tokenize(self, current, previous):
        if self.solo_input:
            z = current
        else:
            if current.shape != previous.shape:
                raise AggregationError(
                    f"aligned shapes differ: {tuple(current.shape)} vs "
                    f"{tuple(previous.shape)}"
                )
            z = torch.cat([current, previous], dim=1)
        b, c, h, w = z.shape
        if (h, w) != (self.grid_h, self.grid_w) or c != self.token_dim:
            raise AggregationError(
                f"expected {self.token_dim}x{self.grid_h}x{self.grid_w}, "
                f"got {c}x{h}x{w}"
            )
        tokens = z.flatten(2).transpose(1, 2)  # row-major spatial order
        cls = self.cls_token.expand(b, -1, -1)
        return torch.cat([cls, tokens], dim=1) + self.pos_embedding

    def untokenize(self, tokens):
        """Spatial tokens back to a (B, token_dim, h, w) map; CLS dropped."""
        b, n1, c = tokens.shape
        if n1 - 1 != self.grid_h * self.grid_w:
            raise AggregationError(
                f"token count {n1 - 1} != grid {self.grid_h}x{self.grid_w}"
            )
        return tokens[:, 1:].transpose(1, 2).reshape(
            b, c, self.grid_h, self.grid_w
        )

    def forward(self, current, previous):
        x = self.tokenize(current, previous)
        for layer in self.layers:
            x = layer(x)
        cls = x[:, 0]
        feature = self.adjust(self.untokenize(x))
        return CalibrationOutput(feature=feature, cls=cls)
