import numpy as np
import pytest
import torch

from aggreid.aggregation import AggregationConfig, ReIDNet
from aggreid.backbone import BackboneConfig


def fd_grad(fn, x, eps=1e-6):
    """Central-difference gradient of a scalar function, double precision."""
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = float(fn(x))
            flat[i] = orig - eps
            fm = float(fn(x))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return grad


def assert_grad_close(fn, x, rel_tol=1e-4, eps=1e-6):
    """Compare autograd against central differences at relative tolerance."""
    x = x.detach().clone().double().requires_grad_(True)
    out = fn(x)
    out.backward()
    auto = x.grad.clone()
    numeric = fd_grad(fn, x.detach().clone(), eps=eps)
    denom = max(float(auto.abs().max()), float(numeric.abs().max()), 1e-3)
    rel = float((auto - numeric).abs().max()) / denom
    assert rel < rel_tol, f"gradient mismatch: rel err {rel:.2e}"


def tiny_backbone_cfg():
    return BackboneConfig(
        stage_channels=(4, 4, 8, 8),
        blocks_per_stage=(1, 1, 1, 1),
        common_channels=8,
        scaling_divisor=16,
        image_h=32,
        image_w=16,
    )


def desk_backbone_cfg():
    return BackboneConfig(image_h=64, image_w=32)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def make_model(depths=(3, 3, 6, 0), num_ids=16, backbone_cfg=None, **agg_kwargs):
    torch.manual_seed(0)
    return ReIDNet(
        backbone_cfg or desk_backbone_cfg(),
        AggregationConfig(depths=depths, **agg_kwargs),
        num_ids,
    )
