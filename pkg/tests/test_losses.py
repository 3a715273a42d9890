import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from aggreid.losses import (LossConfig, id_loss, pairwise_distances,
                            total_loss, triplet_loss)
from conftest import assert_grad_close


def smoothed_ce_oracle(logits, labels, eps):
    """Hand-rolled -sum(q log p) with explicit softmax, numpy."""
    logits = np.asarray(logits, dtype=np.float64)
    n, c = logits.shape
    losses = []
    for i in range(n):
        z = logits[i] - logits[i].max()
        p = np.exp(z) / np.exp(z).sum()
        q = np.full(c, eps / c)
        q[labels[i]] += 1 - eps
        losses.append(-(q * np.log(p)).sum())
    return float(np.mean(losses))


def triplet_oracle(emb, labels, margin):
    """Exhaustive batch-hard mining in numpy."""
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    dist = np.sqrt(
        np.maximum(
            ((emb[:, None] - emb[None, :]) ** 2).sum(-1), 1e-12
        )
    )
    terms = []
    for a in range(n):
        d_pos = max(dist[a][j] for j in range(n) if labels[j] == labels[a])
        d_neg = min(dist[a][j] for j in range(n) if labels[j] != labels[a])
        terms.append(max(0.0, d_pos - d_neg + margin))
    return float(np.mean(terms))


def test_id_loss_uniform_logits():
    logits = torch.zeros(3, 4)
    labels = torch.tensor([0, 1, 3])
    for eps in (0.0, 0.1, 0.5):
        assert math.isclose(float(id_loss(logits, labels, eps)), math.log(4),
                            rel_tol=1e-6)


def test_id_loss_two_class_hand_computed():
    # p = [0.9, 0.1], true class 0, eps = 0.1 -> q = [0.95, 0.05]
    logits = torch.log(torch.tensor([[0.9, 0.1]]))
    loss = float(id_loss(logits, torch.tensor([0]), 0.1))
    expected = -(0.95 * math.log(0.9) + 0.05 * math.log(0.1))
    assert abs(expected - 0.21522) < 1e-4
    assert math.isclose(loss, expected, rel_tol=1e-6)


def test_id_loss_zero_eps_is_cross_entropy():
    logits = torch.randn(8, 5, dtype=torch.float64)
    labels = torch.randint(0, 5, (8,))
    ours = float(id_loss(logits, labels, 0.0))
    ref = float(F.cross_entropy(logits, labels))
    assert abs(ours - ref) < 1e-7


def test_id_loss_matches_oracle_random():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n, c = int(rng.integers(2, 9)), int(rng.integers(2, 7))
        logits = rng.standard_normal((n, c))
        labels = rng.integers(0, c, size=n)
        ours = float(
            id_loss(torch.tensor(logits), torch.tensor(labels), 0.1)
        )
        assert math.isclose(ours, smoothed_ce_oracle(logits, labels, 0.1),
                            rel_tol=1e-9)


def test_id_loss_decreases_with_true_class_confidence():
    labels = torch.tensor([0])
    prev = float("inf")
    for conf in (0.0, 1.0, 2.0, 4.0):
        loss = float(id_loss(torch.tensor([[conf, 0.0, 0.0]]), labels, 0.1))
        assert loss < prev
        prev = loss


def test_id_loss_label_out_of_range():
    with pytest.raises(ValueError):
        id_loss(torch.zeros(1, 3), torch.tensor([3]), 0.1)


def test_triplet_hinge_inactive():
    # d_pos=1, d_neg=2, margin=0.3 -> 0
    emb = torch.tensor([[0.0], [1.0], [2.0], [3.0]])
    # anchors: pos dist 1, neg dists >= ... construct simple 2x2
    labels = torch.tensor([0, 0, 1, 1])
    assert float(triplet_loss(emb, labels, margin=0.3)) == pytest.approx(
        triplet_oracle(emb, labels, 0.3)
    )


def test_triplet_hinge_arithmetic():
    assert max(0.0, 2.0 - 1.5 + 0.3) == pytest.approx(0.8)
    emb = torch.tensor([[0.0], [2.0], [3.5], [5.5]])
    labels = torch.tensor([0, 0, 1, 1])
    # anchor 0: d_pos=2, d_neg=3.5 -> 0; anchor 1: d_pos=2, d_neg=1.5 -> 0.8
    # anchor 2: d_pos=2, d_neg=1.5 -> 0.8; anchor 3: d_pos=2, d_neg=3.5 -> 0
    assert float(triplet_loss(emb, labels, 0.3)) == pytest.approx(0.4)


def test_triplet_separated_clusters_zero_loss():
    emb = torch.tensor([[0.0], [1.0], [10.0], [12.0]])
    labels = torch.tensor([0, 0, 1, 1])
    assert float(triplet_loss(emb, labels, 0.3)) == 0.0
    assert triplet_oracle(emb, labels, 0.3) == 0.0


def test_triplet_matches_exhaustive_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        p = int(rng.integers(2, 8))
        l = int(rng.integers(2, 5))
        n = p * l
        assert n <= 32
        emb = rng.standard_normal((n, int(rng.integers(1, 6))))
        labels = np.repeat(np.arange(p), l)
        ours = float(
            triplet_loss(torch.tensor(emb), torch.tensor(labels), 0.3)
        )
        assert math.isclose(ours, triplet_oracle(emb, labels, 0.3),
                            rel_tol=1e-9, abs_tol=1e-12)


def test_triplet_requires_positives_and_negatives():
    with pytest.raises(ValueError):
        triplet_loss(torch.randn(3, 2), torch.tensor([0, 1, 2]), 0.3)
    with pytest.raises(ValueError):
        triplet_loss(torch.randn(3, 2), torch.tensor([0, 0, 0]), 0.3)


def test_pairwise_distances_basics():
    x = torch.tensor([[0.0, 0.0], [3.0, 4.0]])
    d = pairwise_distances(x)
    assert d[0, 1] == pytest.approx(5.0)
    assert d[1, 0] == pytest.approx(5.0)


def make_batch(lam=0.5, aux_count=3, fixed_aux=None):
    torch.manual_seed(0)
    labels = torch.tensor([0, 0, 1, 1])
    logits = torch.randn(4, 5)
    emb = torch.randn(4, 8)
    aux = [(torch.randn(4, 5), torch.randn(4, 8)) for _ in range(aux_count)]
    cfg = LossConfig(lam=lam)
    return logits, emb, aux, labels, cfg


def test_total_loss_lambda_zero_is_main_only():
    logits, emb, aux, labels, _ = make_batch()
    cfg = LossConfig(lam=0.0)
    report = total_loss(logits, emb, aux, labels, cfg)
    expected = float(id_loss(logits, labels, cfg.epsilon)) + float(
        triplet_loss(emb, labels, cfg.margin)
    )
    assert float(report.total) == pytest.approx(expected)


def test_total_loss_linear_in_lambda():
    logits, emb, aux, labels, _ = make_batch()
    totals = {}
    for lam in (0.0, 0.5, 1.0):
        totals[lam] = float(
            total_loss(logits, emb, aux, labels, LossConfig(lam=lam)).total
        )
    aux_sum = totals[1.0] - totals[0.0]
    assert totals[0.5] == pytest.approx(totals[0.0] + 0.5 * aux_sum, rel=1e-6)
    report = total_loss(logits, emb, aux, labels, LossConfig(lam=1.0))
    assert aux_sum == pytest.approx(report.aux_total, rel=1e-5)


def test_total_loss_equal_aux_terms_scale():
    # 3 identical aux heads contributing a each: total - main = 1.5 a
    logits, emb, _, labels, _ = make_batch()
    one_aux = (torch.randn(4, 5), torch.randn(4, 8))
    cfg = LossConfig(lam=0.5)
    report = total_loss(logits, emb, [one_aux] * 3, labels, cfg)
    a = report.aux_losses[0]
    main = float(total_loss(logits, emb, [], labels, cfg).total)
    assert float(report.total) - main == pytest.approx(1.5 * a, rel=1e-5)


def test_total_loss_report_invariant():
    logits, emb, aux, labels, cfg = make_batch()
    report = total_loss(logits, emb, aux, labels, cfg)
    assert float(report.total) == pytest.approx(
        report.id_loss + report.triplet_loss + cfg.lam * report.aux_total,
        rel=1e-6,
    )


def test_total_loss_without_main():
    _, _, aux, labels, cfg = make_batch()
    report = total_loss(None, None, aux, labels, cfg)
    assert report.id_loss == 0.0 and report.triplet_loss == 0.0
    assert float(report.total) == pytest.approx(cfg.lam * report.aux_total,
                                                rel=1e-6)


def test_id_loss_gradient():
    labels = torch.tensor([0, 2, 1])

    def fn(x):
        return id_loss(x, labels, 0.1)

    assert_grad_close(fn, torch.randn(3, 4, dtype=torch.float64))


def test_triplet_loss_gradient():
    labels = torch.tensor([0, 0, 1, 1])

    def fn(x):
        return triplet_loss(x, labels, 0.3)

    torch.manual_seed(5)
    assert_grad_close(fn, torch.randn(4, 3, dtype=torch.float64))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(epsilon=1.0)
    with pytest.raises(ValueError):
        LossConfig(margin=-0.1)
