"""Label-smoothed identity loss, batch-hard triplet loss, and the
lambda-weighted total objective over the main and auxiliary heads."""

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F


@dataclass
class LossConfig:
    epsilon: float = 0.1
    margin: float = 0.3
    lam: float = 0.5
    normalize_embeddings: bool = False

    def __post_init__(self):
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"epsilon must be in [0, 1), got {self.epsilon}")
        if self.margin < 0 or self.lam < 0:
            raise ValueError("margin and lambda must be non-negative")


@dataclass
class LossReport:
    id_loss: float
    triplet_loss: float
    aux_losses: list
    total: torch.Tensor  # differentiable scalar

    @property
    def aux_total(self):
        return float(sum(self.aux_losses))


def id_loss(logits, labels, epsilon=0.1):
    """Cross-entropy against label-smoothed targets: the true class gets
    1 - eps + eps/N, every other class eps/N. Mean over the batch."""
    n_cls = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_cls:
        raise ValueError(f"labels must be in [0, {n_cls}), got "
                         f"[{int(labels.min())}, {int(labels.max())}]")
    log_p = F.log_softmax(logits, dim=1)
    smooth = epsilon / n_cls
    targets = torch.full_like(log_p, smooth)
    targets.scatter_(1, labels.view(-1, 1), 1 - epsilon + smooth)
    return -(targets * log_p).sum(dim=1).mean()


def pairwise_distances(x, y=None):
    """Euclidean distance matrix, clamped for numerical safety."""
    y = x if y is None else y
    d2 = (
        x.pow(2).sum(1, keepdim=True)
        + y.pow(2).sum(1)
        - 2.0 * x @ y.t()
    )
    # clamp above zero: sqrt has an infinite derivative at 0 and the
    # self-distance diagonal would poison the backward pass with NaNs
    return d2.clamp(min=1e-12).sqrt()


def triplet_loss(embeddings, labels, margin=0.3, normalize=False):
    """Batch-hard mining: per anchor, the farthest same-label sample and the
    nearest different-label sample; hinge at `margin`, averaged over anchors.
    """
    if normalize:
        embeddings = F.normalize(embeddings, dim=1)
    dist = pairwise_distances(embeddings)
    same = labels.view(-1, 1) == labels.view(1, -1)
    if not (same.sum(1) > 1).all() or same.all():
        raise ValueError("every anchor needs a positive and a negative in batch")
    inf = torch.finfo(dist.dtype).max
    d_pos = dist.masked_fill(~same, -inf).max(dim=1).values
    d_neg = dist.masked_fill(same, inf).min(dim=1).values
    return F.relu(d_pos - d_neg + margin).mean()


def total_loss(main_logits, main_embedding, aux_outputs, labels, cfg: LossConfig):
    """Main id + triplet terms plus lambda-weighted auxiliary id + triplet
    terms, one per active level. Main may be None (supervision toggled off).
    """
    zero = labels.new_zeros((), dtype=torch.float32)
    if main_logits is not None:
        lid = id_loss(main_logits, labels, cfg.epsilon)
        ltri = triplet_loss(
            main_embedding, labels, cfg.margin, cfg.normalize_embeddings
        )
    else:
        lid = ltri = zero
    aux = [
        id_loss(logits, labels, cfg.epsilon)
        + triplet_loss(emb, labels, cfg.margin, cfg.normalize_embeddings)
        for logits, emb in aux_outputs
    ]
    total = lid + ltri + cfg.lam * sum(aux, zero)
    return LossReport(
        id_loss=float(lid.detach()),
        triplet_loss=float(ltri.detach()),
        aux_losses=[float(a.detach()) for a in aux],
        total=total,
    )
