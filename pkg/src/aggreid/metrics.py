"""Retrieval evaluation: distance matrices, per-query average precision and
the cumulative matching characteristic curve with standard junk filtering."""

from dataclasses import dataclass

import numpy as np


class EvaluationError(RuntimeError):
    pass


@dataclass
class EvalResult:
    map: float
    cmc: np.ndarray           # index k-1 holds rank-k
    per_query_ap: np.ndarray
    num_valid_queries: int

    def summary(self, ranks=(1, 5, 10)):
        parts = [f"mAP: {self.map:.4f}"]
        for r in ranks:
            if r <= len(self.cmc):
                parts.append(f"Rank-{r}: {self.cmc[r - 1]:.4f}")
        return "  ".join(parts)


def test_feature(backbone_global, hat_cls):
    """Test-time retrieval feature: channel concatenation of the pooled
    backbone feature and the final calibration CLS."""
    if backbone_global.shape[0] != hat_cls.shape[0]:
        raise ValueError("batch dimensions differ")
    return np.concatenate(
        [np.asarray(backbone_global), np.asarray(hat_cls)], axis=1
    )


def distance_matrix(query_feats, gallery_feats, l2_normalize=False):
    q = np.asarray(query_feats, dtype=np.float64)
    g = np.asarray(gallery_feats, dtype=np.float64)
    if l2_normalize:
        q = q / np.linalg.norm(q, axis=1, keepdims=True).clip(min=1e-12)
        g = g / np.linalg.norm(g, axis=1, keepdims=True).clip(min=1e-12)
    d2 = (
        (q ** 2).sum(1)[:, None] + (g ** 2).sum(1)[None, :] - 2.0 * q @ g.T
    )
    return np.sqrt(np.clip(d2, 0, None))


def evaluate(dist, query_pids, query_camids, gallery_pids, gallery_camids,
             max_rank=10):
    """mAP and CMC under the standard protocol: per query, gallery entries
    sharing both identity and camera with the query are dropped, as are
    distractor entries (pid < 0); queries with no remaining true match are
    excluded from both averages. Ties break by gallery index (stable)."""
    dist = np.asarray(dist, dtype=np.float64)
    query_pids = np.asarray(query_pids)
    query_camids = np.asarray(query_camids)
    gallery_pids = np.asarray(gallery_pids)
    gallery_camids = np.asarray(gallery_camids)
    num_q, num_g = dist.shape
    max_rank = min(max_rank, num_g)

    aps = []
    cmc_sum = np.zeros(max_rank)
    for qi in range(num_q):
        order = np.argsort(dist[qi], kind="stable")
        keep = ~(
            ((gallery_pids[order] == query_pids[qi])
             & (gallery_camids[order] == query_camids[qi]))
            | (gallery_pids[order] < 0)
        )
        matches = (gallery_pids[order] == query_pids[qi])[keep]
        if not matches.any():
            continue
        hits = np.where(matches)[0]
        precision = (np.arange(len(hits)) + 1) / (hits + 1)
        aps.append(precision.mean())
        cmc = np.zeros(max_rank)
        first = hits[0]
        if first < max_rank:
            cmc[first:] = 1.0
        cmc_sum += cmc
    if not aps:
        raise EvaluationError("no query has a valid gallery match")
    aps = np.asarray(aps)
    return EvalResult(
        map=float(aps.mean()),
        cmc=cmc_sum / len(aps),
        per_query_ap=aps,
        num_valid_queries=len(aps),
    )
