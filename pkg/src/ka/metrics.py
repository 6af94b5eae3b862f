"""Retrieval (mAP / CMC) and attribute (ma / instance P, R, F1) metrics.

Pure numpy, written so a brute-force re-computation can match them
exactly on small instances. Retrieval follows the standard single-query
protocol: gallery items sharing both identity and camera with the query
are excluded from its ranking, and queries left without any valid
positive are dropped from the averages.
"""

from dataclasses import dataclass, field

import numpy as np

DEFAULT_RANKS = (1, 5, 10)


@dataclass(frozen=True)
class ReidMetrics:
    map: float
    cmc: dict[int, float]

    def __post_init__(self):
        if not 0.0 <= self.map <= 1.0:
            raise ValueError(f"map outside [0, 1]: {self.map}")
        ranks = sorted(self.cmc)
        vals = [self.cmc[k] for k in ranks]
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ValueError(f"cmc outside [0, 1]: {self.cmc}")
        if any(a > b + 1e-12 for a, b in zip(vals, vals[1:])):
            raise ValueError(f"cmc must be non-decreasing in rank: {self.cmc}")


@dataclass(frozen=True)
class ParMetrics:
    ma: float
    precision: float
    recall: float
    f1: float

    def __post_init__(self):
        for name in ("ma", "precision", "recall", "f1"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} outside [0, 1]: {v}")


@dataclass(frozen=True)
class MetricsReport:
    """Validation/test results for whichever tasks a model has."""

    reid: ReidMetrics | None = None
    par: ParMetrics | None = None

    def __post_init__(self):
        if self.reid is None and self.par is None:
            raise ValueError("at least one metric block must be present")

    def primary_score(self) -> float:
        """Mean of retrieval mAP and attribute F1 over the enabled tasks."""
        parts = []
        if self.reid is not None:
            parts.append(self.reid.map)
        if self.par is not None:
            parts.append(self.par.f1)
        return float(np.mean(parts))

    def task_set(self) -> tuple[bool, bool]:
        return (self.reid is not None, self.par is not None)


def _l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(norms, 1e-12)


def reid_map_cmc(query_feats, query_ids, query_cams,
                 gallery_feats, gallery_ids, gallery_cams,
                 ranks=DEFAULT_RANKS) -> ReidMetrics:
    """mAP and CMC of cosine-ranked retrieval under the same-id/same-cam
    exclusion protocol.

    Per query the gallery is sorted by descending cosine similarity
    (ties broken by gallery index); items sharing the query's identity
    AND camera are dropped. AP is the mean of precision at each true
    positive; cmc[k] is the fraction of evaluable queries with a match
    in the top k kept items.
    """
    qf = _l2_normalize(np.asarray(query_feats))
    gf = _l2_normalize(np.asarray(gallery_feats))
    q_ids = np.asarray(query_ids)
    g_ids = np.asarray(gallery_ids)
    q_cams = np.asarray(query_cams)
    g_cams = np.asarray(gallery_cams)
    if qf.shape[0] < 1 or gf.shape[0] < 1:
        raise ValueError("need at least one query and one gallery item")
    if qf.shape[1] != gf.shape[1]:
        raise ValueError(f"feature dim mismatch: {qf.shape[1]} vs {gf.shape[1]}")

    sims = qf @ gf.T
    aps = []
    hits = {k: 0 for k in ranks}
    for qi in range(qf.shape[0]):
        order = np.argsort(-sims[qi], kind="stable")
        keep = ~((g_ids[order] == q_ids[qi]) & (g_cams[order] == q_cams[qi]))
        matches = (g_ids[order] == q_ids[qi])[keep]
        if not matches.any():
            continue  # no valid positive for this query
        positives = np.flatnonzero(matches)
        precisions = (np.arange(len(positives)) + 1.0) / (positives + 1.0)
        aps.append(precisions.mean())
        first = positives[0]
        for k in ranks:
            if first < k:
                hits[k] += 1
    if not aps:
        raise ValueError("no evaluable queries: every query lacks a valid positive")
    n_valid = len(aps)
    cmc = {k: hits[k] / n_valid for k in sorted(ranks)}
    return ReidMetrics(map=float(np.mean(aps)), cmc=cmc)


def par_metrics(pred, gt, threshold: float = 0.5) -> ParMetrics:
    """Attribute metrics from predicted probabilities.

    Predictions binarize as p >= threshold. ``ma`` is the mean over
    attributes of balanced accuracy, where an attribute with no positive
    (or no negative) samples averages only its defined rate. Instance
    precision/recall skip rows with no predicted/true positives; f1
    combines the two means (0 when both are 0).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if not np.isin(gt, (0, 1)).all():
        raise ValueError("ground truth must be binary")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    gt = gt.astype(bool)
    hard = pred >= threshold

    accs = []
    for m in range(gt.shape[1]):
        p_mask, n_mask = gt[:, m], ~gt[:, m]
        rates = []
        if p_mask.any():
            rates.append((hard[:, m] & p_mask).sum() / p_mask.sum())
        if n_mask.any():
            rates.append((~hard[:, m] & n_mask).sum() / n_mask.sum())
        accs.append(sum(rates) / len(rates))
    ma = float(np.mean(accs))

    precs, recs = [], []
    for i in range(gt.shape[0]):
        inter = (hard[i] & gt[i]).sum()
        if hard[i].any():
            precs.append(inter / hard[i].sum())
        if gt[i].any():
            recs.append(inter / gt[i].sum())
    precision = float(np.mean(precs)) if precs else 0.0
    recall = float(np.mean(recs)) if recs else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return ParMetrics(ma=ma, precision=precision, recall=recall, f1=float(f1))
