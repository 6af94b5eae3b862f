"""Independent brute-force reference computations used by the tests.

Everything here is written from the defining formulas with plain numpy
and explicit loops, deliberately not sharing code with the package.
"""

import numpy as np


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def ce_per_sample(logits, ids):
    """-log softmax(logits)[id] per row, via the log-sum-exp definition."""
    logits = np.asarray(logits, dtype=np.float64)
    out = []
    for row, k in zip(logits, ids):
        m = row.max()
        logz = m + np.log(np.exp(row - m).sum())
        out.append(logz - row[int(k)])
    return out


def bce_per_sample(logits, targets):
    """Per-row mean over attributes of -(t log s + (1-t) log(1-s))."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    out = []
    for row, t in zip(logits, targets):
        s = sigmoid(row)
        out.append(float(np.mean(-(t * np.log(s) + (1 - t) * np.log(1 - s)))))
    return out


def bce_soft_target(pred_logits, pseudo_logits):
    """Mean BCE of pred against sigmoid(pseudo) as a soft target."""
    pred = np.asarray(pred_logits, dtype=np.float64).ravel()
    t = sigmoid(np.asarray(pseudo_logits, dtype=np.float64).ravel())
    s = sigmoid(pred)
    vals = -(t * np.log(s) + (1 - t) * np.log(1 - s))
    return float(np.mean(vals))


def dice_value(pred_logits, pseudo_logits, smooth):
    p = sigmoid(pred_logits).ravel()
    q = sigmoid(pseudo_logits).ravel()
    return float(1.0 - (2.0 * (p * q).sum() + smooth) / ((p * p).sum() + (q * q).sum() + smooth))


def triplet_value(anchor, ref, margin):
    anchor = np.asarray(anchor, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    n = anchor.shape[0]
    total = 0.0
    for i in range(n):
        pos = np.sqrt(((anchor[i] - ref[i]) ** 2).sum())
        neg = min(np.sqrt(((anchor[i] - ref[j]) ** 2).sum())
                  for j in range(n) if j != i)
        total += max(0.0, margin + pos - neg)
    return total / n


def _np(t):
    return t.detach().numpy().astype(np.float64)


def eq1_supervised(d):
    """Term-by-term supervised total: per-sample CE/BCE of both instances,
    each dataset's sum scaled by its sub-batch size."""
    n_a, n_b = d.n_a, d.n_b
    ids = d.batch.a_person_ids()
    attrs = d.batch.b_attributes()
    total = 0.0
    if d.left.reid_logits is not None:
        term = sum(ce_per_sample(_np(d.left.reid_logits)[:n_a], ids)) \
             + sum(ce_per_sample(_np(d.right.reid_logits)[:n_a], ids))
        total += term / n_a
    if d.left.par_logits is not None:
        term = sum(bce_per_sample(_np(d.left.par_logits)[n_a:], attrs)) \
             + sum(bce_per_sample(_np(d.right.par_logits)[n_a:], attrs))
        total += term / n_b
    return total


def _semi_reid_pair(pred, pseudo, rows, cfg):
    total = 0.0
    if cfg.include_triplet and pred.reid_features is not None:
        total += triplet_value(_np(pred.reid_features)[rows], _np(pseudo.reid_features)[rows],
                               cfg.triplet_margin)
    if pred.dataset_logit is not None:
        total += bce_soft_target(_np(pred.dataset_logit)[rows], _np(pseudo.dataset_logit)[rows])
    return total


def _semi_par_pair(pred, pseudo, rows, cfg):
    total = 0.0
    if pred.par_logits is not None:
        total += dice_value(_np(pred.par_logits)[rows], _np(pseudo.par_logits)[rows],
                            cfg.dice_smooth)
        if cfg.include_triplet:
            total += triplet_value(_np(pred.par_features)[rows], _np(pseudo.par_features)[rows],
                                   cfg.triplet_margin)
    return total


def eq2_unlabeled(d, cfg):
    """Consistency on the unlabeled tasks: attribute terms on A rows,
    identity terms on B rows, both directions, 1/|sub-batch| scaling."""
    a_rows = slice(0, d.n_a)
    b_rows = slice(d.n_a, None)
    total = 0.0
    par = _semi_par_pair(d.left, d.right, a_rows, cfg) \
        + _semi_par_pair(d.right, d.left, a_rows, cfg)
    total += par / d.n_a
    reid = _semi_reid_pair(d.left, d.right, b_rows, cfg) \
         + _semi_reid_pair(d.right, d.left, b_rows, cfg)
    total += reid / d.n_b
    return total


def eq2_mirror_labeled(d, cfg):
    """The labeled-task mirror: identity terms on A rows, attribute terms
    on B rows."""
    if not cfg.include_labeled_consistency:
        return 0.0
    a_rows = slice(0, d.n_a)
    b_rows = slice(d.n_a, None)
    total = 0.0
    reid = _semi_reid_pair(d.left, d.right, a_rows, cfg) \
         + _semi_reid_pair(d.right, d.left, a_rows, cfg)
    total += reid / d.n_a
    par = _semi_par_pair(d.left, d.right, b_rows, cfg) \
        + _semi_par_pair(d.right, d.left, b_rows, cfg)
    total += par / d.n_b
    return total


def reid_exhaustive(qf, q_ids, q_cams, gf, g_ids, g_cams, ranks=(1, 5, 10)):
    """AP/CMC per the protocol definition, with explicit loops."""
    qf = np.asarray(qf, dtype=np.float64)
    gf = np.asarray(gf, dtype=np.float64)
    qn = qf / np.maximum(np.sqrt((qf ** 2).sum(axis=1, keepdims=True)), 1e-12)
    gn = gf / np.maximum(np.sqrt((gf ** 2).sum(axis=1, keepdims=True)), 1e-12)
    aps = []
    hits = {k: 0 for k in ranks}
    for qi in range(len(qf)):
        sims = [float(qn[qi] @ gn[j]) for j in range(len(gf))]
        order = sorted(range(len(gf)), key=lambda j: (-sims[j], j))
        kept = [j for j in order if not (g_ids[j] == q_ids[qi] and g_cams[j] == q_cams[qi])]
        match_flags = [g_ids[j] == q_ids[qi] for j in kept]
        if not any(match_flags):
            continue
        precisions = []
        seen = 0
        first = None
        for pos, is_match in enumerate(match_flags):
            if is_match:
                seen += 1
                precisions.append(seen / (pos + 1))
                if first is None:
                    first = pos
        aps.append(np.mean(np.array(precisions)))
        for k in ranks:
            if first < k:
                hits[k] += 1
    if not aps:
        return None
    return float(np.mean(aps)), {k: hits[k] / len(aps) for k in sorted(ranks)}


def par_exhaustive(pred, gt, threshold=0.5):
    """Attribute metrics from explicit confusion-matrix counts."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt).astype(int)
    n, m = gt.shape
    accs = []
    for col in range(m):
        tp = fn = tn = fp = 0
        for i in range(n):
            hard = pred[i, col] >= threshold
            if gt[i, col] == 1:
                tp += int(hard)
                fn += int(not hard)
            else:
                tn += int(not hard)
                fp += int(hard)
        rates = []
        if tp + fn > 0:
            rates.append(tp / (tp + fn))
        if tn + fp > 0:
            rates.append(tn / (tn + fp))
        accs.append(sum(rates) / len(rates))
    ma = float(np.mean(accs))
    precs, recs = [], []
    for i in range(n):
        hard = pred[i] >= threshold
        inter = int((hard & (gt[i] == 1)).sum())
        if hard.sum() > 0:
            precs.append(inter / int(hard.sum()))
        if gt[i].sum() > 0:
            recs.append(inter / int(gt[i].sum()))
    precision = float(np.mean(precs)) if precs else 0.0
    recall = float(np.mean(recs)) if recs else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return ma, precision, recall, float(f1)
