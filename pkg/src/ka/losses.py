"""Supervised and cross pseudo-supervision losses and their aggregation.

Per batch, each instance's supervised losses are identity cross-entropy
on the A sub-batch and attribute BCE on the B sub-batch. Consistency
losses tie the two instances together on the task a sub-batch is NOT
labeled for (and, optionally, also on the labeled task): the other
instance's output acts as a gradient-detached pseudo-label, in both
directions. The identity-task consistency is a batch-hard triplet loss
on the feature vectors plus a soft-target BCE on the dataset-membership
logit; the attribute-task consistency is a soft-DICE loss on the
attribute logits plus the same feature triplet.

The total objective is

    total = supervised + lam * (unlabeled_consistency + labeled_consistency)

with each sub-batch's contribution scaled by 1/|sub-batch|.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .model import DualOutputs


@dataclass
class LossConfig:
    lam: float = 1.0             # consistency weight in the total objective
    triplet_margin: float = 0.3
    dice_smooth: float = 1.0
    include_labeled_consistency: bool = True
    stop_gradient_pseudo: bool = True
    include_triplet: bool = True  # ablation: drop the feature-triplet consistency terms

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.triplet_margin < 0:
            raise ValueError(f"triplet_margin must be >= 0, got {self.triplet_margin}")
        if self.dice_smooth <= 0:
            raise ValueError(f"dice_smooth must be > 0, got {self.dice_smooth}")


@dataclass
class LossReport:
    """Every loss component of one batch, as 0-dim tensors.

    ``total`` is built as sup_reid + sup_par + lam*(semi_unlabeled +
    semi_labeled) so the invariant holds exactly. semi_reid / semi_par
    regroup the same consistency terms by task.
    """

    sup_reid: torch.Tensor
    sup_par: torch.Tensor
    semi_reid: torch.Tensor
    semi_par: torch.Tensor
    semi_unlabeled: torch.Tensor
    semi_labeled: torch.Tensor
    total: torch.Tensor

    def floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in
                ("sup_reid", "sup_par", "semi_reid", "semi_par",
                 "semi_unlabeled", "semi_labeled", "total")}

    def finite(self) -> bool:
        return all(torch.isfinite(getattr(self, k)) for k in
                   ("sup_reid", "sup_par", "semi_unlabeled", "semi_labeled", "total"))


def id_ce_loss(logits: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    """Mean over samples of -log softmax(logits)[id]."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be N x K, got shape {tuple(logits.shape)}")
    if ids.min() < 0 or ids.max() >= logits.shape[1]:
        raise ValueError(f"id out of range [0, {logits.shape[1]})")
    return F.cross_entropy(logits, ids.long())


def attr_bce_loss(logits: torch.Tensor, attrs: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over all N*M entries."""
    if logits.shape != attrs.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(attrs.shape)}")
    targets = attrs.to(logits.dtype)
    if not ((targets == 0) | (targets == 1)).all():
        raise ValueError("attribute targets must be binary")
    return F.binary_cross_entropy_with_logits(logits, targets)


def dice_consistency(pred_logits: torch.Tensor, pseudo_logits: torch.Tensor,
                     smooth: float = 1.0, stop_gradient: bool = True) -> torch.Tensor:
    """Soft-DICE disagreement between two sigmoid maps, over all entries.

    1 - (2*sum(pq) + smooth) / (sum(p^2) + sum(q^2) + smooth), with the
    pseudo side q detached when stop_gradient.
    """
    if pred_logits.shape != pseudo_logits.shape:
        raise ValueError(f"shape mismatch: {tuple(pred_logits.shape)} vs {tuple(pseudo_logits.shape)}")
    p = torch.sigmoid(pred_logits)
    q = torch.sigmoid(pseudo_logits.detach() if stop_gradient else pseudo_logits)
    inter = (p * q).sum()
    denom = (p * p).sum() + (q * q).sum()
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def bce_consistency(pred_logit: torch.Tensor, pseudo_logit: torch.Tensor,
                    stop_gradient: bool = True) -> torch.Tensor:
    """Mean BCE against the pseudo side's sigmoid used as a soft target.

    Note this is a cross-entropy, not a divergence: at identical logits
    it equals the soft target's entropy (ln 2 at logit 0), not zero.
    """
    if pred_logit.shape != pseudo_logit.shape:
        raise ValueError(f"shape mismatch: {tuple(pred_logit.shape)} vs {tuple(pseudo_logit.shape)}")
    target = torch.sigmoid(pseudo_logit.detach() if stop_gradient else pseudo_logit)
    return F.binary_cross_entropy_with_logits(pred_logit, target)


def triplet_consistency(anchor_feats: torch.Tensor, ref_feats: torch.Tensor,
                        margin: float = 0.3, stop_gradient: bool = True) -> torch.Tensor:
    """Batch-hard triplet loss between the two instances' feature rows.

    Row i of the reference is anchor i's positive; its negative is the
    closest other reference row (hardest negative). Needs N >= 2.
    """
    if anchor_feats.shape != ref_feats.shape:
        raise ValueError(f"shape mismatch: {tuple(anchor_feats.shape)} vs {tuple(ref_feats.shape)}")
    n = anchor_feats.shape[0]
    if n < 2:
        raise ValueError(f"triplet loss needs N >= 2, got N={n}")
    ref = ref_feats.detach() if stop_gradient else ref_feats
    diff = anchor_feats.unsqueeze(1) - ref.unsqueeze(0)     # N x N x D
    dist = diff.pow(2).sum(dim=2).sqrt()                    # N x N
    pos = dist.diagonal()
    self_mask = torch.eye(n, dtype=torch.bool, device=dist.device)
    neg = dist.masked_fill(self_mask, torch.inf).min(dim=1).values
    return F.relu(margin + pos - neg).mean()


def _zero(d: DualOutputs) -> torch.Tensor:
    ref = next(t for o in (d.left, d.right)
               for t in (o.reid_logits, o.par_logits) if t is not None)
    return torch.zeros((), dtype=ref.dtype, device=ref.device)


def semi_reid_directed(pred, pseudo, n_a, side_a: bool, cfg: LossConfig) -> torch.Tensor:
    """One direction of the identity-task consistency on one sub-batch.

    ``pred`` is trained toward ``pseudo`` (the detached side). side_a
    selects the A rows [0, n_a) of the batch, else the B rows.
    """
    sl = slice(0, n_a) if side_a else slice(n_a, None)
    terms = []
    if cfg.include_triplet and pred.reid_features is not None:
        terms.append(triplet_consistency(pred.reid_features[sl], pseudo.reid_features[sl],
                                         cfg.triplet_margin, cfg.stop_gradient_pseudo))
    if pred.dataset_logit is not None:
        terms.append(bce_consistency(pred.dataset_logit[sl], pseudo.dataset_logit[sl],
                                     cfg.stop_gradient_pseudo))
    return sum(terms) if terms else None


def semi_par_directed(pred, pseudo, n_a, side_a: bool, cfg: LossConfig) -> torch.Tensor:
    """One direction of the attribute-task consistency on one sub-batch."""
    sl = slice(0, n_a) if side_a else slice(n_a, None)
    terms = []
    if pred.par_logits is not None:
        terms.append(dice_consistency(pred.par_logits[sl], pseudo.par_logits[sl],
                                      cfg.dice_smooth, cfg.stop_gradient_pseudo))
        if cfg.include_triplet:
            terms.append(triplet_consistency(pred.par_features[sl], pseudo.par_features[sl],
                                             cfg.triplet_margin, cfg.stop_gradient_pseudo))
    return sum(terms) if terms else None


def _both_directions(direct_fn, d: DualOutputs, side_a: bool, cfg: LossConfig):
    fwd = direct_fn(d.left, d.right, d.n_a, side_a, cfg)
    if fwd is None:
        return None
    bwd = direct_fn(d.right, d.left, d.n_a, side_a, cfg)
    return fwd + bwd


def _check_subbatches(d: DualOutputs):
    if d.n_a == 0 or d.n_b == 0:
        raise ValueError(f"empty sub-batch: n_a={d.n_a}, n_b={d.n_b}")


def supervised_total(d: DualOutputs, cfg: LossConfig) -> torch.Tensor:
    """Supervised part: per-sub-batch-normalized CE on A plus BCE on B,
    summed over both instances. Terms for a disabled head are skipped."""
    _check_subbatches(d)
    total = _zero(d)
    if d.left.reid_logits is not None:
        ids = torch.from_numpy(d.batch.a_person_ids())
        total = total + (id_ce_loss(d.left.reid_logits[: d.n_a], ids)
                         + id_ce_loss(d.right.reid_logits[: d.n_a], ids))
    if d.left.par_logits is not None:
        attrs = torch.from_numpy(d.batch.b_attributes()).to(d.left.par_logits.dtype)
        total = total + (attr_bce_loss(d.left.par_logits[d.n_a:], attrs)
                         + attr_bce_loss(d.right.par_logits[d.n_a:], attrs))
    return total


def semi_unlabeled_total(d: DualOutputs, cfg: LossConfig) -> torch.Tensor:
    """Consistency on each sub-batch's unlabeled task, both directions:
    attribute-task terms on A rows, identity-task terms on B rows, each
    scaled by 1/|sub-batch|."""
    _check_subbatches(d)
    total = _zero(d)
    par_on_a = _both_directions(semi_par_directed, d, True, cfg)
    if par_on_a is not None:
        total = total + par_on_a / d.n_a
    reid_on_b = _both_directions(semi_reid_directed, d, False, cfg)
    if reid_on_b is not None:
        total = total + reid_on_b / d.n_b
    return total


def semi_labeled_total(d: DualOutputs, cfg: LossConfig) -> torch.Tensor:
    """Consistency on each sub-batch's labeled task (mirror of the
    unlabeled form): identity-task terms on A rows, attribute-task terms
    on B rows. Zero when disabled."""
    _check_subbatches(d)
    if not cfg.include_labeled_consistency:
        return _zero(d)
    total = _zero(d)
    reid_on_a = _both_directions(semi_reid_directed, d, True, cfg)
    if reid_on_a is not None:
        total = total + reid_on_a / d.n_a
    par_on_b = _both_directions(semi_par_directed, d, False, cfg)
    if par_on_b is not None:
        total = total + par_on_b / d.n_b
    return total


def total_objective(d: DualOutputs, cfg: LossConfig) -> LossReport:
    """Assemble the full objective and its component report.

    With lam == 0 the consistency terms are skipped entirely (not just
    zero-weighted), so the training trajectory is bit-identical to a
    supervised-only run.
    """
    _check_subbatches(d)
    zero = _zero(d)

    sup_reid, sup_par = zero, zero
    if d.left.reid_logits is not None:
        ids = torch.from_numpy(d.batch.a_person_ids())
        sup_reid = id_ce_loss(d.left.reid_logits[: d.n_a], ids) \
                 + id_ce_loss(d.right.reid_logits[: d.n_a], ids)
    if d.left.par_logits is not None:
        attrs = torch.from_numpy(d.batch.b_attributes()).to(d.left.par_logits.dtype)
        sup_par = attr_bce_loss(d.left.par_logits[d.n_a:], attrs) \
                + attr_bce_loss(d.right.par_logits[d.n_a:], attrs)

    semi_u, semi_l = zero, zero
    semi_reid, semi_par = zero, zero
    if cfg.lam > 0:
        par_on_a = _both_directions(semi_par_directed, d, True, cfg)
        reid_on_b = _both_directions(semi_reid_directed, d, False, cfg)
        if par_on_a is not None:
            semi_u = semi_u + par_on_a / d.n_a
            semi_par = semi_par + par_on_a / d.n_a
        if reid_on_b is not None:
            semi_u = semi_u + reid_on_b / d.n_b
            semi_reid = semi_reid + reid_on_b / d.n_b
        if cfg.include_labeled_consistency:
            reid_on_a = _both_directions(semi_reid_directed, d, True, cfg)
            par_on_b = _both_directions(semi_par_directed, d, False, cfg)
            if reid_on_a is not None:
                semi_l = semi_l + reid_on_a / d.n_a
                semi_reid = semi_reid + reid_on_a / d.n_a
            if par_on_b is not None:
                semi_l = semi_l + par_on_b / d.n_b
                semi_par = semi_par + par_on_b / d.n_b

    total = sup_reid + sup_par + cfg.lam * (semi_u + semi_l)
    return LossReport(sup_reid=sup_reid, sup_par=sup_par, semi_reid=semi_reid,
                      semi_par=semi_par, semi_unlabeled=semi_u, semi_labeled=semi_l,
                      total=total)
