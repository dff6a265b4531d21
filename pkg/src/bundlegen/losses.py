"""Training objectives: ordered cross-entropy, set matching, contrastive margin.

The set loss scores each same-type slot group against the cheapest
permutation of its targets (minimal-cost assignment over the cross-entropy
cost matrix), so a prediction that merely reorders the targets is not
penalized. The contrastive term is a hinge that pushes every non-clicked
creative's set loss above the clicked creative's by at least the margin.
Gradients flow through the selected cost entries only; the matching itself
is recomputed each forward pass and treated as locally constant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoder import PositionDistributions
from .matching import hungarian_min_assignment
from .types import BundleCreative, DataError, VocabularyError


@dataclass(frozen=True)
class LossBreakdown:
    """Per-forward-pass scalar summary plus the matched permutations."""

    l_item_set: float
    l_slogan_set: float
    l_template: float
    l_set_total: float
    l_contrastive: float
    l_total: float
    item_perm: tuple[int, ...]
    slogan_perm: tuple[int, ...]

    def log_fields(self) -> dict:
        return {
            "l_set": self.l_set_total,
            "l_cl": self.l_contrastive,
            "l_total": self.l_total,
        }


def _target_indices(kind: str, ids: Sequence[int], vocab: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 1 or ids.max() > vocab):
        raise VocabularyError(f"{kind} target id out of vocabulary [1, {vocab}]")
    return ids - 1


def xent_independent(dists: PositionDistributions, target: BundleCreative) -> Tensor:
    """Sum of per-slot cross-entropies against the target in its given order."""
    li = ad.select_nll(
        dists.item_dists,
        _target_indices("item", target.items, dists.item_dists.data.shape[-1]),
    )
    ls = ad.select_nll(
        dists.slogan_dists,
        _target_indices("slogan", target.slogans, dists.slogan_dists.data.shape[-1]),
    )
    lt = ad.select_nll(
        dists.template_dist,
        _target_indices("template", [target.template], dists.template_dist.data.shape[-1]),
    )
    return ad.add(ad.add(li, ls), lt)


def set_loss_for_type(dists: Tensor, targets: Sequence[int]) -> tuple[Tensor, tuple[int, ...]]:
    """Minimal ordered cross-entropy over all permutations of the targets.

    ``dists`` is (n, vocab); ``targets`` are n pairwise-distinct object ids.
    Returns the matched loss (differentiable through ``dists``) and the
    permutation mapping slot j to target index perm[j].
    """
    targets = tuple(int(t) for t in targets)
    if dists.data.ndim != 2:
        raise ad.ShapeError("set_loss_for_type expects single-record distributions (n, vocab)")
    n = dists.data.shape[-2]
    if len(targets) != n:
        raise DataError(f"{len(targets)} targets for {n} slots")
    if len(set(targets)) != n:
        raise DataError(f"duplicate ids in target set {targets}")
    idx = _target_indices("object", targets, dists.data.shape[-1])
    # Clamp only for permutation selection: a one-hot prediction may put
    # probability 0 on some target, and the solver needs finite costs. The
    # differentiable loss below uses the unclamped probabilities.
    cost = -np.log(np.maximum(dists.data[:, idx], 1e-300))
    assignment = hungarian_min_assignment(cost)
    matched = idx[list(assignment.perm)]
    return ad.select_nll(dists, matched), assignment.perm


@dataclass
class SetLossParts:
    total: Tensor
    items: Tensor
    slogans: Tensor
    template: Tensor
    item_perm: tuple[int, ...]
    slogan_perm: tuple[int, ...]


def set_loss(dists: PositionDistributions, target: BundleCreative) -> SetLossParts:
    """Matched set loss per type; the single template slot needs no matching."""
    li, item_perm = set_loss_for_type(dists.item_dists, target.items)
    ls, slogan_perm = set_loss_for_type(dists.slogan_dists, target.slogans)
    lt = ad.select_nll(
        dists.template_dist,
        _target_indices("template", [target.template], dists.template_dist.data.shape[-1]),
    )
    return SetLossParts(
        total=ad.add(ad.add(li, ls), lt),
        items=li,
        slogans=ls,
        template=lt,
        item_perm=item_perm,
        slogan_perm=slogan_perm,
    )


def contrastive_loss(
    dists: PositionDistributions,
    pos: BundleCreative,
    negs: Sequence[BundleCreative],
    gamma: float,
) -> Tensor:
    """Hinge sum over negatives: max{0, -(L_set(neg) - L_set(pos)) + gamma}.

    All creatives are scored against the same decoder distributions (one
    context, one forward pass). Empty negative list scores 0.
    """
    if gamma < 0:
        raise ValueError(f"margin gamma must be >= 0, got {gamma}")
    pos_parts = set_loss(dists, pos)
    return _hinge_sum(dists, pos_parts.total, negs, gamma)


def _hinge_sum(
    dists: PositionDistributions,
    pos_total: Tensor,
    negs: Sequence[BundleCreative],
    gamma: float,
) -> Tensor:
    total = Tensor(np.zeros((), dtype=pos_total.data.dtype))
    for neg in negs:
        neg_parts = set_loss(dists, neg)
        total = ad.add(total, ad.relu(ad.add(ad.add(pos_total, ad.mul(neg_parts.total, -1.0)), gamma)))
    return total


def total_loss(
    dists: PositionDistributions,
    pos: BundleCreative,
    negs: Sequence[BundleCreative],
    gamma: float,
    lam: float,
) -> tuple[Tensor, LossBreakdown]:
    """Set loss of the positive plus lambda times the contrastive hinge."""
    if gamma < 0:
        raise ValueError(f"margin gamma must be >= 0, got {gamma}")
    pos_parts = set_loss(dists, pos)
    l_cl = _hinge_sum(dists, pos_parts.total, negs, gamma)
    loss = ad.add(pos_parts.total, ad.mul(l_cl, float(lam)))
    breakdown = LossBreakdown(
        l_item_set=pos_parts.items.item(),
        l_slogan_set=pos_parts.slogans.item(),
        l_template=pos_parts.template.item(),
        l_set_total=pos_parts.total.item(),
        l_contrastive=l_cl.item(),
        l_total=loss.item(),
        item_perm=pos_parts.item_perm,
        slogan_perm=pos_parts.slogan_perm,
    )
    return loss, breakdown
