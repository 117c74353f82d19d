"""Training losses: Dice, supervised, cross pseudo supervision, and the
class-balanced local contrastive loss with its multi-scale reduction.

The contrastive loss operates on :class:`AnchorSet` groups of pixel
embeddings.  For an anchor ``a_i`` of class ``y`` the per-anchor term
averages ``log(exp(a_i·a_p / tau) / D_i)`` over the other members ``a_p`` of
class ``y``, where the denominator ``D_i`` sums, over every class present in
the group, the class mean of ``exp(a_i·a_k / tau)`` (the anchor is included
in its own class's mean).  Averaging within classes keeps a class's
denominator contribution independent of its pixel count, so dominant classes
cannot swamp the rest.  With ``balanced=False`` the denominator falls back to
the conventional sum over all other rows.

Anchors whose class has a single member have no positives; they are skipped
and the outer mean runs over surviving anchors.  Rows with
``valid_mask=False`` never anchor but still participate as positives and in
every denominator.  Losses are computed in the dtype of their inputs
(float32 in training; test oracles run float64).
"""

from __future__ import annotations

import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

DICE_EPS = 1e-5


class ContrastiveLossWarning(RuntimeWarning):
    """A contrastive group or scale degenerated to a defined-zero loss."""


class NonFiniteProbabilityError(ValueError):
    """Probability inputs contained NaN."""


@dataclass
class AnchorSet:
    """Flattened pixels of one group of patches, both branches together.

    ``embeddings`` is (L, d); ``labels`` (L,) class indices from the fused
    supervision maps; ``valid_mask`` marks anchor-eligible rows; ``branch``
    records per-row provenance (0 = conv branch, 1 = attention branch).
    """

    embeddings: torch.Tensor
    labels: torch.Tensor
    valid_mask: torch.Tensor = field(default=None)  # type: ignore[assignment]
    branch: torch.Tensor | None = None

    def __post_init__(self) -> None:
        if self.valid_mask is None:
            self.valid_mask = torch.ones(self.labels.shape[0], dtype=torch.bool)
        if self.embeddings.shape[0] != self.labels.shape[0]:
            raise ValueError("embedding/label row count mismatch")
        if self.valid_mask.shape[0] != self.labels.shape[0]:
            raise ValueError("valid_mask row count mismatch")


def per_class_dice(probs: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Per-(batch, class) soft Dice (2·Σpg + eps) / (Σp + Σg + eps).

    ``probs`` is (B, C, H, W); ``target`` (B, H, W) class indices.
    """
    if torch.isnan(probs).any():
        raise NonFiniteProbabilityError("NaN in probabilities")
    b, c = probs.shape[:2]
    onehot = F.one_hot(target.long(), c).permute(0, 3, 1, 2).to(probs.dtype)
    p = probs.reshape(b, c, -1)
    g = onehot.reshape(b, c, -1)
    inter = (p * g).sum(-1)
    return (2.0 * inter + eps) / (p.sum(-1) + g.sum(-1) + eps)


def dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 minus the mean per-class, per-item soft Dice; value in [0, 1]."""
    return 1.0 - per_class_dice(probs, target, eps).mean()


def supervised_loss(
    logits: torch.Tensor, labels: torch.Tensor, dice_only: bool = False
) -> torch.Tensor:
    """Labeled-data loss: 0.5 * (cross-entropy + Dice), or Dice alone."""
    d = dice_loss(torch.softmax(logits, dim=1), labels)
    if dice_only:
        return d
    return 0.5 * (F.cross_entropy(logits, labels.long()) + d)


def cps_loss(probs_self: torch.Tensor, pseudo_labels_other: torch.Tensor) -> torch.Tensor:
    """Dice of one branch's probabilities against the other branch's argmax.

    ``pseudo_labels_other`` must be an integer map produced under detach, so
    no gradient reaches the branch that generated it.
    """
    if pseudo_labels_other.dtype.is_floating_point:
        raise ValueError("pseudo labels must be integer class indices")
    return dice_loss(probs_self, pseudo_labels_other)


def contrastive_group_losses(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    valid_mask: torch.Tensor,
    tau: float,
    balanced: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Loss of each group in a stacked batch.

    ``embeddings`` (G, L, d), ``labels`` (G, L), ``valid_mask`` (G, L).
    Returns (per-group losses (G,), per-group surviving-anchor counts (G,)).
    Groups with no surviving anchor get a defined loss of 0.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    labels = labels.long()
    dtype = embeddings.dtype

    # The L x L similarity matrix is needed only inside the denominator's
    # exp; the positive term reduces to a dot with the class-sum embedding,
    # which keeps the backward graph small.
    sim = embeddings @ embeddings.transpose(1, 2) / tau
    shift = sim.amax(dim=2, keepdim=True).detach()
    ex = torch.exp(sim - shift)

    num_classes = int(labels.max().item()) + 1
    onehot = F.one_hot(labels, num_classes).to(dtype)
    counts = onehot.sum(1, keepdim=True)  # (G, 1, C)

    if balanced:
        # Absent classes have zero sums, so the clamp only avoids 0/0.
        den = ((ex @ onehot) / counts.clamp(min=1)).sum(2)
    else:
        den = ex.sum(2) - ex.diagonal(dim1=1, dim2=2)

    tiny = torch.finfo(dtype).tiny
    log_den = torch.log(den.clamp(min=tiny)) + shift.squeeze(2)

    # Sum of similarities to the other same-class rows, per anchor.
    class_sum = onehot.transpose(1, 2) @ embeddings  # (G, C, d)
    idx = labels.unsqueeze(2).expand(-1, -1, embeddings.shape[2])
    same_sum = torch.gather(class_sum, 1, idx)
    pos_sim_sum = ((embeddings * same_sum).sum(2) - (embeddings * embeddings).sum(2)) / tau

    n_pos = torch.gather(counts.squeeze(1), 1, labels) - 1
    anchor_ok = valid_mask & (n_pos > 0)
    per_anchor = torch.where(
        anchor_ok,
        log_den - pos_sim_sum / n_pos.clamp(min=1),
        torch.zeros((), dtype=dtype),
    )
    n_anchors = anchor_ok.sum(1)
    losses = per_anchor.sum(1) / n_anchors.clamp(min=1)
    return losses, n_anchors


def balanced_contrastive_loss(
    anchor_set: AnchorSet, tau: float, balanced: bool = True
) -> torch.Tensor:
    """Contrastive loss of a single group; finite by contract, not sign-bounded."""
    losses, n_anchors = contrastive_group_losses(
        anchor_set.embeddings.unsqueeze(0),
        anchor_set.labels.unsqueeze(0),
        anchor_set.valid_mask.unsqueeze(0),
        tau,
        balanced=balanced,
    )
    if int(n_anchors[0]) == 0:
        warnings.warn("no anchor has a positive; loss defined as 0", ContrastiveLossWarning)
    return losses[0]


def multiscale_contrastive_loss_stacked(
    stacks: Sequence[tuple[torch.Tensor, torch.Tensor, torch.Tensor] | None],
    tau: float,
    balanced: bool = True,
) -> torch.Tensor:
    """Sum over scales of the per-scale mean group loss.

    Each stack is (embeddings (G, L, d), labels (G, L), valid (G, L)); L may
    differ between scales.  Groups are reduced in stacking order.  A missing
    or empty scale contributes 0.
    """
    total: torch.Tensor | None = None
    for stack in stacks:
        if stack is None or stack[0].shape[0] == 0:
            warnings.warn("scale has no contrastive groups", ContrastiveLossWarning)
            continue
        emb, lab, valid = stack
        losses, n_anchors = contrastive_group_losses(emb, lab, valid, tau, balanced=balanced)
        if (n_anchors == 0).any():
            warnings.warn(
                "group(s) without surviving anchors contribute 0", ContrastiveLossWarning
            )
        scale_loss = losses.mean()
        total = scale_loss if total is None else total + scale_loss
    if total is None:
        return torch.zeros((), dtype=torch.float32)
    return total


def multiscale_contrastive_loss(
    groups_per_scale: Sequence[Sequence[AnchorSet]],
    tau: float,
    balanced: bool = True,
) -> torch.Tensor:
    """Sum over scales of the per-scale mean group loss over anchor sets."""
    stacks = []
    for groups in groups_per_scale:
        if not groups:
            stacks.append(None)
            continue
        stacks.append(
            (
                torch.stack([a.embeddings for a in groups]),
                torch.stack([a.labels for a in groups]),
                torch.stack([a.valid_mask for a in groups]),
            )
        )
    return multiscale_contrastive_loss_stacked(stacks, tau, balanced=balanced)
