"""Contrastive supervision construction: cross-branch label fusion, label
downsampling to feature scales, and without-replacement patch partitioning.

Pixels contrasted on unlabelled slices are labeled by the *other* branch's
detached prediction, never by the branch that produced the feature, so the
two models exchange class information instead of confirming themselves.
Labeled slices always use ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .losses import AnchorSet

SOURCE_GROUND_TRUTH = "ground_truth"
SOURCE_CROSS_FOR_CNN = "cross_pseudo_for_cnn"
SOURCE_CROSS_FOR_ATTN = "cross_pseudo_for_attn"

BRANCH_CNN = 0
BRANCH_ATTN = 1


@dataclass
class SupervisionMap:
    """Per-pixel class supervision plus per-slice provenance tags."""

    labels: torch.Tensor  # (B, H, W) long
    source: tuple[str, ...]  # one tag per slice

    def __post_init__(self) -> None:
        if self.labels.shape[0] != len(self.source):
            raise ValueError("one source tag per slice required")


@dataclass(frozen=True)
class PatchGroup:
    """One patch origin per feature map; ``origins`` is (num_maps, 2) int."""

    patch_size: int
    origins: np.ndarray


def fuse_labels(
    is_labeled: torch.Tensor,
    gt_labels: torch.Tensor | None,
    pseudo_cnn: torch.Tensor,
    pseudo_attn: torch.Tensor,
) -> tuple[SupervisionMap, SupervisionMap]:
    """Build supervision for each branch's features.

    Labeled slices use ground truth in both maps.  Unlabeled slices label the
    conv branch's features with the attention branch's prediction and vice
    versa.  Pseudo maps must already be detached argmax maps.
    """
    is_labeled = is_labeled.bool()
    b = is_labeled.shape[0]
    for name, t in (("pseudo_cnn", pseudo_cnn), ("pseudo_attn", pseudo_attn)):
        if t.shape[0] != b:
            raise ValueError(f"{name} batch size {t.shape[0]} != {b}")
        if t.shape != pseudo_cnn.shape:
            raise ValueError("pseudo label shapes differ")
    if is_labeled.any():
        if gt_labels is None:
            raise ValueError("labeled slices present but gt_labels is None")
        if gt_labels.shape != pseudo_cnn.shape:
            raise ValueError("gt_labels shape mismatch")
    else:
        gt_labels = torch.zeros_like(pseudo_cnn)

    sel = is_labeled.view(b, 1, 1)
    for_cnn = torch.where(sel, gt_labels, pseudo_attn).long()
    for_attn = torch.where(sel, gt_labels, pseudo_cnn).long()
    src_cnn = tuple(
        SOURCE_GROUND_TRUTH if lab else SOURCE_CROSS_FOR_CNN for lab in is_labeled.tolist()
    )
    src_attn = tuple(
        SOURCE_GROUND_TRUTH if lab else SOURCE_CROSS_FOR_ATTN for lab in is_labeled.tolist()
    )
    return SupervisionMap(for_cnn, src_cnn), SupervisionMap(for_attn, src_attn)


def downsample_labels(labels: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbour subsample of class maps at output-cell centres.

    Output pixel (i, j) reads input pixel (floor((i + 0.5) * H / h_s),
    floor((j + 0.5) * W / w_s)); class indices are never interpolated.
    """
    h, w = labels.shape[-2:]
    th, tw = target
    if th > h or tw > w:
        raise ValueError(f"target {target} exceeds source ({h}, {w})")
    rows = torch.div((torch.arange(th) + 0.5) * h, th, rounding_mode="floor").long()
    cols = torch.div((torch.arange(tw) + 0.5) * w, tw, rounding_mode="floor").long()
    return labels[..., rows[:, None], cols[None, :]]


def partition_patches(
    num_maps: int,
    map_size: tuple[int, int],
    patch_size: int,
    rng: np.random.Generator,
    random_offset: bool = False,
) -> list[PatchGroup]:
    """Partition ``num_maps`` feature maps into groups of patch origins.

    The grid has floor(h/p) x floor(w/p) non-overlapping cells per map; the
    residual bottom/right margin is excluded (optionally shifted under a
    random global offset so margins rotate between calls).  Every map
    independently traverses its own cells in random order, so group k holds
    the k-th cell of each map's permutation: one patch per map per group,
    without replacement, all cells used exactly once across the groups.
    """
    h, w = map_size
    if patch_size > min(h, w):
        raise ValueError(f"patch size {patch_size} exceeds map {map_size}")
    gh, gw = h // patch_size, w // patch_size
    off_r = off_c = 0
    if random_offset:
        off_r = int(rng.integers(0, h - gh * patch_size + 1))
        off_c = int(rng.integers(0, w - gw * patch_size + 1))
    cells = np.array(
        [(off_r + r * patch_size, off_c + c * patch_size) for r in range(gh) for c in range(gw)],
        dtype=np.int64,
    )
    m = len(cells)
    perms = np.stack([rng.permutation(m) for _ in range(num_maps)])
    return [
        PatchGroup(patch_size=patch_size, origins=cells[perms[:, k]]) for k in range(m)
    ]


def stack_groups(
    groups: list[PatchGroup],
    embeddings: torch.Tensor,
    labels_per_map: torch.Tensor,
    anchor_background: bool = True,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Gather all groups at once: (emb (G, L, d), labels (G, L), valid (G, L)).

    Row order per group matches :func:`build_anchor_set`: maps in order, each
    patch flattened row-major.  This is the fast path the trainer uses; the
    per-group path exists for auditing and tests.
    """
    if not groups:
        raise ValueError("no groups to stack")
    n_maps, dim = embeddings.shape[:2]
    p = groups[0].patch_size
    origins = torch.from_numpy(np.stack([g.origins for g in groups]))  # (G, M, 2)
    g = origins.shape[0]
    dr = torch.arange(p)
    rows = origins[..., 0].reshape(g, n_maps, 1, 1) + dr.reshape(1, 1, p, 1)
    cols = origins[..., 1].reshape(g, n_maps, 1, 1) + dr.reshape(1, 1, 1, p)
    map_idx = torch.arange(n_maps).reshape(1, n_maps, 1, 1)
    # (2N, h, w, d)[g, m, p, p] -> (G, 2N, p, p, d)
    emb = embeddings.permute(0, 2, 3, 1)[map_idx, rows, cols]
    lab = labels_per_map[map_idx, rows, cols]
    emb = emb.reshape(g, n_maps * p * p, dim)
    lab = lab.reshape(g, n_maps * p * p).long()
    valid = torch.ones_like(lab, dtype=torch.bool)
    if not anchor_background:
        valid &= lab != 0
    return emb, lab, valid


def build_anchor_set(
    group: PatchGroup,
    embeddings: torch.Tensor,
    labels_per_map: torch.Tensor,
    branch_of_map: torch.Tensor,
    anchor_background: bool = True,
) -> AnchorSet:
    """Flatten one group's patches into contrastive rows.

    ``embeddings`` is (2N, d, h, w) projected (unit-norm) features,
    ``labels_per_map`` (2N, h, w) the supervision map matched to each map's
    branch, already downsampled to this scale.  The result has
    L = 2N * patch_size^2 rows with per-row branch provenance.  With
    ``anchor_background=False`` background rows keep their denominator role
    but are not anchor-eligible (ablation-only toggle).
    """
    n_maps, dim = embeddings.shape[:2]
    if group.origins.shape[0] != n_maps:
        raise ValueError("group origin count != number of maps")
    p = group.patch_size
    rows = []
    labs = []
    branches = []
    for m in range(n_maps):
        r0, c0 = (int(v) for v in group.origins[m])
        patch = embeddings[m, :, r0 : r0 + p, c0 : c0 + p]
        rows.append(patch.reshape(dim, -1).T)
        labs.append(labels_per_map[m, r0 : r0 + p, c0 : c0 + p].reshape(-1))
        branches.append(torch.full((p * p,), int(branch_of_map[m]), dtype=torch.long))
    emb = torch.cat(rows)
    lab = torch.cat(labs).long()
    branch = torch.cat(branches)
    valid = torch.ones_like(lab, dtype=torch.bool)
    if not anchor_background:
        valid &= lab != 0
    return AnchorSet(embeddings=emb, labels=lab, valid_mask=valid, branch=branch)
