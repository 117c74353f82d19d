"""Slow, obviously-correct oracles used to certify the fast implementations.

Everything here is plain float64 numpy with explicit loops, and deliberately
shares no code with the modules it checks.  Test fixtures and frozen expected
values are produced by these functions.
"""

from __future__ import annotations

import math
from collections.abc import Callable

import numpy as np


def bcl_oracle(
    embeddings: np.ndarray,
    labels: np.ndarray,
    tau: float,
    anchor_mask: np.ndarray | None = None,
    balanced: bool = True,
) -> float:
    """Triple-loop evaluation of the class-balanced local contrastive loss.

    ``embeddings`` is (L, d) float, ``labels`` (L,) ints.  Rows where
    ``anchor_mask`` is False never anchor but still join every class mean.
    Anchors whose class has a single member are skipped and the outer mean
    runs over surviving anchors only.  With ``balanced=False`` the
    denominator is the plain sum over all other rows instead of the sum of
    per-class means.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = emb.shape[0]
    if anchor_mask is None:
        anchor_mask = np.ones(n, dtype=bool)

    counts: dict[int, int] = {}
    for lab in labels:
        counts[int(lab)] = counts.get(int(lab), 0) + 1
    classes = sorted(counts)

    total = 0.0
    n_anchors = 0
    for i in range(n):
        if not anchor_mask[i]:
            continue
        y = int(labels[i])
        if counts[y] < 2:
            continue
        # The denominator depends on the anchor only, not on the positive.
        if balanced:
            den = 0.0
            for j in classes:
                class_sum = 0.0
                for k in range(n):
                    if int(labels[k]) == j:
                        class_sum += math.exp(float(emb[i] @ emb[k]) / tau)
                den += class_sum / counts[j]
        else:
            den = 0.0
            for k in range(n):
                if k != i:
                    den += math.exp(float(emb[i] @ emb[k]) / tau)
        inner = 0.0
        n_pos = 0
        for p in range(n):
            if p == i or int(labels[p]) != y:
                continue
            num = math.exp(float(emb[i] @ emb[p]) / tau)
            inner += math.log(num / den)
            n_pos += 1
        total += inner / n_pos
        n_anchors += 1

    if n_anchors == 0:
        return 0.0
    return -total / n_anchors


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, coordinate by coordinate."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return grad


def _boundary_pixels(mask: np.ndarray) -> list[tuple[int, int]]:
    # A set pixel is boundary when any 4-neighbour is unset or outside the image.
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    out = []
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if rr < 0 or rr >= h or cc < 0 or cc >= w or not mask[rr, cc]:
                    out.append((r, c))
                    break
    return out


def nearest_rank(values: list[float], percentile: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    ordered = sorted(values)
    rank = math.ceil(percentile / 100.0 * len(ordered))
    return ordered[max(rank, 1) - 1]


def hd_oracle(pred_mask: np.ndarray, gt_mask: np.ndarray, percentile: float = 95.0) -> float:
    """All-pairs boundary-distance percentile between two binary masks.

    Both masks empty returns 0.0; exactly one empty returns NaN (undefined).
    """
    pred_b = _boundary_pixels(pred_mask)
    gt_b = _boundary_pixels(gt_mask)
    if not pred_b and not gt_b:
        return 0.0
    if not pred_b or not gt_b:
        return float("nan")

    dists: list[float] = []
    for src, dst in ((pred_b, gt_b), (gt_b, pred_b)):
        for r, c in src:
            best = min((r - rr) ** 2 + (c - cc) ** 2 for rr, cc in dst)
            dists.append(math.sqrt(best))
    return nearest_rank(dists, percentile)
