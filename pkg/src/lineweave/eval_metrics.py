"""Line-level (LIU) and pixel-level (PIU) intersection-over-union scores.

Matching follows the ICDAR2017 layout-analysis competition framing: greedy
matching by descending pairwise pixel intersection, each predicted and
ground-truth line used at most once, line hits at IU >= theta.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_THETA = 0.75


@dataclass
class MatchedPair:
    pred_id: int
    gt_id: int
    intersection: int
    union: int

    @property
    def iu(self) -> float:
        return self.intersection / self.union


@dataclass
class MatchReport:
    pairs: list[MatchedPair]
    unmatched_pred: list[int]
    unmatched_gt: list[int]
    liu: float
    piu: float


def _line_sizes(label_map: np.ndarray) -> dict[int, int]:
    ids, counts = np.unique(label_map[label_map > 0], return_counts=True)
    return {int(i): int(c) for i, c in zip(ids, counts)}


def _intersections(pred: np.ndarray, gt: np.ndarray) -> dict[tuple[int, int], int]:
    both = (pred > 0) & (gt > 0)
    if not both.any():
        return {}
    p = pred[both].astype(np.int64)
    g = gt[both].astype(np.int64)
    stride = int(gt.max()) + 1
    keys, counts = np.unique(p * stride + g, return_counts=True)
    return {(int(k // stride), int(k % stride)): int(c) for k, c in zip(keys, counts)}


def match_lines(pred: np.ndarray, gt: np.ndarray) -> list[tuple[int, int]]:
    """Greedy one-to-one matching by descending pixel intersection.

    Intersection ties prefer the pair with the smaller union (higher IU);
    remaining ties order by line ids, which keeps the result invariant
    under swapping the two maps.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"label map shapes differ: {pred.shape} vs {gt.shape}")
    inter = _intersections(pred, gt)
    psize = _line_sizes(pred)
    gsize = _line_sizes(gt)
    candidates = sorted(
        inter.items(),
        key=lambda kv: (
            -kv[1],
            psize[kv[0][0]] + gsize[kv[0][1]],
            min(kv[0]),
            max(kv[0]),
        ),
    )
    used_pred: set[int] = set()
    used_gt: set[int] = set()
    matching = []
    for (p, g), _count in candidates:
        if p in used_pred or g in used_gt:
            continue
        matching.append((p, g))
        used_pred.add(p)
        used_gt.add(g)
    return matching


def _pair_stats(matching, pred, gt):
    inter = _intersections(pred, gt)
    psize = _line_sizes(pred)
    gsize = _line_sizes(gt)
    pairs = []
    for p, g in matching:
        i = inter.get((p, g), 0)
        pairs.append(MatchedPair(p, g, i, psize[p] + gsize[g] - i))
    return pairs, psize, gsize


def pixel_iu(matching, pred: np.ndarray, gt: np.ndarray) -> float:
    """PIU: matched intersection over matched union plus all unmatched pixels."""
    pairs, psize, gsize = _pair_stats(matching, pred, gt)
    matched_pred = {p.pred_id for p in pairs}
    matched_gt = {p.gt_id for p in pairs}
    num = sum(p.intersection for p in pairs)
    den = sum(p.union for p in pairs)
    den += sum(s for i, s in psize.items() if i not in matched_pred)
    den += sum(s for i, s in gsize.items() if i not in matched_gt)
    if den == 0:
        return 1.0
    return num / den


def line_iu(matching, pred: np.ndarray, gt: np.ndarray, theta: float = DEFAULT_THETA) -> float:
    """LIU: hits / (pred lines + gt lines - hits), hit = matched pair with IU >= theta."""
    pairs, psize, gsize = _pair_stats(matching, pred, gt)
    hits = sum(1 for p in pairs if p.iu >= theta)
    den = len(psize) + len(gsize) - hits
    if den == 0:
        return 1.0
    return hits / den


def evaluate_page(pred: np.ndarray, gt: np.ndarray, theta: float = DEFAULT_THETA) -> MatchReport:
    matching = match_lines(pred, gt)
    pairs, psize, gsize = _pair_stats(matching, pred, gt)
    matched_pred = {p.pred_id for p in pairs}
    matched_gt = {p.gt_id for p in pairs}
    return MatchReport(
        pairs=pairs,
        unmatched_pred=sorted(i for i in psize if i not in matched_pred),
        unmatched_gt=sorted(i for i in gsize if i not in matched_gt),
        liu=line_iu(matching, pred, gt, theta),
        piu=pixel_iu(matching, pred, gt),
    )
