"""Measurement protocols: oracle decoding, matched mIoU, coordinate
regression, spatial label generation, and proposal recall.

Matching conventions: "greedy" assigns every cluster independently to its
argmax-overlap class (many-to-one, ties to the lower class index);
"hungarian" is the optimal one-to-one count-maximizing assignment, with ties
between optimal assignments broken toward the lexicographically smallest
permutation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.ndimage
from scipy.optimize import linear_sum_assignment

IGNORE = -1


# ---------------------------------------------------------------------------
# Confusion matrices and matching
# ---------------------------------------------------------------------------


def confusion_matrix(
    pred: np.ndarray,
    gt: np.ndarray,
    n_pred: int | None = None,
    n_gt: int | None = None,
    ignore: int | None = None,
) -> np.ndarray:
    """Counts[cluster, class] over pixels whose gt label is not ignored."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if ignore is not None:
        keep = gt != ignore
        pred, gt = pred[keep], gt[keep]
    if pred.size and (pred.min() < 0 or gt.min() < 0):
        raise ValueError("negative labels; pass their value as the ignore label")
    if n_pred is None:
        n_pred = int(pred.max()) + 1 if pred.size else 1
    if n_gt is None:
        n_gt = int(gt.max()) + 1 if gt.size else 1
    cm = np.zeros((n_pred, n_gt), dtype=np.int64)
    np.add.at(cm, (pred, gt), 1)
    return cm


def greedy_match(cm: np.ndarray) -> np.ndarray:
    """Per-cluster argmax class (many-to-one); ties go to the lower class.

    A cluster with an all-zero row maps to class 0 by the tie rule (warned).
    """
    cm = np.asarray(cm)
    if cm.size == 0:
        raise ValueError("empty confusion matrix")
    zero_rows = np.where(cm.sum(axis=1) == 0)[0]
    if zero_rows.size:
        warnings.warn(
            f"clusters {zero_rows.tolist()} have no pixels; mapped to class 0",
            stacklevel=2,
        )
    return cm.argmax(axis=1)


def hungarian_match(cm: np.ndarray) -> np.ndarray:
    """Optimal one-to-one cluster->class assignment maximizing matched count.

    Rectangular matrices are zero-padded to square. Among equally optimal
    assignments the lexicographically smallest (viewed as the per-row class
    sequence) is returned.
    """
    cm = np.asarray(cm, dtype=np.int64)
    if cm.size == 0:
        raise ValueError("empty confusion matrix")
    k = max(cm.shape)
    padded = np.zeros((k, k), dtype=np.int64)
    padded[: cm.shape[0], : cm.shape[1]] = cm

    def best_total(mat: np.ndarray) -> int:
        r, c = linear_sum_assignment(-mat)
        return int(mat[r, c].sum())

    target = best_total(padded)
    assignment = np.full(k, -1, dtype=np.int64)
    free_cols = list(range(k))
    # fix rows one by one, choosing the smallest column that keeps optimality
    for row in range(k):
        for col in sorted(free_cols):
            rest_rows = [r for r in range(k) if r > row]
            rest_cols = [c for c in free_cols if c != col]
            sub = padded[np.ix_(rest_rows, rest_cols)] if rest_rows else None
            fixed = int(padded[row, col]) + sum(
                int(padded[r, assignment[r]]) for r in range(row)
            )
            achievable = fixed + (best_total(sub) if sub is not None and sub.size else 0)
            if achievable == target:
                assignment[row] = col
                free_cols.remove(col)
                break
    return assignment[: cm.shape[0]]


def _per_class_iou(
    pred: np.ndarray, gt: np.ndarray, ignore: int | None
) -> float:
    """Mean IoU over the classes present in gt (ignored pixels excluded)."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if ignore is not None:
        keep = gt != ignore
        pred, gt = pred[keep], gt[keep]
    classes = np.unique(gt)
    ious = []
    for c in classes:
        tp = int(np.sum((pred == c) & (gt == c)))
        fp = int(np.sum((pred == c) & (gt != c)))
        fn = int(np.sum((pred != c) & (gt == c)))
        ious.append(tp / (tp + fp + fn))
    return float(np.mean(ious))


def oracle_decode_miou(
    pred: np.ndarray, gt: np.ndarray, ignore: int | None = None
) -> float:
    """Assign each predicted region to its maximal-overlap gt label, then mIoU.

    Many-to-one by construction; ties resolve to the lower gt label.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    cm = confusion_matrix(pred, gt, n_pred=int(pred.max()) + 1, ignore=ignore)
    mapping = cm.argmax(axis=1)
    return _per_class_iou(mapping[pred], gt, ignore)


def matched_miou(
    pred: np.ndarray,
    gt: np.ndarray,
    mode: str = "greedy",
    ignore: int | None = None,
) -> float:
    """mIoU after relabeling pred clusters via greedy or Hungarian matching."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    cm = confusion_matrix(pred, gt, n_pred=int(pred.max()) + 1, ignore=ignore)
    if mode == "greedy":
        mapping = greedy_match(cm)
    elif mode == "hungarian":
        mapping = hungarian_match(cm)
    else:
        raise ValueError(f"unknown matching mode {mode!r}")
    return _per_class_iou(mapping[pred], gt, ignore)


# ---------------------------------------------------------------------------
# Coordinate regression
# ---------------------------------------------------------------------------


def coord_regression(
    features: np.ndarray, grid: int = 32, split_seed: int = 0
) -> float:
    """Test MSE of OLS from features to (x, y) indices of a grid x grid layout.

    ``features`` is (grid*grid, C) in raster order, or (h, w, C) to be
    bilinearly resampled first. 80/20 split by seeded permutation; targets are
    raw integer indices 0..grid-1 per axis, MSE averaged over both axes.
    Rank-deficient designs fall back to ridge with lambda = 1e-6 (warned).
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 3:
        if feats.shape[:2] != (grid, grid):
            from eigenfield.eigen_optimizer import resample_array

            feats = resample_array(feats, (grid, grid))
        feats = feats.reshape(grid * grid, -1)
    if feats.ndim != 2 or feats.shape[0] != grid * grid:
        raise ValueError(
            f"features must carry {grid * grid} rows, got shape {feats.shape}"
        )
    n = feats.shape[0]
    ys, xs = np.divmod(np.arange(n), grid)
    targets = np.stack([xs, ys], axis=1).astype(np.float64)

    rng = np.random.default_rng(split_seed)
    perm = rng.permutation(n)
    n_train = int(round(0.8 * n))
    tr, te = perm[:n_train], perm[n_train:]

    X = np.concatenate([feats, np.ones((n, 1))], axis=1)
    A = X[tr]
    gram = A.T @ A
    if np.linalg.matrix_rank(A) < A.shape[1]:
        warnings.warn("rank-deficient design; ridge fallback (1e-6)", stacklevel=2)
        gram = gram + 1e-6 * np.eye(A.shape[1])
        coef = np.linalg.solve(gram, A.T @ targets[tr])
    else:
        coef, *_ = np.linalg.lstsq(A, targets[tr], rcond=None)
    pred = X[te] @ coef
    return float(((pred - targets[te]) ** 2).mean())


# ---------------------------------------------------------------------------
# Spatial semantic labels
# ---------------------------------------------------------------------------

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass
class SpatialLabelMap:
    """Per-pixel {ignore} | (class, side) labels encoded as 2*class + side.

    side 0 = left, 1 = right; IGNORE marks filtered pixels.
    """

    labels: np.ndarray
    min_px: int
    center_band: float
    n_classes: int

    def encode(self, cls: int, side: str) -> int:
        return 2 * cls + (0 if side == "left" else 1)


def gen_spatial_labels(
    gt: np.ndarray,
    min_px: int = 50,
    center_band: float = 0.2,
    ignore: int | None = None,
) -> SpatialLabelMap:
    """Split every class into left/right connected components.

    Each 4-connected component of a class keeps its class and gains a side
    from its centroid column: left of (0.5 - band/2) * w, right of
    (0.5 + band/2) * w, otherwise ignored as ambiguous. Components smaller
    than ``min_px`` are ignored.
    """
    gt = np.asarray(gt)
    h, w = gt.shape
    out = np.full((h, w), IGNORE, dtype=np.int64)
    lo = (0.5 - center_band / 2.0) * w
    hi = (0.5 + center_band / 2.0) * w
    classes = [int(c) for c in np.unique(gt) if ignore is None or c != ignore]
    for cls in classes:
        comp, n_comp = scipy.ndimage.label(gt == cls, structure=FOUR_CONNECTED)
        for region in range(1, n_comp + 1):
            mask = comp == region
            size = int(mask.sum())
            if size < min_px:
                continue
            col = float(np.where(mask)[1].mean())
            if col < lo:
                out[mask] = 2 * cls
            elif col > hi:
                out[mask] = 2 * cls + 1
    return SpatialLabelMap(
        labels=out,
        min_px=min_px,
        center_band=center_band,
        n_classes=len(classes),
    )


# ---------------------------------------------------------------------------
# Proposal recall
# ---------------------------------------------------------------------------


def proposal_recall(
    proposals: list[np.ndarray],
    gt_instance_masks: list[np.ndarray],
    iou_thr: float = 0.5,
) -> float:
    """Fraction of gt instances matched by a proposal at IoU >= threshold.

    Greedy best-IoU matching; each proposal matches at most one instance.
    """
    if not gt_instance_masks:
        raise ValueError("no ground-truth instances")
    shape = np.asarray(gt_instance_masks[0]).shape
    for m in list(proposals) + list(gt_instance_masks):
        if np.asarray(m).shape != shape:
            raise ValueError("all masks must share one shape")
    if not proposals:
        return 0.0
    ious = np.zeros((len(proposals), len(gt_instance_masks)))
    for i, p in enumerate(proposals):
        p = np.asarray(p, dtype=bool)
        for j, g in enumerate(gt_instance_masks):
            g = np.asarray(g, dtype=bool)
            union = np.logical_or(p, g).sum()
            ious[i, j] = np.logical_and(p, g).sum() / union if union else 0.0
    matched = np.zeros(len(gt_instance_masks), dtype=bool)
    used = np.zeros(len(proposals), dtype=bool)
    pairs = sorted(
        ((ious[i, j], i, j) for i in range(ious.shape[0]) for j in range(ious.shape[1])),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    for iou, i, j in pairs:
        if iou < iou_thr:
            break
        if used[i] or matched[j]:
            continue
        used[i] = True
        matched[j] = True
    return float(matched.mean())
