"""Decoding eigenfields into segmentations, instance proposals, and labels.

K-Means (plus-plus seeding, Lloyd iterations) over per-pixel channel vectors,
silhouette-based K selection, ward-linkage merging of spatially adjacent
regions into an instance-proposal pool, balanced-background silhouette
ranking, and cosine-threshold zero-shot labeling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from eigenfield.tensor_store import BACKGROUND, EigenField, SegmentationMap

SILHOUETTE_MAX_POINTS = 2000
KMEANS_MAX_ITERS = 300
KMEANS_TOL = 1e-6


@dataclass
class InstanceProposal:
    mask: np.ndarray  # boolean (h, w)
    score: float
    origin: tuple  # (K used, cluster id) or ("merge", K used, merge step)

    def __post_init__(self) -> None:
        if not self.mask.any():
            raise ValueError("proposal mask is empty")
        if not np.isfinite(self.score):
            raise ValueError("proposal score must be finite")


# ---------------------------------------------------------------------------
# K-Means
# ---------------------------------------------------------------------------


def _pairwise_sq(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (n, k) squared distances; clamp tiny negatives from cancellation
    d2 = (
        (points**2).sum(axis=1)[:, None]
        - 2.0 * points @ centers.T
        + (centers**2).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _plusplus_init(
    points: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = _pairwise_sq(points, centers[:1]).ravel()
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = points[rng.integers(n)]
            continue
        idx = rng.choice(n, p=d2 / total)
        centers[j] = points[idx]
        d2 = np.minimum(d2, _pairwise_sq(points, centers[j : j + 1]).ravel())
    return centers


def kmeans(
    points: np.ndarray, K: int, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Plus-plus seeded Lloyd iterations; deterministic given the seed.

    Stops when the max center shift drops below 1e-6 or after 300 rounds.
    Empty clusters are re-seeded with the point farthest from its center.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be 2-D (n x C)")
    if not np.isfinite(points).all():
        raise ValueError("non-finite points")
    n = points.shape[0]
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if n < K:
        raise ValueError(f"need at least K={K} points, got {n}")
    rng = np.random.default_rng(seed)
    centers = _plusplus_init(points, K, rng)
    labels = np.zeros(n, dtype=np.int64)
    prev_inertia = np.inf
    for _ in range(KMEANS_MAX_ITERS):
        d2 = _pairwise_sq(points, centers)
        labels = d2.argmin(axis=1)
        inertia = float(d2[np.arange(n), labels].sum())
        assert inertia <= prev_inertia + 1e-9, "Lloyd iteration increased inertia"
        prev_inertia = inertia
        new_centers = centers.copy()
        costs = d2[np.arange(n), labels].copy()
        for j in range(K):
            members = labels == j
            if members.any():
                new_centers[j] = points[members].mean(axis=0)
            else:
                far = int(costs.argmax())
                new_centers[j] = points[far]
                labels[far] = j
                costs[far] = -1.0  # a second empty cluster picks a different point
        shift = float(np.abs(new_centers - centers).max())
        centers = new_centers
        if shift < KMEANS_TOL:
            break
    d2 = _pairwise_sq(points, centers)
    labels = d2.argmin(axis=1)
    return labels, centers


# ---------------------------------------------------------------------------
# Silhouette
# ---------------------------------------------------------------------------


def silhouette(
    points: np.ndarray,
    labels: np.ndarray,
    max_points: int = SILHOUETTE_MAX_POINTS,
    seed: int = 0,
) -> float:
    """Mean (b - a) / max(a, b) with Euclidean distances.

    Points with a = b = 0 (or singleton clusters) contribute 0. Inputs larger
    than ``max_points`` are subsampled per cluster (seeded, at least one point
    per cluster) before the quadratic distance computation.
    """
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    uniq, counts = np.unique(labels, return_counts=True)
    if uniq.size < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    if (counts == 0).any():
        raise ValueError("empty cluster")
    n = points.shape[0]
    if n > max_points:
        rng = np.random.default_rng(seed)
        keep: list[np.ndarray] = []
        for u, c in zip(uniq, counts):
            idx = np.where(labels == u)[0]
            quota = max(1, int(round(max_points * c / n)))
            if idx.size > quota:
                idx = rng.choice(idx, size=quota, replace=False)
            keep.append(idx)
        sel = np.sort(np.concatenate(keep))
        points = points[sel]
        labels = labels[sel]
        uniq = np.unique(labels)
        n = points.shape[0]

    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=2))
    scores = np.zeros(n)
    masks = {u: labels == u for u in uniq}
    for i in range(n):
        own = masks[labels[i]]
        same = int(own.sum())
        if same <= 1:
            scores[i] = 0.0
            continue
        a = dist[i, own].sum() / (same - 1)
        b = min(dist[i, masks[u]].mean() for u in uniq if u != labels[i])
        m = max(a, b)
        scores[i] = 0.0 if m == 0.0 else (b - a) / m
    return float(scores.mean())


def select_k(
    points: np.ndarray, kmin: int = 2, kmax: int = 10, seed: int = 0
) -> tuple[int, np.ndarray]:
    """Silhouette sweep over K in [kmin, kmax]; ties go to the smaller K."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < kmax:
        raise ValueError(
            f"need at least kmax={kmax} points for the sweep, got {points.shape[0]}"
        )
    best_k, best_score, best_labels = None, -np.inf, None
    for k in range(kmin, kmax + 1):
        labels, _ = kmeans(points, k, seed)
        if np.unique(labels).size < 2:
            continue
        score = silhouette(points, labels, seed=seed)
        if score > best_score:
            best_k, best_score, best_labels = k, score, labels
    if best_k is None:
        raise ValueError("no K in the sweep produced >= 2 clusters")
    return best_k, best_labels


# ---------------------------------------------------------------------------
# Field segmentation
# ---------------------------------------------------------------------------


def _field_points(field: EigenField) -> tuple[np.ndarray, tuple[int, int]]:
    h = field.values.shape[0]
    w = field.values.shape[1]
    return field.flat(), (h, w)


def segment_field(
    field: EigenField,
    k_mode: int | str = "auto",
    seed: int = 0,
    kmin: int = 2,
    kmax: int = 10,
) -> SegmentationMap:
    """Hard K-Means assignment of per-pixel channel vectors.

    ``k_mode='auto'`` sweeps K in [kmin, kmax] by silhouette; an integer pins
    K directly (dataset protocol uses a fixed K). Degenerate inputs (fewer
    distinct points than K) are flagged in provenance.
    """
    points, (h, w) = _field_points(field)
    if k_mode == "auto":
        k, labels = select_k(points, kmin, kmax, seed)
        mode = "auto"
    else:
        k = int(k_mode)
        labels, _ = kmeans(points, k, seed)
        mode = "fixed"
    degenerate = np.unique(points, axis=0).shape[0] < k
    return SegmentationMap(
        labels=labels.reshape(h, w),
        K=k,
        provenance={
            "seed": seed,
            "k_mode": mode,
            "K": k,
            "degenerate": bool(degenerate),
            "source_field": field.meta.get("id"),
        },
    )


# ---------------------------------------------------------------------------
# Instance proposals
# ---------------------------------------------------------------------------


def _region_adjacency(labels: np.ndarray) -> set[tuple[int, int]]:
    pairs = set()
    h, w = labels.shape
    a, b = labels[:, :-1], labels[:, 1:]
    for x, y in zip(a[a != b].ravel(), b[a != b].ravel()):
        pairs.add((min(int(x), int(y)), max(int(x), int(y))))
    a, b = labels[:-1, :], labels[1:, :]
    for x, y in zip(a[a != b].ravel(), b[a != b].ravel()):
        pairs.add((min(int(x), int(y)), max(int(x), int(y))))
    return pairs


def _ward_merge_masks(
    labels: np.ndarray, features: np.ndarray
) -> list[np.ndarray]:
    """All intermediate masks from ward-linkage merging of adjacent regions.

    Ward distance between regions uses size-weighted feature means:
    |A||B| / (|A|+|B|) * ||mu_A - mu_B||^2. Only 4-connected neighbors merge.
    """
    h, w = labels.shape
    flat = labels.ravel()
    region_ids = sorted(int(u) for u in np.unique(labels))
    masks = {r: flat == r for r in region_ids}
    sizes = {r: int(masks[r].sum()) for r in region_ids}
    means = {r: features[masks[r]].mean(axis=0) for r in region_ids}
    adjacency: dict[int, set[int]] = {r: set() for r in region_ids}
    for x, y in _region_adjacency(labels):
        adjacency[x].add(y)
        adjacency[y].add(x)

    out: list[np.ndarray] = []
    alive = set(region_ids)
    next_id = max(region_ids) + 1
    while len(alive) > 1:
        best = None
        for r in sorted(alive):
            for s in sorted(adjacency[r]):
                if s <= r or s not in alive:
                    continue
                nr, ns = sizes[r], sizes[s]
                d = nr * ns / (nr + ns) * float(
                    ((means[r] - means[s]) ** 2).sum()
                )
                if best is None or d < best[0]:
                    best = (d, r, s)
        if best is None:
            break  # no adjacent pairs left (disconnected partition)
        _, r, s = best
        merged = masks[r] | masks[s]
        nm = sizes[r] + sizes[s]
        means[next_id] = (sizes[r] * means[r] + sizes[s] * means[s]) / nm
        masks[next_id] = merged
        sizes[next_id] = nm
        adjacency[next_id] = (adjacency[r] | adjacency[s]) - {r, s}
        for t in adjacency[next_id]:
            adjacency[t].discard(r)
            adjacency[t].discard(s)
            adjacency[t].add(next_id)
        alive -= {r, s}
        alive.add(next_id)
        out.append(merged.reshape(h, w))
        next_id += 1
    return out


def propose_instances(
    field: EigenField, seed: int = 0, kmin: int = 2, kmax: int = 10
) -> list[InstanceProposal]:
    """Proposal pool: every K-Means cluster for K in [kmin, kmax] plus every
    ward-merge intermediate of spatially adjacent regions, scored by
    ``rank_proposal``. Full-image masks are skipped (nothing to rank against);
    duplicate masks keep one entry.
    """
    points, (h, w) = _field_points(field)
    n = h * w
    seen: dict[bytes, InstanceProposal] = {}

    def _admit(mask: np.ndarray, origin: tuple) -> None:
        count = int(mask.sum())
        if count == 0 or count == n:
            return
        key = np.packbits(mask.ravel()).tobytes()
        if key in seen:
            return
        score = rank_proposal(field, mask)
        seen[key] = InstanceProposal(mask=mask, score=score, origin=origin)

    for k in range(kmin, min(kmax, n - 1) + 1):
        if n < k:
            break
        labels, _ = kmeans(points, k, seed)
        grid = labels.reshape(h, w)
        for c in np.unique(labels):
            _admit(grid == c, (k, int(c)))
        for step, merged in enumerate(_ward_merge_masks(grid, points)):
            _admit(merged, ("merge", k, step))
    return list(seen.values())


def rank_proposal(field: EigenField, mask: np.ndarray) -> float:
    """Balanced two-cluster silhouette of a foreground mask.

    Background is subsampled to the |mask| pixels nearest (in feature space)
    to the foreground centroid, so small objects are not swamped.
    """
    points, (h, w) = _field_points(field)
    mask = np.asarray(mask, dtype=bool).reshape(h * w)
    m = int(mask.sum())
    if m == 0:
        raise ValueError("mask is empty")
    if m == mask.size:
        raise ValueError("mask covers the whole image")
    fg = points[mask]
    bg = points[~mask]
    centroid = fg.mean(axis=0)
    if bg.shape[0] > m:
        d2 = ((bg - centroid) ** 2).sum(axis=1)
        order = np.argsort(d2, kind="stable")[:m]
        bg = bg[order]
    combined = np.concatenate([fg, bg], axis=0)
    labels = np.concatenate([np.zeros(len(fg), int), np.ones(len(bg), int)])
    return silhouette(combined, labels)


def filter_proposals(
    proposals: list[InstanceProposal],
    min_px: int = 16,
    max_frac: float = 0.9,
    iou_dedup: float = 0.9,
) -> list[InstanceProposal]:
    """Drop extreme sizes and non-positive scores, then greedy IoU dedup."""
    kept: list[InstanceProposal] = []
    for p in sorted(proposals, key=lambda p: -p.score):
        area = int(p.mask.sum())
        if area < min_px or area > max_frac * p.mask.size:
            continue
        if p.score <= 0:
            continue
        dup = False
        for q in kept:
            inter = np.logical_and(p.mask, q.mask).sum()
            union = np.logical_or(p.mask, q.mask).sum()
            if union and inter / union >= iou_dedup:
                dup = True
                break
        if not dup:
            kept.append(p)
    return kept


# ---------------------------------------------------------------------------
# Zero-shot labeling
# ---------------------------------------------------------------------------


def zero_shot_assign(
    region_features: np.ndarray,
    class_embeddings: np.ndarray,
    threshold: float = 0.7,
) -> np.ndarray:
    """Cosine-argmax class per region, or BACKGROUND when below threshold.

    Ties above threshold resolve to the lower class index.
    """
    R = np.asarray(region_features, dtype=np.float64)
    E = np.asarray(class_embeddings, dtype=np.float64)
    rn = np.linalg.norm(R, axis=1)
    en = np.linalg.norm(E, axis=1)
    if (rn == 0).any():
        raise ValueError(f"region {int(np.where(rn == 0)[0][0])} has zero norm")
    if (en == 0).any():
        raise ValueError(f"class {int(np.where(en == 0)[0][0])} has zero norm")
    cos = (R / rn[:, None]) @ (E / en[:, None]).T
    out = np.full(R.shape[0], BACKGROUND, dtype=np.int64)
    best = cos.argmax(axis=1)  # argmax returns the lowest index on ties
    best_val = cos[np.arange(R.shape[0]), best]
    hit = best_val >= threshold
    out[hit] = best[hit]
    return out
