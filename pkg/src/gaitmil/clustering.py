"""Frame clustering: k-means over flattened frames, used to split a clip into bags.

Hand-rolled Lloyd iteration rather than a library call because the partition
contract is stricter than any off-the-shelf kmeans exposes: byte-stable
determinism under a seed, permutation equivariance of the input order, value
based tie-breaking, and guaranteed nonempty clusters.

All decisions are made in a canonical space: points are lexicographically
sorted before seeding, distance ties go to the lexicographically smaller
centroid, and empty clusters steal the farthest point (ties again by value).
Permuting the input rows therefore permutes the assignment and nothing else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .sampling import SampledClip

DEFAULT_BAGS = 3


@dataclass
class KMeansResult:
    assignment: np.ndarray  # [n] cluster index per input row
    centroids: np.ndarray  # [k_eff, dim]
    inertia: float
    inertia_trace: list[float]  # inertia after each assignment step, non-increasing


@dataclass
class BagPartition:
    assignment: np.ndarray  # [n_frames] bag index
    n_bags_requested: int
    n_bags: int  # effective count, < requested only when distinct frames run out
    centroids: np.ndarray
    inertia: float

    def __post_init__(self) -> None:
        sizes = np.bincount(self.assignment, minlength=self.n_bags)
        if len(sizes) != self.n_bags or (sizes == 0).any():
            raise ArgumentError(f"every bag must be nonempty, got sizes {sizes.tolist()}")

    def bag_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_bags)


def _lex_ranks(rows: np.ndarray) -> np.ndarray:
    """Rank of each row under lexicographic ordering (first column dominant)."""
    order = np.lexsort(rows.T[::-1])
    ranks = np.empty(len(rows), dtype=np.int64)
    ranks[order] = np.arange(len(rows))
    return ranks


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _assign(d2: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # Exact-distance ties resolve toward the lexicographically smaller centroid,
    # so the result cannot depend on centroid construction order.
    ranks = _lex_ranks(centers)
    tied = d2 == d2.min(axis=1, keepdims=True)
    masked = np.where(tied, ranks[None, :], len(centers))
    return np.argmin(masked, axis=1)


def _seed_centers(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ over points already in canonical (sorted) order."""
    n = len(points)
    centers = np.empty((k, points.shape[1]), dtype=points.dtype)
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:  # unreachable when k <= distinct count; keep the run alive anyway
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[j] = points[idx]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def _means_with_repair(
    points: np.ndarray, assignment: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """Cluster means; empty clusters steal the farthest point from the rest.

    Points arrive sorted, so the first index among distance ties is already the
    lexicographically smallest point. Stealing only from clusters of size >= 2
    keeps every cluster nonempty. Mutates and returns the assignment.
    """
    dim = points.shape[1]
    centers = np.zeros((k, dim), dtype=points.dtype)
    counts = np.bincount(assignment, minlength=k)
    for j in range(k):
        if counts[j]:
            centers[j] = points[assignment == j].mean(axis=0)
    for j in range(k):
        if counts[j]:
            continue
        d2 = ((points - centers[assignment]) ** 2).sum(axis=1)
        eligible = counts[assignment] >= 2
        d2 = np.where(eligible, d2, -1.0)
        donor = int(np.argmax(d2))
        src = assignment[donor]
        assignment[donor] = j
        counts[src] -= 1
        counts[j] = 1
        centers[j] = points[donor]
        centers[src] = points[assignment == src].mean(axis=0)
    return centers, assignment


def kmeans(
    points: np.ndarray,
    n_clusters: int,
    rng: np.random.Generator,
    max_iter: int = 50,
    n_restarts: int = 1,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding, best-of-``n_restarts`` by inertia.

    Fewer distinct points than clusters collapses to one cluster per distinct
    value with zero inertia.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise ArgumentError(f"points must be a nonempty [n, dim] array, got shape {pts.shape}")
    if not np.isfinite(pts).all():
        raise ArgumentError("points must be finite")
    if n_clusters < 1 or max_iter < 1 or n_restarts < 1:
        raise ArgumentError("n_clusters, max_iter, and n_restarts must all be >= 1")

    order = np.lexsort(pts.T[::-1])
    sorted_pts = pts[order]
    distinct, inverse = np.unique(sorted_pts, axis=0, return_inverse=True)
    n = len(pts)

    if len(distinct) < n_clusters:
        assignment = np.empty(n, dtype=np.int64)
        assignment[order] = inverse
        return KMeansResult(assignment, distinct, 0.0, [0.0])

    best: tuple[np.ndarray, np.ndarray, list[float]] | None = None
    for _ in range(n_restarts):
        centers = _seed_centers(sorted_pts, n_clusters, rng)
        assign = _assign(_sq_dists(sorted_pts, centers), centers)
        trace: list[float] = []
        for _ in range(max_iter):
            centers, assign = _means_with_repair(sorted_pts, assign, n_clusters)
            d2 = _sq_dists(sorted_pts, centers)
            new_assign = _assign(d2, centers)
            trace.append(float(d2[np.arange(n), new_assign].sum()))
            if np.array_equal(new_assign, assign):
                break
            assign = new_assign
        if best is None or trace[-1] < best[2][-1]:
            best = (assign, centers, trace)

    assign_sorted, centers, trace = best
    assignment = np.empty(n, dtype=np.int64)
    assignment[order] = assign_sorted
    return KMeansResult(assignment, centers, trace[-1], trace)


def partition_frames(
    frames: np.ndarray,
    n_bags: int = DEFAULT_BAGS,
    rng: np.random.Generator | None = None,
) -> BagPartition:
    """Split [S, H, W] frames into bags by k-means over the flattened pixels."""
    if rng is None:
        raise ArgumentError("partition_frames needs an explicit rng")
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.shape[0] == 0:
        raise ArgumentError(f"frames must be [S, H, W], got shape {frames.shape}")
    if n_bags == 1:  # single-bag path used by the no-MIL ablation, no clustering needed
        return BagPartition(
            assignment=np.zeros(frames.shape[0], dtype=np.int64),
            n_bags_requested=1,
            n_bags=1,
            centroids=frames.reshape(frames.shape[0], -1).mean(axis=0, keepdims=True),
            inertia=float(
                ((frames.reshape(frames.shape[0], -1) - frames.reshape(frames.shape[0], -1).mean(axis=0)) ** 2).sum()
            ),
        )
    result = kmeans(frames.reshape(frames.shape[0], -1), n_bags, rng)
    return BagPartition(
        assignment=result.assignment,
        n_bags_requested=n_bags,
        n_bags=len(result.centroids),
        centroids=result.centroids,
        inertia=result.inertia,
    )


def partition_clip(
    clip: SampledClip, n_bags: int = DEFAULT_BAGS, rng: np.random.Generator | None = None
) -> BagPartition:
    return partition_frames(clip.frames, n_bags, rng)
