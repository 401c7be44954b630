"""Geometry kernels and the mix/erase data-synthesis transforms.

Everything here is a pure function over immutable inputs. Randomized
operations take an explicit ``numpy.random.Generator`` so callers control
seeding and can partition streams across workers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class PointCloud:
    """N points with 3D coordinates, optional per-point part labels, category.

    Coordinates live in a normalized, unitless space. ``part_labels`` when
    present has exactly one integer per point.
    """

    points: np.ndarray
    part_labels: np.ndarray | None = None
    category: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.isfinite(pts).all():
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.part_labels is not None:
            labels = np.asarray(self.part_labels, dtype=np.int64)
            if labels.shape != (pts.shape[0],):
                raise ValueError(
                    f"part_labels must have {pts.shape[0]} entries, got {labels.shape}"
                )
            object.__setattr__(self, "part_labels", labels)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class NeighborGraph:
    """Per-point indices of the k nearest neighbors in some feature space.

    Row i holds the k smallest-distance points to i (squared Euclidean),
    ties broken by smaller index, i itself excluded.
    """

    neighbors: np.ndarray  # (N, k) int64

    def __post_init__(self):
        idx = np.asarray(self.neighbors, dtype=np.int64)
        if idx.ndim != 2:
            raise ValueError(f"neighbors must be (N, k), got {idx.shape}")
        object.__setattr__(self, "neighbors", idx)

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]


@dataclass(frozen=True)
class MdSample:
    """One pretext example: two sources, their mixture, erased conditionals."""

    source_a: PointCloud
    source_b: PointCloud
    mixed: PointCloud
    cond_a: np.ndarray  # (N, 3) source_a with one axis zeroed per point
    cond_b: np.ndarray
    erased_axis_a: np.ndarray  # (N,) ints in {0, 1, 2}
    erased_axis_b: np.ndarray


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    """Center the cloud on its centroid and scale the max norm to 1.

    A degenerate cloud (all points identical) cannot be scaled; the centered
    all-zero cloud is returned and a warning is emitted.
    """
    pts = cloud.points
    centered = pts - pts.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius < 1e-12:
        warnings.warn("degenerate cloud: all points identical, scaling skipped")
        scaled = centered
    else:
        scaled = centered / radius
    return PointCloud(scaled, part_labels=cloud.part_labels, category=cloud.category)


def subsample(cloud: PointCloud, n: int, rng: np.random.Generator) -> PointCloud:
    """Draw n points uniformly without replacement, labels carried along."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if n > cloud.n_points:
        raise ValueError(f"insufficient points: requested {n} of {cloud.n_points}")
    idx = rng.choice(cloud.n_points, size=n, replace=False)
    labels = None if cloud.part_labels is None else cloud.part_labels[idx]
    return PointCloud(cloud.points[idx], part_labels=labels, category=cloud.category)


def augment(
    cloud: PointCloud,
    jitter_sigma: float,
    jitter_clip: float,
    scale_lo: float,
    scale_hi: float,
    rng: np.random.Generator,
) -> PointCloud:
    """Jitter each coordinate with clipped Gaussian noise, then apply one
    uniform scale factor to the whole cloud."""
    if jitter_sigma < 0 or jitter_clip < 0:
        raise ValueError("jitter_sigma and jitter_clip must be nonnegative")
    if not (0 < scale_lo <= scale_hi):
        raise ValueError(f"need 0 < scale_lo <= scale_hi, got [{scale_lo}, {scale_hi}]")
    noise = rng.normal(0.0, jitter_sigma, size=cloud.points.shape)
    np.clip(noise, -jitter_clip, jitter_clip, out=noise)
    factor = rng.uniform(scale_lo, scale_hi)
    return PointCloud(
        (cloud.points + noise) * factor,
        part_labels=cloud.part_labels,
        category=cloud.category,
    )


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray, block: int = 64) -> np.ndarray:
    """All-pairs squared Euclidean distances, (len(a), len(b)).

    Computed as sums of squared coordinate differences (not the expanded
    |a|^2 + |b|^2 - 2ab form) so results match a per-pair reference scan
    bit for bit. Row-blocked to bound memory.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float64)
    for start in range(0, a.shape[0], block):
        stop = min(start + block, a.shape[0])
        diff = a[start:stop, None, :] - b[None, :, :]
        out[start:stop] = np.sum(diff * diff, axis=2)
    return out


def knn_graph(features: np.ndarray, k: int) -> NeighborGraph:
    """Exact k-nearest-neighbor graph over row features.

    Exhaustive O(N^2) scan; ties broken by smaller index; a point is never
    its own neighbor.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"features must be (N, C), got {feats.shape}")
    n = feats.shape[0]
    if k >= n:
        raise ValueError(f"k too large: k={k} with N={n}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not np.isfinite(feats).all():
        # inputs are validated at load time, so this is a numeric blow-up
        raise FloatingPointError("features must be finite")
    d2 = pairwise_sq_dists(feats, feats)
    np.fill_diagonal(d2, np.inf)
    # stable sort keeps index order on ties
    order = np.argsort(d2, axis=1, kind="stable")
    return NeighborGraph(order[:, :k])


def chamfer_distance(s_hat: np.ndarray, s: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor L2 distance between two point sets.

    Plain L2 point distances (not squared), averaged within each direction
    and summed over the two directions.
    """
    a = np.asarray(s_hat, dtype=np.float64)
    b = np.asarray(s, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3 or a.shape[0] == 0:
        raise ValueError(f"s_hat must be nonempty (N, 3), got {a.shape}")
    if b.ndim != 2 or b.shape[1] != 3 or b.shape[0] == 0:
        raise ValueError(f"s must be nonempty (M, 3), got {b.shape}")
    d2 = pairwise_sq_dists(a, b)
    fwd = np.sqrt(d2.min(axis=1)).mean()
    bwd = np.sqrt(d2.min(axis=0)).mean()
    return float(fwd + bwd)


def erase_coordinate(
    cloud: PointCloud, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Zero one uniformly chosen axis per point; return (erased, axes).

    The erased coordinate is set to zero rather than removed so the result
    stays N x 3 and axis identity remains decodable.
    """
    axes = rng.integers(0, 3, size=cloud.n_points)
    erased = cloud.points.copy()
    erased[np.arange(cloud.n_points), axes] = 0.0
    return erased, axes


def mix(a: PointCloud, b: PointCloud, rng: np.random.Generator) -> MdSample:
    """Mix two same-size clouds into one and attach erased conditionals.

    ceil(N/2) points are drawn uniformly without replacement from a and
    floor(N/2) from b; the mixed order is shuffled so position leaks no
    source identity.
    """
    n = a.n_points
    if b.n_points != n:
        raise ValueError(f"size mismatch: {n} vs {b.n_points} points")
    n_a = (n + 1) // 2
    n_b = n - n_a
    idx_a = rng.choice(n, size=n_a, replace=False)
    idx_b = rng.choice(n, size=n_b, replace=False)
    mixed_pts = np.concatenate([a.points[idx_a], b.points[idx_b]], axis=0)
    perm = rng.permutation(n)
    mixed = PointCloud(mixed_pts[perm])
    cond_a, axes_a = erase_coordinate(a, rng)
    cond_b, axes_b = erase_coordinate(b, rng)
    return MdSample(
        source_a=a,
        source_b=b,
        mixed=mixed,
        cond_a=cond_a,
        cond_b=cond_b,
        erased_axis_a=axes_a,
        erased_axis_b=axes_b,
    )
