"""Point-cloud data model, rigid transforms, and exact nearest-neighbor search.

Positions are in meters throughout. A cloud carries one unit normal per point;
normals may be absent (``normals is None``) until :func:`estimate_normals` is
run, and individual normals may be flagged unreliable when the local
neighborhood does not define a plane.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "PointCloud",
    "RigidTransform",
    "SpatialIndex",
    "apply_transform",
    "canonical_order",
    "centroid",
    "estimate_normals",
    "extract_partial",
    "knn",
    "knn_bruteforce",
    "random_rigid_transform",
]

UNIT_NORM_TOL = 1e-6


def _as_points(a, name: str = "positions") -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contain non-finite values")
    return a


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of oriented points, optionally labeled with a space id.

    ``reliable`` marks points whose normal is trustworthy; unreliable points
    are skipped by keypoint selection. When ``normals`` is present, every
    reliable normal has unit length within 1e-6.
    """

    positions: np.ndarray
    normals: np.ndarray | None = None
    label: str | None = None
    reliable: np.ndarray | None = None

    def __post_init__(self):
        pos = _as_points(self.positions)
        object.__setattr__(self, "positions", pos)
        if self.normals is not None:
            nrm = _as_points(self.normals, "normals")
            if len(nrm) != len(pos):
                raise ValueError("normals and positions length mismatch")
            rel = self.reliable
            if rel is None:
                rel = np.ones(len(pos), dtype=bool)
            else:
                rel = np.asarray(rel, dtype=bool).copy()
                if rel.shape != (len(pos),):
                    raise ValueError("reliable mask has wrong shape")
            lens = np.linalg.norm(nrm[rel], axis=1)
            if len(lens) and np.max(np.abs(lens - 1.0), initial=0.0) > UNIT_NORM_TOL:
                raise ValueError("reliable normals must have unit length within 1e-6")
            nrm.flags.writeable = False
            rel.flags.writeable = False
            object.__setattr__(self, "normals", nrm)
            object.__setattr__(self, "reliable", rel)
        elif self.reliable is not None:
            raise ValueError("reliable mask given without normals")
        pos.flags.writeable = False

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, indices: np.ndarray, label: str | None = None) -> "PointCloud":
        """New cloud keeping the given point indices, in the given order."""
        indices = np.asarray(indices)
        return PointCloud(
            self.positions[indices],
            None if self.normals is None else self.normals[indices],
            label if label is not None else self.label,
            None if self.reliable is None else self.reliable[indices],
        )

    def with_label(self, label: str) -> "PointCloud":
        return replace(self, label=label)


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion x -> R @ x + t (rotation + translation only)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.ascontiguousarray(self.rotation, dtype=np.float64)
        t = np.ascontiguousarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be (3, 3) and translation (3,)")
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def apply_rotation(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


class SpatialIndex:
    """Exact k-nearest-neighbor index over a cloud's positions.

    Queries return exactly what a linear scan would: neighbors ordered by
    Euclidean distance, ties broken by lower point index. Read-only after
    construction, safe for concurrent queries.
    """

    def __init__(self, cloud_or_points):
        if isinstance(cloud_or_points, PointCloud):
            pts = cloud_or_points.positions
        else:
            pts = _as_points(cloud_or_points)
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries: np.ndarray, k: int):
        """k nearest neighbors of each query point.

        Returns ``(distances, indices)`` each of shape ``(q, k)`` (or ``(k,)``
        for a single query point).
        """
        queries = np.asarray(queries, dtype=np.float64)
        single = queries.ndim == 1
        q = queries.reshape(-1, 3)
        n = len(self.points)
        if not 1 <= k <= n:
            raise ValueError(f"k={k} out of range for index of size {n}")
        dist, idx = self._tree.query(q, k=k)
        dist = dist.reshape(len(q), k)
        idx = idx.reshape(len(q), k)
        # Re-resolve the boundary of each answer set so that equal distances
        # come out in index order, exactly as a linear scan would.
        for row in range(len(q)):
            dk = dist[row, -1]
            cand = self._tree.query_ball_point(q[row], dk * (1.0 + 1e-12) + 1e-300)
            cand = np.asarray(cand, dtype=np.intp)
            d = np.linalg.norm(self.points[cand] - q[row], axis=1)
            order = np.lexsort((cand, d))[:k]
            dist[row] = d[order]
            idx[row] = cand[order]
        if single:
            return dist[0], idx[0]
        return dist, idx

    def ball(self, center: np.ndarray, radius: float) -> np.ndarray:
        """Indices of points with distance <= radius, ascending by index."""
        out = self._tree.query_ball_point(np.asarray(center, dtype=np.float64), radius)
        return np.sort(np.asarray(out, dtype=np.intp))


def knn(index: SpatialIndex, query: np.ndarray, k: int):
    """k nearest (index, distance) pairs, sorted ascending, ties by index."""
    dist, idx = index.query(query, k)
    return idx, dist


def knn_bruteforce(references: np.ndarray, queries: np.ndarray, k: int):
    """Exact k-nn in arbitrary dimension by full distance computation.

    Same contract as :meth:`SpatialIndex.query` (ascending distance, ties by
    lower reference index) but works for any dimensionality, e.g. descriptor
    space. Returns ``(distances, indices)`` of shape ``(q, k)``.
    """
    references = np.asarray(references, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim == 1:
        queries = queries[None, :]
    n = len(references)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for reference set of size {n}")
    # ||q - r||^2 = ||q||^2 - 2 q.r + ||r||^2, computed via one GEMM.
    sq = np.einsum("ij,ij->i", queries, queries)[:, None]
    sr = np.einsum("ij,ij->i", references, references)[None, :]
    d2 = sq - 2.0 * (queries @ references.T) + sr
    np.maximum(d2, 0.0, out=d2)
    dist = np.sqrt(d2)
    ref_ids = np.broadcast_to(np.arange(n), dist.shape)
    if k < n:
        part = np.argpartition(dist, k - 1, axis=1)[:, :k]
        pd = np.take_along_axis(dist, part, axis=1)
        order = np.lexsort((part, pd), axis=1)
        idx = np.take_along_axis(part, order, axis=1)
    else:
        order = np.lexsort((ref_ids, dist), axis=1)
        idx = np.take_along_axis(ref_ids, order, axis=1)
    return np.take_along_axis(dist, idx, axis=1), idx


def centroid(cloud: PointCloud) -> np.ndarray:
    """Arithmetic mean of positions."""
    if len(cloud) == 0:
        raise ValueError("centroid of an empty cloud is undefined")
    return cloud.positions.mean(axis=0)


def apply_transform(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    """Map positions by R p + t and normals by R n, preserving point order."""
    return PointCloud(
        transform.apply(cloud.positions),
        None if cloud.normals is None else transform.apply_rotation(cloud.normals),
        cloud.label,
        cloud.reliable,
    )


def extract_partial(cloud: PointCloud, center: np.ndarray, radius: float) -> PointCloud:
    """Points with ||p - center|| <= radius (inclusive), normals kept."""
    if radius <= 0 and not np.isclose(radius, 0.0):
        raise ValueError("radius must be >= 0")
    center = np.asarray(center, dtype=np.float64)
    d = np.linalg.norm(cloud.positions - center, axis=1)
    return cloud.subset(np.flatnonzero(d <= radius))


def canonical_order(positions: np.ndarray) -> np.ndarray:
    """Permutation sorting points by distance to their centroid, ties by index.

    This ordering is invariant under rigid motion (distances to the centroid
    are preserved) and under storage permutation, which makes deterministic
    subsampling stable across transformed copies of the same cloud.
    """
    positions = np.asarray(positions, dtype=np.float64)
    d = np.linalg.norm(positions - positions.mean(axis=0), axis=1)
    return np.lexsort((np.arange(len(positions)), d))


def random_rigid_transform(
    seed_or_rng, translation_extent: float = 10.0
) -> RigidTransform:
    """Rotation uniform over SO(3), translation uniform in a +-extent box.

    Deterministic for a given integer seed; also accepts a Generator to draw
    from an existing stream.
    """
    rng = np.random.default_rng(seed_or_rng) if not isinstance(
        seed_or_rng, np.random.Generator
    ) else seed_or_rng
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rot = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    # Re-orthonormalize to meet the 1e-9 orthogonality requirement exactly.
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    if np.linalg.det(rot) < 0:
        u[:, -1] = -u[:, -1]
        rot = u @ vt
    t = rng.uniform(-translation_extent, translation_extent, size=3)
    return RigidTransform(rot, t)


def estimate_normals(cloud: PointCloud, k: int) -> PointCloud:
    """Per-point least-squares plane normals over the k nearest neighbors.

    The neighborhood of a point is the point itself plus its k nearest
    neighbors. Normals are oriented away from the bounding-box center
    (n . (p - c) >= 0). Points whose neighborhood is degenerate (collinear or
    coincident) keep an arbitrary unit normal but are flagged unreliable.
    """
    n = len(cloud)
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, have {n}")
    index = SpatialIndex(cloud)
    _, idx = index.query(cloud.positions, k + 1)
    neigh = cloud.positions[idx]  # (n, k+1, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    eigvals, eigvecs = np.linalg.eigh(cov)
    normals = eigvecs[:, :, 0].copy()
    # Collinear or coincident neighborhoods have two vanishing eigenvalues.
    reliable = eigvals[:, 1] > 1e-9 * np.maximum(eigvals[:, 2], 1e-30)

    bbox_center = 0.5 * (cloud.positions.min(axis=0) + cloud.positions.max(axis=0))
    outward = np.einsum("ni,ni->n", normals, cloud.positions - bbox_center)
    flip = outward < 0
    normals[flip] = -normals[flip]
    # Points on a plane through the bbox center get a sign-free fallback:
    # make the dominant component positive.
    ambiguous = np.abs(outward) < 1e-12
    if np.any(ambiguous):
        sub = normals[ambiguous]
        dom = np.abs(sub).argmax(axis=1)
        sign = np.sign(sub[np.arange(len(sub)), dom])
        sign[sign == 0] = 1.0
        normals[ambiguous] = sub * sign[:, None]

    lens = np.linalg.norm(normals, axis=1)
    safe = np.where(lens > 0, lens, 1.0)
    normals /= safe[:, None]
    reliable = reliable & (lens > 0)
    normals[~reliable] = np.array([0.0, 0.0, 1.0])
    return PointCloud(cloud.positions, normals, cloud.label, reliable)
