"""Privacy mechanisms: partial release, plane generalization, conservative caps.

Generalization replaces surfaces by planes fitted with a greedy RANSAC that
hypothesizes each candidate plane directly from one point and its normal.
Across successive releases a :class:`ReleaseState` accumulates the raw points
revealed so far; new points are first subsumed by existing planes (in plane
creation order) and only the leftovers are offered to RANSAC, so earlier
generalizations stay stable. Conservative releasing caps how many planes are
ever released while the full state is kept for future subsumption.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    PointCloud,
    RigidTransform,
    SpatialIndex,
    apply_transform,
    random_rigid_transform,
)

__all__ = [
    "GeneralizationParams",
    "Plane",
    "ReleasePolicy",
    "ReleaseState",
    "ReleaseStep",
    "conservative_release",
    "project_snapshot",
    "project_to_planes",
    "ransac_planes",
    "release_sequence",
    "subsume",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GeneralizationParams:
    dist_eps: float = 0.05            # max point-to-plane distance, meters
    normal_angle_max: float = 30.0    # max normal deviation, degrees
    min_inliers: int = 30
    candidates_per_round: int = 100

    def __post_init__(self):
        if min(self.dist_eps, self.normal_angle_max) <= 0:
            raise ValueError("dist_eps and normal_angle_max must be positive")
        if min(self.min_inliers, self.candidates_per_round) < 1:
            raise ValueError("min_inliers and candidates_per_round must be >= 1")

    @property
    def cos_angle_max(self) -> float:
        return math.cos(math.radians(self.normal_angle_max))


@dataclass
class Plane:
    """A fitted plane n . x = offset with the points it claimed."""

    normal: np.ndarray
    offset: float
    inlier_indices: np.ndarray
    seq: int

    def distances(self, positions: np.ndarray) -> np.ndarray:
        return np.abs(positions @ self.normal - self.offset)

    def accepts(self, positions: np.ndarray, normals: np.ndarray,
                params: GeneralizationParams) -> np.ndarray:
        near = self.distances(positions) <= params.dist_eps
        aligned = np.abs(normals @ self.normal) >= params.cos_angle_max
        return near & aligned


@dataclass(frozen=True)
class ReleasePolicy:
    """How a space is revealed: ball radius, count, plane cap, walk step."""

    radius: float
    num_releases: int = 1
    max_planes: int | None = None
    walk_step_max: float | None = None

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.num_releases < 1:
            raise ValueError("num_releases must be >= 1")
        if self.max_planes is not None and self.max_planes < 1:
            raise ValueError("max_planes must be >= 1 when bounded")

    @property
    def step(self) -> float:
        return self.walk_step_max if self.walk_step_max is not None else self.radius


def _fit_plane_lsq(positions: np.ndarray, guide_normal: np.ndarray):
    """Least-squares plane through the points, signed like ``guide_normal``."""
    center = positions.mean(axis=0)
    centered = positions - center
    cov = centered.T @ centered
    _, vecs = np.linalg.eigh(cov)
    normal = vecs[:, 0]
    if normal @ guide_normal < 0:
        normal = -normal
    return normal, float(normal @ center)


def _greedy_extract(positions, normals, eligible, pool, params, rng, start_seq):
    """Repeatedly commit the best one-point-plus-normal plane hypothesis.

    ``pool`` holds the currently unassigned point indices; committed planes
    remove their inliers from it. Returns (planes, remaining_pool).
    """
    planes: list[Plane] = []
    pool = np.asarray(pool, dtype=np.intp)
    pool = pool[eligible[pool]]
    seq = start_seq
    while len(pool) >= params.min_inliers:
        n_cand = min(params.candidates_per_round, len(pool))
        candidates = rng.choice(pool, size=n_cand, replace=False)
        pool_pos = positions[pool]
        pool_nrm = normals[pool]
        best_count = 0
        best_mask = None
        best_candidate = -1
        for c in candidates:
            n_c = normals[c]
            off = float(n_c @ positions[c])
            near = np.abs(pool_pos @ n_c - off) <= params.dist_eps
            aligned = np.abs(pool_nrm @ n_c) >= params.cos_angle_max
            mask = near & aligned
            count = int(mask.sum())
            if count > best_count:
                best_count = count
                best_mask = mask
                best_candidate = c
        if best_count < params.min_inliers:
            break
        inliers = pool[best_mask]
        normal, offset = _fit_plane_lsq(positions[inliers], normals[best_candidate])
        refit = Plane(normal, offset, inliers, seq)
        refit_mask = refit.accepts(pool_pos, pool_nrm, params)
        if int(refit_mask.sum()) >= params.min_inliers:
            refit.inlier_indices = np.sort(pool[refit_mask])
            plane = refit
        else:
            # The refit drifted off the consensus set; keep the raw hypothesis.
            n_c = normals[best_candidate]
            plane = Plane(n_c.copy(), float(n_c @ positions[best_candidate]),
                          np.sort(inliers), seq)
        planes.append(plane)
        keep = ~np.isin(pool, plane.inlier_indices, assume_unique=False)
        pool = pool[keep]
        seq += 1
    return planes, pool


def _eligible_mask(cloud: PointCloud) -> np.ndarray:
    if not cloud.has_normals:
        raise ValueError("cloud has no normals; run estimate_normals first")
    if cloud.reliable is None:
        return np.ones(len(cloud), dtype=bool)
    return cloud.reliable.copy()


def ransac_planes(cloud: PointCloud, params: GeneralizationParams = GeneralizationParams(),
                  seed=0) -> list[Plane]:
    """Greedy plane extraction over the whole cloud; deterministic per seed.

    Points with unreliable normals never become candidates or inliers.
    """
    if len(cloud) == 0:
        return []
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    eligible = _eligible_mask(cloud)
    planes, _ = _greedy_extract(
        cloud.positions, cloud.normals, eligible,
        np.arange(len(cloud)), params, rng, start_seq=0,
    )
    return planes


def project_to_planes(cloud: PointCloud, planes: list[Plane]) -> PointCloud:
    """Replace each assigned point by its orthogonal projection onto its plane.

    Projected normals take the plane normal, signed to agree with the point's
    own normal. Points claimed by no plane are dropped. Output order is plane
    creation order, then ascending point index within a plane.
    """
    chunks_pos = []
    chunks_nrm = []
    for plane in sorted(planes, key=lambda p: p.seq):
        idx = plane.inlier_indices
        pos = cloud.positions[idx]
        resid = pos @ plane.normal - plane.offset
        chunks_pos.append(pos - resid[:, None] * plane.normal)
        sign = np.where(cloud.normals[idx] @ plane.normal >= 0, 1.0, -1.0)
        chunks_nrm.append(sign[:, None] * plane.normal)
    if not chunks_pos:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), cloud.label)
    return PointCloud(
        np.vstack(chunks_pos), np.vstack(chunks_nrm), cloud.label
    )


@dataclass
class ReleaseState:
    """Accumulated raw points, accepted planes, and residuals across releases."""

    positions: np.ndarray
    normals: np.ndarray
    reliable: np.ndarray
    planes: list[Plane] = field(default_factory=list)
    assignment: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    label: str | None = None

    @classmethod
    def empty(cls, label: str | None = None) -> "ReleaseState":
        return cls(
            positions=np.zeros((0, 3)),
            normals=np.zeros((0, 3)),
            reliable=np.zeros(0, dtype=bool),
            assignment=np.zeros(0, dtype=np.intp),
            label=label,
        )

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def residual_indices(self) -> np.ndarray:
        return np.flatnonzero(self.assignment < 0)

    @property
    def accumulated(self) -> PointCloud:
        return PointCloud(self.positions, self.normals, self.label, self.reliable)


def subsume(state: ReleaseState, new_points: PointCloud,
            params: GeneralizationParams = GeneralizationParams(),
            seed=0) -> ReleaseState:
    """Fold newly revealed points into the state.

    Each new point goes to the first existing plane (creation order) that
    accepts it; the leftovers join the state's residuals and a RANSAC pass may
    mint additional planes from that pool. Existing planes are never refit, so
    previously released projections stay fixed.
    """
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    base = len(state)
    if not new_points.has_normals:
        raise ValueError("new points need normals")
    state.positions = np.vstack([state.positions, new_points.positions])
    state.normals = np.vstack([state.normals, new_points.normals])
    new_reliable = (
        new_points.reliable
        if new_points.reliable is not None
        else np.ones(len(new_points), dtype=bool)
    )
    state.reliable = np.concatenate([state.reliable, new_reliable])
    state.assignment = np.concatenate(
        [state.assignment, np.full(len(new_points), -1, dtype=np.intp)]
    )

    fresh = np.arange(base, len(state), dtype=np.intp)
    unclaimed = fresh[state.reliable[fresh]]
    for plane in state.planes:
        if len(unclaimed) == 0:
            break
        mask = plane.accepts(state.positions[unclaimed], state.normals[unclaimed], params)
        claimed = unclaimed[mask]
        if len(claimed):
            plane.inlier_indices = np.sort(
                np.concatenate([plane.inlier_indices, claimed])
            )
            state.assignment[claimed] = plane.seq
            unclaimed = unclaimed[~mask]

    pool = np.concatenate([state.residual_indices])
    new_planes, _ = _greedy_extract(
        state.positions, state.normals, state.reliable, pool, params, rng,
        start_seq=len(state.planes),
    )
    for plane in new_planes:
        state.assignment[plane.inlier_indices] = plane.seq
        state.planes.append(plane)
    return state


def _ranked_planes(planes: list[Plane]) -> list[Plane]:
    return sorted(planes, key=lambda p: (-len(p.inlier_indices), p.seq))


def conservative_release(state: ReleaseState, max_planes: int | None) -> PointCloud:
    """Projections of the points held by the top-ranked planes.

    Ranking is inlier count descending, ties by creation order. The state
    itself is untouched; withheld planes remain available for subsumption.
    """
    if max_planes is not None and max_planes < 1:
        raise ValueError("max_planes must be >= 1 when bounded")
    chosen = _ranked_planes(state.planes)
    if max_planes is not None:
        chosen = chosen[:max_planes]
    return project_to_planes(state.accumulated, chosen)


@dataclass(frozen=True)
class ReleaseStep:
    """One emitted release: the query the application sees plus ground truth.

    ``plane_snapshot`` and ``n_accumulated`` freeze the generalization state
    as of this release (plane inlier indices refer to the state's first
    ``n_accumulated`` accumulated points), so any conservative cap can be
    re-projected after the fact without replaying the sequence.
    """

    query: PointCloud               # released cloud, re-expressed in a random frame
    released: PointCloud            # same cloud in the reference frame
    center: np.ndarray              # walk center, reference frame
    transform: RigidTransform       # frame change applied to the query
    accumulated_indices: np.ndarray  # source-space indices revealed so far
    n_planes: int
    plane_snapshot: tuple[Plane, ...] = ()
    n_accumulated: int = 0


def project_snapshot(state: ReleaseState, step: ReleaseStep,
                     max_planes: int | None) -> PointCloud:
    """Released cloud this step would have emitted under the given cap."""
    cloud = PointCloud(
        state.positions[: step.n_accumulated],
        state.normals[: step.n_accumulated],
        state.label,
        state.reliable[: step.n_accumulated],
    )
    chosen = _ranked_planes(list(step.plane_snapshot))
    if max_planes is not None:
        chosen = chosen[:max_planes]
    return project_to_planes(cloud, chosen)


def release_sequence(space: PointCloud, policy: ReleasePolicy, seed=0,
                     params: GeneralizationParams = GeneralizationParams(),
                     generalize: bool = True) -> tuple[list[ReleaseStep], ReleaseState]:
    """Simulate a user revealing a space along a random walk.

    Per release: extract the ball around the walk center, accumulate the
    not-yet-seen points, subsume/generalize, then emit the (conservatively
    capped) release re-expressed in one random rigid frame shared by the whole
    sequence. With ``generalize=False`` the accumulated raw points are emitted
    instead, for baseline comparisons.
    """
    if len(space) == 0:
        raise ValueError("space is empty")
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    transform = random_rigid_transform(rng)
    index = SpatialIndex(space)
    state = ReleaseState.empty(space.label)
    seen = np.zeros(len(space), dtype=bool)
    steps: list[ReleaseStep] = []
    center_idx = int(rng.integers(len(space)))
    for _ in range(policy.num_releases):
        center = space.positions[center_idx]
        ball = index.ball(center, policy.radius)
        new_idx = ball[~seen[ball]]
        seen[new_idx] = True
        if generalize:
            if len(new_idx):
                subsume(state, space.subset(new_idx), params, rng)
            released = conservative_release(state, policy.max_planes)
        else:
            if len(new_idx):
                state.positions = np.vstack([state.positions, space.positions[new_idx]])
                state.normals = np.vstack([state.normals, space.normals[new_idx]])
                rel = (space.reliable[new_idx] if space.reliable is not None
                       else np.ones(len(new_idx), dtype=bool))
                state.reliable = np.concatenate([state.reliable, rel])
                state.assignment = np.concatenate(
                    [state.assignment, np.full(len(new_idx), -1, dtype=np.intp)]
                )
            released = state.accumulated
        steps.append(
            ReleaseStep(
                query=apply_transform(released, transform) if len(released) else released,
                released=released,
                center=center.copy(),
                transform=transform,
                accumulated_indices=np.flatnonzero(seen),
                n_planes=len(state.planes),
                plane_snapshot=tuple(
                    Plane(p.normal.copy(), p.offset, p.inlier_indices.copy(), p.seq)
                    for p in state.planes
                ),
                n_accumulated=len(state),
            )
        )
        # Random-walk user movement: next center uniform over nearby points.
        nearby = index.ball(center, policy.step)
        if len(nearby) == 0:
            log.warning("no points within walk step of current center; restarting walk")
            center_idx = int(rng.integers(len(space)))
        else:
            center_idx = int(nearby[rng.integers(len(nearby))])
    return steps, state
