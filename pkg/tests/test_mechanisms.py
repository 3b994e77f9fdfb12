"""Plane generalization, subsumption, conservative caps, release sequences."""

import numpy as np
import pytest

from spatialprivacy.geometry import PointCloud, centroid
from spatialprivacy.mechanisms import (
    GeneralizationParams,
    ReleasePolicy,
    ReleaseState,
    conservative_release,
    project_snapshot,
    project_to_planes,
    ransac_planes,
    release_sequence,
    subsume,
)
from spatialprivacy.synthetic import SyntheticSpaceSpec, generate_space

from conftest import make_box_room, make_plane_cloud

GP = GeneralizationParams()


class TestRansacPlanes:
    def test_perfect_plane(self):
        cloud = make_plane_cloud(500)
        planes = ransac_planes(cloud, GP, seed=0)
        assert len(planes) == 1
        plane = planes[0]
        assert np.allclose(np.abs(plane.normal), [0, 0, 1], atol=1e-9)
        assert abs(plane.offset) < 1e-9
        assert len(plane.inlier_indices) == 500

    def test_empty_cloud(self):
        cloud = PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
        assert ransac_planes(cloud, GP, seed=0) == []

    def test_box_room_recovery(self):
        cloud, face_normals, face_offsets = make_box_room(300)
        planes = ransac_planes(cloud, GP, seed=3)
        assert len(planes) == 6
        assert sorted(len(p.inlier_indices) for p in planes) == [300] * 6
        matched_faces = set()
        for plane in planes:
            for face, (fn, fo) in enumerate(zip(face_normals, face_offsets)):
                sign = fn @ plane.normal
                if abs(sign) > 1.0 - 1e-3 and abs(
                    plane.offset * np.sign(sign) - fo
                ) < 1e-3:
                    matched_faces.add(face)
                    break
            else:
                pytest.fail(f"plane {plane.normal}, {plane.offset} matches no face")
        assert matched_faces == set(range(6))

    def test_deterministic_per_seed(self):
        cloud, _, _ = make_box_room(200)
        a = ransac_planes(cloud, GP, seed=9)
        b = ransac_planes(cloud, GP, seed=9)
        assert len(a) == len(b)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.normal, pb.normal)
            assert np.array_equal(pa.inlier_indices, pb.inlier_indices)

    def test_inliers_satisfy_plane_criteria(self):
        spec = SyntheticSpaceSpec(density=60, noise_sigma=0.01, seed=4)
        cloud = generate_space(spec, "s")
        for plane in ransac_planes(cloud, GP, seed=1):
            idx = plane.inlier_indices
            assert np.all(plane.distances(cloud.positions[idx]) <= GP.dist_eps)
            dots = np.abs(cloud.normals[idx] @ plane.normal)
            assert np.all(dots >= GP.cos_angle_max - 1e-12)

    def test_disjoint_inliers(self):
        cloud, _, _ = make_box_room(200)
        planes = ransac_planes(cloud, GP, seed=2)
        all_idx = np.concatenate([p.inlier_indices for p in planes])
        assert len(all_idx) == len(np.unique(all_idx))


class TestProjectToPlanes:
    def test_projection_moves_point_onto_plane(self):
        cloud = make_plane_cloud(100)
        planes = ransac_planes(cloud, GP, seed=0)
        off = PointCloud(
            np.array([[0.1, 0.2, 0.03]]), np.array([[0.0, 0.0, 1.0]])
        )
        merged = PointCloud(
            np.vstack([cloud.positions, off.positions]),
            np.vstack([cloud.normals, off.normals]),
        )
        planes[0].inlier_indices = np.arange(len(merged))
        out = project_to_planes(merged, planes)
        assert np.allclose(out.positions[-1], [0.1, 0.2, 0.0], atol=1e-9)
        assert np.allclose(out.normals[-1], [0, 0, 1], atol=1e-12)

    def test_normal_sign_follows_point(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        nrm = np.array([[0.0, 0, 1.0], [0.0, 0, -1.0]])
        cloud = PointCloud(pts, nrm)
        from spatialprivacy.mechanisms import Plane

        plane = Plane(np.array([0.0, 0, 1.0]), 0.0, np.arange(2), 0)
        out = project_to_planes(cloud, [plane])
        assert np.array_equal(out.normals[0], [0, 0, 1])
        assert np.array_equal(out.normals[1], [0, 0, -1])

    def test_perfect_plane_projection_is_identity(self):
        cloud = make_plane_cloud(300)
        planes = ransac_planes(cloud, GP, seed=0)
        out = project_to_planes(cloud, planes)
        matched = {tuple(np.round(p, 12)) for p in out.positions}
        original = {tuple(np.round(p, 12)) for p in cloud.positions}
        assert matched == original

    def test_unassigned_points_dropped(self):
        cloud, _, _ = make_box_room(200)
        planes = ransac_planes(cloud, GP, seed=0)[:2]
        out = project_to_planes(cloud, planes)
        assert len(out) == sum(len(p.inlier_indices) for p in planes)


def fresh_state(cloud, seed=0):
    state = ReleaseState.empty(cloud.label)
    subsume(state, cloud, GP, seed)
    return state


class TestSubsume:
    def test_nearby_points_subsumed_without_new_planes(self):
        state = fresh_state(make_plane_cloud(200))
        assert len(state.planes) == 1
        newcomers = make_plane_cloud(100, seed=5, z=0.01)
        subsume(state, newcomers, GP, seed=1)
        assert len(state.planes) == 1
        assert len(state.planes[0].inlier_indices) == 300
        assert len(state.residual_indices) == 0

    def test_fresh_wall_becomes_one_new_plane(self):
        state = fresh_state(make_plane_cloud(200))
        rng = np.random.default_rng(3)
        wall = PointCloud(
            np.column_stack(
                [np.zeros(100), rng.uniform(-2, 2, 100), rng.uniform(0, 2, 100)]
            ),
            np.tile([1.0, 0, 0], (100, 1)),
        )
        subsume(state, wall, GP, seed=1)
        assert len(state.planes) == 2

    def test_unsubsumable_scraps_stay_residual(self):
        state = fresh_state(make_plane_cloud(200))
        scraps = PointCloud(
            np.array([[0.0, 0.0, 1.0], [0.1, 0.0, 1.2], [0.0, 0.2, 1.4]]),
            np.tile([1.0, 0, 0], (3, 1)),
        )
        before = len(state.planes)
        subsume(state, scraps, GP, seed=1)
        assert len(state.planes) == before
        assert len(state.residual_indices) == 3

    def test_assigned_points_recheck_against_their_plane(self):
        spec = SyntheticSpaceSpec(density=50, noise_sigma=0.01, seed=8)
        cloud = generate_space(spec, "s")
        half = len(cloud) // 2
        state = fresh_state(cloud.subset(np.arange(half)))
        subsume(state, cloud.subset(np.arange(half, len(cloud))), GP, seed=2)
        for plane in state.planes:
            idx = plane.inlier_indices
            assert np.all(
                plane.accepts(state.positions[idx], state.normals[idx], GP)
            )
            assert np.all(state.assignment[idx] == plane.seq)

    def test_plane_count_monotone(self):
        spec = SyntheticSpaceSpec(density=50, seed=9)
        cloud = generate_space(spec, "s")
        state = ReleaseState.empty()
        counts = []
        chunks = np.array_split(np.arange(len(cloud)), 5)
        for chunk in chunks:
            subsume(state, cloud.subset(chunk), GP, seed=4)
            counts.append(len(state.planes))
        assert counts == sorted(counts)


class TestConservativeRelease:
    def make_two_plane_state(self):
        big = make_plane_cloud(300)
        rng = np.random.default_rng(1)
        wall = PointCloud(
            np.column_stack(
                [np.zeros(100), rng.uniform(-2, 2, 100), rng.uniform(0.5, 2.5, 100)]
            ),
            np.tile([1.0, 0, 0], (100, 1)),
        )
        state = ReleaseState.empty()
        subsume(state, big, GP, seed=0)
        subsume(state, wall, GP, seed=0)
        assert [len(p.inlier_indices) for p in state.planes] == [300, 100]
        return state

    def test_cap_above_plane_count_is_identity(self):
        state = self.make_two_plane_state()
        capped = conservative_release(state, 10)
        full = project_to_planes(state.accumulated, state.planes)
        assert np.array_equal(
            np.sort(capped.positions, axis=0), np.sort(full.positions, axis=0)
        )

    def test_cap_one_releases_largest_plane(self):
        state = self.make_two_plane_state()
        out = conservative_release(state, 1)
        assert len(out) == 300
        assert np.allclose(out.positions[:, 2], 0.0, atol=1e-9)

    def test_equal_inliers_tie_by_creation(self):
        a = make_plane_cloud(100, seed=1)
        rng = np.random.default_rng(2)
        b = PointCloud(
            np.column_stack(
                [np.zeros(100), rng.uniform(-2, 2, 100), rng.uniform(0.5, 2.5, 100)]
            ),
            np.tile([1.0, 0, 0], (100, 1)),
        )
        state = ReleaseState.empty()
        subsume(state, a, GP, seed=0)
        subsume(state, b, GP, seed=0)
        out = conservative_release(state, 1)
        assert np.allclose(out.positions[:, 2], 0.0, atol=1e-9)  # earlier plane

    def test_nesting(self):
        state = self.make_two_plane_state()
        small = conservative_release(state, 1)
        large = conservative_release(state, 2)
        small_set = {tuple(p) for p in np.round(small.positions, 12)}
        large_set = {tuple(p) for p in np.round(large.positions, 12)}
        assert small_set <= large_set

    def test_unbounded_equals_project_all(self):
        state = self.make_two_plane_state()
        unbounded = conservative_release(state, None)
        full = project_to_planes(state.accumulated, state.planes)
        assert np.array_equal(unbounded.positions, full.positions)

    def test_state_untouched(self):
        state = self.make_two_plane_state()
        conservative_release(state, 1)
        assert len(state.planes) == 2


@pytest.fixture(scope="module")
def space():
    return generate_space(SyntheticSpaceSpec(density=60, seed=12), "seq")


class TestReleaseSequence:

    def test_single_release_matches_one_time_generalization(self, space):
        steps, state = release_sequence(space, ReleasePolicy(1.0, 1), seed=5)
        assert len(steps) == 1
        step = steps[0]
        expected = conservative_release(state, None)
        assert np.array_equal(step.released.positions, expected.positions)
        ball = np.linalg.norm(space.positions - step.center, axis=1) <= 1.0
        assert np.array_equal(step.accumulated_indices, np.flatnonzero(ball))

    def test_accumulation_monotone_and_union_exact(self, space):
        steps, _ = release_sequence(space, ReleasePolicy(0.5, 12), seed=7)
        sizes = [len(s.accumulated_indices) for s in steps]
        assert sizes == sorted(sizes)
        union = np.zeros(len(space), dtype=bool)
        for step in steps:
            ball = np.linalg.norm(space.positions - step.center, axis=1) <= 0.5
            union |= ball
        assert np.array_equal(np.flatnonzero(union), steps[-1].accumulated_indices)

    def test_walk_steps_bounded(self, space):
        steps, _ = release_sequence(space, ReleasePolicy(0.5, 12), seed=8)
        centers = np.array([s.center for s in steps])
        hops = np.linalg.norm(np.diff(centers, axis=0), axis=1)
        assert np.all(hops <= 0.5 + 1e-12)

    def test_same_transform_for_whole_sequence(self, space):
        steps, _ = release_sequence(space, ReleasePolicy(0.5, 5), seed=9)
        first = steps[0].transform
        for step in steps[1:]:
            assert np.array_equal(step.transform.rotation, first.rotation)
            assert np.array_equal(step.transform.translation, first.translation)

    def test_deterministic(self, space):
        a, state_a = release_sequence(space, ReleasePolicy(0.5, 8, 3), seed=10)
        b, state_b = release_sequence(space, ReleasePolicy(0.5, 8, 3), seed=10)
        assert np.array_equal(state_a.positions, state_b.positions)
        assert np.array_equal(state_a.assignment, state_b.assignment)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.query.positions, sb.query.positions)

    def test_snapshot_reprojection_matches_capped_run(self, space):
        unbounded, state = release_sequence(
            space, ReleasePolicy(0.6, 10, None), seed=11
        )
        for cap in (1, 2, 5):
            capped, _ = release_sequence(space, ReleasePolicy(0.6, 10, cap), seed=11)
            for su, sc in zip(unbounded, capped):
                derived = project_snapshot(state, su, cap)
                assert np.array_equal(derived.positions, sc.released.positions)
                assert np.array_equal(derived.normals, sc.released.normals)

    def test_raw_mode_releases_accumulated_points(self, space):
        steps, _ = release_sequence(
            space, ReleasePolicy(0.5, 4), seed=13, generalize=False
        )
        last = steps[-1]
        assert len(last.released) == len(last.accumulated_indices)
        assert last.n_planes == 0

    def test_empty_space_rejected(self):
        with pytest.raises(ValueError):
            release_sequence(
                PointCloud(np.zeros((0, 3)), np.zeros((0, 3))), ReleasePolicy(1.0, 1)
            )
