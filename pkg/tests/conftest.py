import numpy as np
import pytest

from spatialprivacy.geometry import PointCloud


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def random_cloud(rng):
    """300 points with unit normals, spread over a few meters."""
    pos = rng.uniform(-3, 3, (300, 3))
    nrm = rng.normal(size=(300, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(pos, nrm, "random")


def make_plane_cloud(n=500, extent=2.0, seed=0, z=0.0):
    """Points exactly on z = const with +z normals."""
    r = np.random.default_rng(seed)
    pos = np.column_stack(
        [r.uniform(-extent, extent, n), r.uniform(-extent, extent, n), np.full(n, z)]
    )
    nrm = np.tile([0.0, 0.0, 1.0], (n, 1))
    return PointCloud(pos, nrm)


def make_box_room(points_per_face=300, size=4.0, height=2.5, seed=0):
    """Six exact faces of a closed box with inward normals.

    Returns (cloud, face_normals, face_offsets) with plane n . x = offset.
    """
    r = np.random.default_rng(seed)
    s, h = size, height
    faces = [
        ((0, 0, 1), 0.0, lambda u, v: np.column_stack([u * s, v * s, np.zeros_like(u)])),
        ((0, 0, -1), -h, lambda u, v: np.column_stack([u * s, v * s, np.full_like(u, h)])),
        ((0, 1, 0), 0.0, lambda u, v: np.column_stack([u * s, np.zeros_like(u), v * h])),
        ((0, -1, 0), -s, lambda u, v: np.column_stack([u * s, np.full_like(u, s), v * h])),
        ((1, 0, 0), 0.0, lambda u, v: np.column_stack([np.zeros_like(u), u * s, v * h])),
        ((-1, 0, 0), -s, lambda u, v: np.column_stack([np.full_like(u, s), u * s, v * h])),
    ]
    pos, nrm = [], []
    for normal, _, build in faces:
        u, v = r.random(points_per_face), r.random(points_per_face)
        pos.append(build(u, v))
        nrm.append(np.tile(normal, (points_per_face, 1)))
    cloud = PointCloud(np.vstack(pos), np.vstack(nrm).astype(float))
    normals = np.asarray([f[0] for f in faces], dtype=float)
    offsets = np.asarray([f[1] for f in faces])
    return cloud, normals, offsets
