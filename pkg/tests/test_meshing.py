import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from densemap.geometry import PinholeCamera, RigidTransform, depth_to_pointcloud, look_at
from densemap.integrator import Integrator, IntegratorConfig
from densemap.meshing import (
    TriMesh,
    closest_point_on_triangles,
    extract_mesh,
    mesh_distance,
    read_ply,
    surface_error,
    write_ply,
)
from densemap.tsdf import Submap
from densemap.world import AnalyticScene, Plane, Sphere, render_frame
from conftest import facing_down, random_transform


def integrate_views(scene, poses, vs, camera=None, frame=None):
    camera = camera or PinholeCamera.from_fov(120, 90, 70)
    sm = Submap(voxel_size=vs, frame=frame)
    integ = Integrator(IntegratorConfig(mode="simple"))
    for T_GC in poses:
        pts, cols = depth_to_pointcloud(render_frame(scene, camera, T_GC))
        integ.integrate(sm, pts, cols, sm.frame.inverse() @ T_GC)
    return sm


def uv_sphere(radius, n_lat, n_lon):
    """Closed UV-sphere tessellation with all vertices on the sphere."""
    lat = np.linspace(0, np.pi, n_lat + 1)[1:-1]
    lon = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    la, lo = np.meshgrid(lat, lon, indexing="ij")
    ring = np.column_stack([np.sin(la.ravel()) * np.cos(lo.ravel()),
                            np.sin(la.ravel()) * np.sin(lo.ravel()), np.cos(la.ravel())])
    verts = radius * np.vstack([[0, 0, 1], ring, [0, 0, -1]])
    tris = []
    idx = lambda i, j: 1 + i * n_lon + (j % n_lon)
    for j in range(n_lon):
        tris.append((0, idx(0, j), idx(0, j + 1)))
        tris.append((len(verts) - 1, idx(n_lat - 2, j + 1), idx(n_lat - 2, j)))
    for i in range(n_lat - 2):
        for j in range(n_lon):
            tris.append((idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)))
            tris.append((idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)))
    return TriMesh(verts, np.array(tris))


def brute_point_triangle(p, a, b, c):
    """Distance by projecting onto the plane, falling back to the three edges."""
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n)
    q = p - np.dot(p - a, n) * n
    inside = all(np.dot(np.cross(v1 - v0, q - v0), n) >= 0 for v0, v1 in ((a, b), (b, c), (c, a)))
    if inside:
        return abs(np.dot(p - a, n))

    def seg(u, v):
        t = np.clip(np.dot(p - u, v - u) / np.dot(v - u, v - u), 0, 1)
        return np.linalg.norm(p - (u + t * (v - u)))

    return min(seg(a, b), seg(b, c), seg(c, a))


def test_empty_map_gives_empty_mesh():
    m = extract_mesh(Submap())
    assert m.is_empty and len(m.triangles) == 0


def test_plane_vertices_within_half_voxel(wall_scene):
    vs = 0.02
    sm = integrate_views(wall_scene, [facing_down(1.0), look_at((0.3, 0.2, 0.9), (0, 0, 0), up=(0, 1, 0))], vs)
    m = extract_mesh(sm)
    assert len(m) > 500
    assert np.abs(m.vertices[:, 2]).max() <= vs / 2


def test_sphere_radius_error():
    vs = 0.04
    scene = AnalyticScene([Sphere((0, 0, 0), 1.0)])
    poses = []
    for k in range(8):
        a = 2 * np.pi * k / 8
        poses.append(look_at((2.6 * np.cos(a), 2.6 * np.sin(a), 0.6 * (-1) ** k), (0, 0, 0), up=(0, 0, 1)))
    poses += [look_at((0, 0.01, 2.6), (0, 0, 0), up=(0, 1, 0)), look_at((0, 0.01, -2.6), (0, 0, 0), up=(0, 1, 0))]
    m = extract_mesh(integrate_views(scene, poses, vs))
    r = np.linalg.norm(m.vertices, axis=1)
    assert np.mean(np.abs(r - 1.0)) <= vs / 2


def test_repose_then_mesh_equals_mesh_then_transform(sphere_scene, rng):
    vs = 0.04
    sm = integrate_views(sphere_scene, [facing_down(1.5)], vs)
    base = extract_mesh(sm)
    T = random_transform(rng, 2.0)
    sm.frame = T @ sm.frame
    moved = extract_mesh(sm)
    assert np.abs(moved.vertices - base.transformed(T).vertices).max() <= 1e-6
    assert np.array_equal(moved.triangles, base.triangles)


def test_local_frame_option(rng):
    sm = Submap(frame=random_transform(rng), voxel_size=0.1, block_size=4)
    sm.allocate_block((0, 0, 0))
    d, w, _ = sm.pools
    idx = np.arange(64)
    x = idx % 4
    d[0] = (x - 1.5) * 0.1
    w[0] = 1.0
    local = extract_mesh(sm, global_frame=False)
    assert np.allclose(local.vertices[:, 0], 0.2)
    assert np.allclose(extract_mesh(sm).vertices, sm.frame.apply(local.vertices))


def test_unobserved_corners_are_skipped():
    sm = Submap(voxel_size=0.1, block_size=4)
    sm.allocate_block((0, 0, 0))
    d, w, _ = sm.pools
    d[0] = (np.arange(64) % 4 - 1.5) * 0.1
    assert extract_mesh(sm).is_empty


# evaluation

def test_exact_surface_has_zero_error(wall_scene, rng):
    pts = np.column_stack([rng.uniform(-1, 1, (50, 2)), np.zeros(50)])
    err = surface_error(TriMesh(pts), wall_scene)
    assert err.rmse == 0 and err.median == 0


def test_single_vertex_above_plane(wall_scene):
    err = surface_error(TriMesh([[0, 0, 0.2]]), wall_scene)
    assert err.rmse == pytest.approx(0.2) and err.median == pytest.approx(0.2)


def test_empty_mesh_cannot_be_scored(wall_scene):
    with pytest.raises(ValueError):
        surface_error(TriMesh(), wall_scene)


def test_error_is_rigidly_invariant(rng):
    scene = AnalyticScene([Sphere((0.1, 0.2, 0.3), 0.7), Plane((0, 0, -1), (0, 0, 1))])
    pts = rng.uniform(-1, 1, (200, 3))
    T = random_transform(rng, 3.0)
    moved = AnalyticScene([Sphere(T.apply(np.array([[0.1, 0.2, 0.3]]))[0], 0.7),
                           Plane(T.apply(np.array([[0, 0, -1.0]]))[0], T.rotation_matrix @ [0, 0, 1])])
    a = surface_error(TriMesh(pts), scene)
    b = surface_error(TriMesh(T.apply(pts)), moved)
    assert np.allclose(a.distances, b.distances, atol=1e-12)


def test_tessellated_sphere_reference():
    ref = uv_sphere(1.0, 72, 144)
    assert len(ref) >= 10000
    rng = np.random.default_rng(0)
    d = rng.normal(size=(2000, 3))
    pts = d / np.linalg.norm(d, axis=1, keepdims=True)
    assert surface_error(TriMesh(pts), ref).rmse < 1e-3


def test_reference_mesh_of_itself_is_zero():
    ref = uv_sphere(0.5, 10, 16)
    assert surface_error(ref, ref).rmse < 1e-12


@given(st.integers(0, 2**32 - 1))
def test_closest_point_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    verts = rng.normal(size=(12, 3))
    tris = rng.choice(12, size=(10, 3), replace=True)
    tris = tris[(tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])]
    if len(tris) == 0:
        return
    mesh = TriMesh(verts, tris)
    pts = rng.normal(scale=2, size=(15, 3))
    got = mesh_distance(pts, mesh)
    want = [min(brute_point_triangle(p, *verts[t]) for t in tris) for p in pts]
    assert np.allclose(got, want, atol=1e-9)


def test_closest_point_regions():
    a, b, c = np.array([0.0, 0, 0]), np.array([1.0, 0, 0]), np.array([0.0, 1, 0])
    p = np.array([[-1, -1, 0], [2, -0.5, 0], [0.25, 0.25, 3], [1, 1, 0], [0.5, -1, 0]], dtype=float)
    want = np.array([[0, 0, 0], [1, 0, 0], [0.25, 0.25, 0], [0.5, 0.5, 0], [0.5, 0, 0]])
    n = len(p)
    got = closest_point_on_triangles(p, np.tile(a, (n, 1)), np.tile(b, (n, 1)), np.tile(c, (n, 1)))
    assert np.allclose(got, want)


# PLY

@pytest.mark.parametrize("binary", [True, False])
def test_ply_roundtrip(tmp_path, binary, rng):
    m = TriMesh(rng.normal(size=(20, 3)), rng.integers(0, 20, (15, 3)), rng.integers(0, 256, (20, 3)))
    write_ply(tmp_path / "m.ply", m, binary=binary)
    back = read_ply(tmp_path / "m.ply")
    assert np.allclose(back.vertices, m.vertices.astype(np.float32), atol=1e-6)
    assert np.array_equal(back.triangles, m.triangles)
    assert np.array_equal(back.colors, m.colors)


def test_ply_header(tmp_path):
    write_ply(tmp_path / "m.ply", TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]]), binary=False)
    text = (tmp_path / "m.ply").read_text()
    assert "property uchar red" in text and "property list uchar int vertex_indices" in text
    assert text.rstrip().endswith("3 0 1 2")


def test_empty_ply_roundtrip(tmp_path):
    for binary in (True, False):
        write_ply(tmp_path / "e.ply", TriMesh(), binary=binary)
        assert read_ply(tmp_path / "e.ply").is_empty


def test_not_a_ply(tmp_path):
    (tmp_path / "x.ply").write_text("solid foo\n")
    with pytest.raises(ValueError):
        read_ply(tmp_path / "x.ply")


def test_trimesh_validation():
    with pytest.raises(ValueError):
        TriMesh([[0, 0, 0]], [[0, 1, 2]])
    with pytest.raises(ValueError):
        TriMesh([[np.nan, 0, 0]])


def test_degenerate_triangles_are_handled():
    verts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 0, 0.0]])
    mesh = TriMesh(verts, [[0, 1, 2], [0, 0, 3]])
    d = mesh_distance(np.array([[1.0, 1.0, 0], [3.0, 0, 0], [0, 0, -2.0]]), mesh)
    assert np.allclose(d, [1.0, 1.0, 2.0])
