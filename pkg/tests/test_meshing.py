import math

import numpy as np
import pytest

from fastdipole.fields import SceneModel, geometry_field
from fastdipole.kernels import KernelParams
from fastdipole.meshing import (
    Grid,
    TriangleMesh,
    cleanup,
    dump_grid,
    export_obj,
    extract_mesh,
    grid_from_function,
    load_grid,
    marching_cubes,
    read_obj,
    sample_grid,
)
from fastdipole.pointcloud import OrientedPointCloud, mean_spacing
from fastdipole.synthetic import sphere_cloud

BOX = (np.full(3, -1.0), np.full(3, 1.0))


def sphere_fn(R=0.6):
    return lambda p: np.linalg.norm(p, axis=1) - R


@pytest.fixture(scope="module")
def model():
    c = sphere_cloud(3000, radius=0.7)
    return SceneModel.create(c, 1.5 * mean_spacing(c))


def test_tiny_grid_matches_pointwise(model):
    g = sample_grid(model, 2, BOX)
    assert g.shape == (2, 2, 2)
    assert np.allclose(g.values.ravel(), geometry_field(model, g.points()), atol=0, rtol=0)


def test_zero_moments_constant_grid():
    c = sphere_cloud(300)
    c.moments[:, 0] = 0.0
    g = sample_grid(SceneModel.create(c, 0.1), 8, BOX)
    assert np.all(g.values == 0.5)
    assert marching_cubes(g).is_empty


def test_sphere_cloud_sign_changes_near_radius(model):
    g = sample_grid(model, 64, BOX)
    h = g.spacing[0]
    v = g.values
    r = np.linalg.norm(g.points(), axis=1).reshape(v.shape)
    change = np.zeros(v.shape, dtype=bool)
    for ax in range(3):
        a = np.swapaxes(v, 0, ax)
        s = np.signbit(a[1:]) != np.signbit(a[:-1])
        m = np.zeros(a.shape, dtype=bool)
        m[1:] |= s
        m[:-1] |= s
        change |= np.swapaxes(m, 0, ax)
    assert np.all(np.abs(r[change] - 0.7) <= math.sqrt(3) * h + 0.5 * h)


def test_constant_sign_grid_empty():
    g = grid_from_function(lambda p: np.ones(len(p)), 10, BOX)
    assert marching_cubes(g).is_empty


def test_analytic_sphere_mesh():
    g = grid_from_function(sphere_fn(0.6), 64, BOX)
    mesh = marching_cubes(g)
    diag = np.linalg.norm(g.spacing)
    assert np.all(np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.6) <= 1.5 * diag)
    assert mesh.euler_characteristic() == 2
    # outward winding: positive signed volume
    v = mesh.vertices[mesh.triangles]
    vol = np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6
    assert vol == pytest.approx(4 / 3 * math.pi * 0.6**3, rel=0.02)
    # vertex normals point outward
    assert np.all(np.einsum("ij,ij->i", mesh.normals, mesh.vertices) > 0)
    assert np.all(mesh.triangle_areas() > 1e-12)


def test_slab_two_sheets():
    g = grid_from_function(lambda p: np.abs(p[:, 2] - 0.1) - 0.3, 33, BOX)
    mesh = marching_cubes(g)
    z = mesh.vertices[:, 2]
    h = g.spacing[2]
    lower, upper = z < 0.1, z >= 0.1
    assert np.all(np.abs(z[lower] + 0.2) <= h) and np.all(np.abs(z[upper] - 0.4) <= h)
    assert lower.any() and upper.any()


def test_vertices_interpolate_field(model):
    g = sample_grid(model, 32, BOX)
    mesh = marching_cubes(g)
    f = geometry_field(model, mesh.vertices)
    span = np.max(np.abs(np.diff(g.values, axis=0)))
    assert np.all(np.abs(f) <= span)


def test_nonfinite_grid_rejected():
    g = grid_from_function(sphere_fn(), 4, BOX)
    g.values[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        marching_cubes(g)


def test_cleanup_drops_degenerate():
    m = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0.0]], [[0, 1, 2], [0, 1, 3]])
    c = cleanup(m)
    assert len(c.triangles) == 1 and len(c.vertices) == 3


def test_invalid_indices():
    with pytest.raises(ValueError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])


def test_obj_empty_and_tetrahedron(tmp_path):
    export_obj(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3))), tmp_path / "e.obj")
    assert read_obj(tmp_path / "e.obj").is_empty
    tet = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]], [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    export_obj(tet, tmp_path / "t.obj")
    lines = (tmp_path / "t.obj").read_text().splitlines()
    assert sum(l.startswith("v ") for l in lines) == 4
    assert sum(l.startswith("f ") for l in lines) == 4


def test_obj_roundtrip_text_exact(tmp_path):
    mesh = marching_cubes(grid_from_function(sphere_fn(), 24, BOX))
    export_obj(mesh, tmp_path / "a.obj")
    back = read_obj(tmp_path / "a.obj")
    assert np.array_equal(back.triangles, mesh.triangles)
    assert np.allclose(back.vertices, mesh.vertices, rtol=1e-8, atol=0)
    export_obj(back, tmp_path / "b.obj")
    assert (tmp_path / "a.obj").read_text() == (tmp_path / "b.obj").read_text()


def test_obj_write_error_has_path(tmp_path):
    mesh = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(OSError, match="nope"):
        export_obj(mesh, tmp_path / "nope" / "m.obj")


def test_grid_dump_roundtrip(tmp_path):
    g = grid_from_function(sphere_fn(), (5, 6, 7), BOX)
    dump_grid(g, tmp_path / "g.bin")
    h = load_grid(tmp_path / "g.bin")
    assert h.shape == (5, 6, 7)
    assert np.allclose(h.values, g.values.astype(np.float32))
    assert np.array_equal(h.lo, g.lo) and np.array_equal(h.hi, g.hi)


def test_resolution_must_be_two():
    with pytest.raises(ValueError):
        grid_from_function(sphere_fn(), 1, BOX)


def test_regularized_beats_desingularized_on_noisy_sphere():
    rng = np.random.default_rng(0)
    P = rng.normal(size=(2500, 3))
    N = P / np.linalg.norm(P, axis=1, keepdims=True)
    P = N * 0.7 + rng.normal(scale=0.02, size=(2500, 3))
    c = OrientedPointCloud.from_arrays(P, N, areas=np.full(2500, 4 * math.pi * 0.49 / 2500))
    eps = 1.5 * mean_spacing(c)
    reg = SceneModel.create(c, eps, beta_bh=float("inf"))
    rms = {}
    for name, params in (("reg", KernelParams(eps)), ("desing", KernelParams(eps, kind="desingularized", cutoff=eps))):
        g = Grid(np.zeros((48, 48, 48)), *BOX)
        pts = g.points()
        g.values = (0.5 - reg.tree.geometry(pts, params)).reshape(g.shape)
        m = marching_cubes(g)
        rms[name] = math.sqrt(np.mean((np.linalg.norm(m.vertices, axis=1) - 0.7) ** 2))
    assert rms["reg"] < 0.05
    assert rms["desing"] > rms["reg"]


def test_extract_mesh_default_bbox(model):
    mesh = extract_mesh(model, 32)
    assert mesh.euler_characteristic() == 2
