import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fastdipole.pointcloud import (
    EmptyCloudError,
    OrientedPointCloud,
    PLYParseError,
    estimate_area_weights,
    knn,
    load_ply,
    mean_spacing,
    pca_normals,
    save_ply,
)
from fastdipole.synthetic import fibonacci_sphere, sphere_cloud


def write_ascii_ply(path, rows, props):
    head = ["ply", "format ascii 1.0", f"element vertex {len(rows)}"]
    head += [f"property float {p}" for p in props] + ["end_header"]
    body = [" ".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(head + body) + "\n")


def test_ascii_ply_with_normals_initializes_unit_moments(tmp_path):
    p = tmp_path / "three.ply"
    write_ascii_ply(p, [(0, 0, 0, 0, 0, 1), (1, 0, 0, 0, 0, 1), (0, 1, 0, 0, 0, 2)],
                    ["x", "y", "z", "nx", "ny", "nz"])
    cloud = load_ply(p, k_appearance=4)
    assert len(cloud) == 3
    assert np.all(cloud.moments[:, 0] == 1.0)
    assert cloud.moments.shape == (3, 5)
    assert np.allclose(np.linalg.norm(cloud.normals, axis=1), 1.0)
    assert np.allclose(cloud.normals[2], [0, 0, 1])


def test_ply_without_normals_gets_unit_pca_normals(tmp_path):
    P, _ = fibonacci_sphere(500)
    p = tmp_path / "bare.ply"
    write_ascii_ply(p, P.tolist(), ["x", "y", "z"])
    cloud = load_ply(p)
    assert np.allclose(np.linalg.norm(cloud.normals, axis=1), 1.0, atol=1e-6)
    assert np.all(cloud.areas > 0)


def test_empty_ply_raises(tmp_path):
    p = tmp_path / "empty.ply"
    write_ascii_ply(p, [], ["x", "y", "z"])
    with pytest.raises(EmptyCloudError):
        load_ply(p)


def test_malformed_ply_reports_context(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                 "property float z\nend_header\n0 0 0\n1 oops 0\n")
    with pytest.raises(PLYParseError) as exc:
        load_ply(p)
    assert "line" in str(exc.value)


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load_ply("/nonexistent/cloud.ply")


@pytest.mark.parametrize("ascii_fmt", [False, True])
def test_save_load_roundtrip_bit_exact_positions(tmp_path, ascii_fmt):
    cloud = sphere_cloud(10_000)
    cloud.moments = np.column_stack([np.ones(10_000), np.random.default_rng(0).normal(size=(10_000, 2))])
    p = tmp_path / "s.ply"
    save_ply(cloud, p, ascii=ascii_fmt)
    back = load_ply(p)
    assert np.array_equal(back.positions, cloud.positions)
    # normals are renormalized on load, so only ulp-level agreement
    assert np.allclose(back.normals, cloud.normals, rtol=0, atol=1e-15)
    assert back.moments.shape == cloud.moments.shape
    assert np.allclose(back.moments, cloud.moments, rtol=1e-6, atol=1e-7)


def test_knn_existing_point():
    cloud = OrientedPointCloud.from_arrays(np.random.default_rng(0).normal(size=(50, 3)),
                                           np.tile([0, 0, 1.0], (50, 1)))
    assert knn(cloud, cloud.positions[17], 1).tolist() == [17]


def test_knn_tie_break_by_index():
    cloud = OrientedPointCloud.from_arrays([[0, 0, 0], [1, 0, 0], [2, 0, 0]], np.tile([0, 0, 1.0], (3, 1)))
    assert knn(cloud, np.array([1.0, 0, 0]), 3).tolist() == [1, 0, 2]
    # query at the midpoint of the outer points: two equidistant candidates
    cloud2 = OrientedPointCloud.from_arrays([[0, 0, 0], [2, 0, 0], [5, 0, 0]], np.tile([0, 0, 1.0], (3, 1)))
    assert knn(cloud2, np.array([1.0, 0, 0]), 2).tolist() == [0, 1]


def test_knn_zero_k_and_too_many():
    cloud = OrientedPointCloud.from_arrays(np.zeros((2, 3)) + [[0, 0, 0], [1, 0, 0]], np.tile([0, 0, 1.0], (2, 1)))
    assert len(knn(cloud, np.zeros(3), 0)) == 0
    with pytest.raises(ValueError):
        knn(cloud, np.zeros(3), 3)


@given(st.integers(0, 10_000), st.integers(1, 16))
def test_knn_matches_exhaustive(seed, k):
    rng = np.random.default_rng(seed)
    P = rng.uniform(-1, 1, size=(200, 3))
    cloud = OrientedPointCloud.from_arrays(P, np.tile([0, 0, 1.0], (200, 1)))
    q = rng.uniform(-1, 1, size=3)
    d = np.linalg.norm(P - q, axis=1)
    ref = np.lexsort((np.arange(200), d))[:k]
    assert knn(cloud, q, k).tolist() == ref.tolist()


def test_pca_plane():
    rng = np.random.default_rng(0)
    P = np.column_stack([rng.uniform(-1, 1, 400), rng.uniform(-1, 1, 400), np.zeros(400)])
    cloud = pca_normals(OrientedPointCloud.from_arrays(P, np.zeros((400, 3)) + [1, 0, 0]), 16)
    assert np.allclose(np.abs(cloud.normals[:, 2]), 1.0, atol=1e-6)


def test_pca_sphere_angular_error():
    P, N = fibonacci_sphere(3000)
    cloud = pca_normals(OrientedPointCloud.from_arrays(P, np.zeros((3000, 3)) + [1, 0, 0]), 16)
    cosang = np.abs(np.einsum("ij,ij->i", cloud.normals, N))
    ang = np.degrees(np.arccos(np.clip(cosang, -1, 1)))
    assert np.quantile(ang, 0.99) < 5.0
    # consistent outward orientation on a closed convex surface
    assert np.mean(np.einsum("ij,ij->i", cloud.normals, N) > 0) > 0.99


def test_pca_collinear_falls_back():
    P = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]])
    cloud = pca_normals(OrientedPointCloud.from_arrays(P, np.zeros((3, 3)) + [1, 0, 0]), 3)
    assert np.all(np.isfinite(cloud.normals))
    assert np.allclose(np.linalg.norm(cloud.normals, axis=1), 1.0)
    assert cloud.normal_fallback is not None and cloud.normal_fallback.all()


def test_area_weights_square_lattice():
    h = 0.1
    g = np.arange(-10, 11) * h
    X, Y = np.meshgrid(g, g)
    P = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    cloud = estimate_area_weights(OrientedPointCloud.from_arrays(P, np.tile([0, 0, 1.0], (len(P), 1))), 16)
    center = np.argmin(np.linalg.norm(P, axis=1))
    assert abs(cloud.areas[center] - h * h) / (h * h) < 0.05


def test_area_weights_sphere_total_converges():
    errs = []
    for m in (1000, 4000, 16000):
        P, N = fibonacci_sphere(m)
        cloud = estimate_area_weights(OrientedPointCloud.from_arrays(P, N), 16)
        errs.append(abs(cloud.areas.sum() - 4 * math.pi) / (4 * math.pi))
    assert errs[0] < 0.15
    assert errs[0] >= errs[1] >= errs[2]


def test_area_weights_single_point():
    cloud = estimate_area_weights(OrientedPointCloud.from_arrays([[0, 0, 0.0]], [[0, 0, 1.0]]), 16)
    assert np.isfinite(cloud.areas[0]) and cloud.areas[0] > 0


def test_area_weights_isolated_point_gets_median():
    rng = np.random.default_rng(0)
    P = np.column_stack([rng.uniform(0, 1, 300), rng.uniform(0, 1, 300), np.zeros(300)])
    P = np.vstack([P, [[100.0, 100.0, 0.0]]])
    cloud = estimate_area_weights(OrientedPointCloud.from_arrays(P, np.tile([0, 0, 1.0], (301, 1))), 8)
    assert cloud.areas[-1] == pytest.approx(np.median(cloud.areas[:-1]), rel=0.2)


@given(st.integers(0, 1000))
def test_normals_unit_after_construction(seed):
    rng = np.random.default_rng(seed)
    c = OrientedPointCloud.from_arrays(rng.normal(size=(20, 3)), rng.normal(size=(20, 3)) * 10)
    assert np.allclose(np.linalg.norm(c.normals, axis=1), 1.0)


def test_mean_spacing_lattice():
    g = np.arange(10) * 0.5
    P = np.column_stack([g, np.zeros(10), np.zeros(10)])
    c = OrientedPointCloud.from_arrays(P, np.tile([0, 0, 1.0], (10, 1)))
    assert mean_spacing(c) == pytest.approx(0.5)


def test_point_view_and_copy_independent():
    c = sphere_cloud(10)
    p = c[3]
    assert p.geometry_moment == 1.0 and p.appearance_moments.shape == (0,)
    d = c.copy()
    d.moments[:] = 5
    assert np.all(c.moments == 1.0)
