import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fastdipole import oracles
from fastdipole.bhtree import (
    DipoleTree,
    TreeNode,
    TreeMismatchError,
    adjoint_query,
    build_tree,
    flush_gradients,
    primal_gradient_query,
    primal_query,
    read_tree_dump,
    update_moments,
)
from fastdipole.kernels import KernelParams, grad_regularized_poisson, regularized_poisson
from fastdipole.pointcloud import OrientedPointCloud
from fastdipole.synthetic import sphere_cloud
from fastdipole.verify import random_cloud

INF = float("inf")
EPS = KernelParams(0.05)


def one_point(area=0.3):
    return OrientedPointCloud.from_arrays([[0.1, 0.2, 0.3]], [[0, 0, 1.0]], areas=[area])


def test_single_point_tree():
    c = one_point()
    t = build_tree(c)
    assert t.root.is_leaf
    assert np.array_equal(t.root.centroid, c.positions[0])
    assert t.root.area == 0.3 and t.root.radius == 0.0


def test_two_points_midpoint():
    c = OrientedPointCloud.from_arrays([[0, 0, 0.0], [1, 2, 3.0]], np.tile([0, 0, 1.0], (2, 1)))
    assert np.allclose(build_tree(c).root.centroid, [0.5, 1, 1.5])


def test_coincident_points_terminate():
    c = OrientedPointCloud.from_arrays(np.ones((50, 3)), np.tile([0, 0, 1.0], (50, 1)))
    t = build_tree(c, max_leaf_size=4, max_depth=20)
    leaves = [i for i in range(t.n_nodes) if t.is_leaf[i]]
    assert sum(len(t.starts[i:i + 1]) for i in leaves) >= 1
    assert np.all(t.depths <= 20)
    assert sorted(t.order.tolist()) == list(range(50))


def test_node_aggregates_match_direct_sums(rng):
    c = random_cloud(10_000, rng, k_appearance=2)
    t = build_tree(c)
    assert sorted(t.point_order.tolist()) == list(range(10_000))
    for i in range(t.n_nodes):
        node = TreeNode(t, i)
        idx = node.point_indices
        a = c.areas[idx]
        assert node.area == pytest.approx(a.sum(), rel=1e-12)
        cen = (a[:, None] * c.positions[idx]).sum(0) / a.sum()
        assert np.allclose(node.centroid, cen, atol=1e-12)
        assert node.radius == pytest.approx(np.linalg.norm(c.positions[idx] - cen, axis=1).max(), abs=1e-12)
        mv = node.moment_vectors
        dip = (a[:, None] * c.normals[idx] * c.moments[idx, 0:1]).sum(0) / a.sum()
        assert np.allclose(mv[0], dip, atol=1e-12)
        rad = (a[:, None] * c.moments[idx, 1:]).sum(0) / a.sum()
        assert np.allclose(mv[1:, 0], rad, atol=1e-12)
        if i > 200:
            break


def test_leaf_partition(rng):
    c = random_cloud(3000, rng)
    t = build_tree(c, max_leaf_size=8)
    seen = []
    for i in range(t.n_nodes):
        if t.is_leaf[i]:
            seen.extend(TreeNode(t, i).point_indices.tolist())
    assert sorted(seen) == list(range(3000))


def test_deterministic(rng):
    c = random_cloud(2000, rng)
    a, b = build_tree(c), build_tree(c)
    assert np.array_equal(a.order, b.order) and np.array_equal(a.node_center, b.node_center)


def test_update_moments_linearity(rng):
    c = random_cloud(2000, rng, k_appearance=1)
    t = build_tree(c)
    base = t.node_dip.copy()
    c.moments[:, 0] *= 2
    update_moments(t, c)
    assert np.allclose(t.node_dip, 2 * base, rtol=1e-14, atol=0)
    c.moments[:] = 0
    update_moments(t, c)
    assert not t.node_dip.any() and not t.node_rad.any()


def test_mismatch_raises(rng):
    t = build_tree(random_cloud(100, rng))
    with pytest.raises(TreeMismatchError):
        update_moments(t, random_cloud(99, rng))


def test_exact_degeneration_values_and_gradients(rng):
    c = random_cloud(3000, rng, k_appearance=2)
    t = build_tree(c, beta_bh=INF)
    X = rng.uniform(-1.2, 1.2, size=(40, 3))
    vals = primal_query(t, c, X, EPS)
    grads = primal_gradient_query(t, c, X, EPS)
    for q, x in enumerate(X):
        for ch in range(3):
            radial = ch > 0
            ref = oracles.naive_dipole_sum(c, x, EPS, ch, radial)
            scale = oracles.naive_abs_sum(c, x, EPS, ch, radial)
            assert abs(vals[q, ch] - ref) <= 1e-12 * scale
            gref = oracles.naive_gradient(c, x, EPS, ch, radial)
            assert np.linalg.norm(grads[q, ch] - gref) <= 1e-10 * max(np.linalg.norm(gref), scale)


def test_single_point_gradient_closed_form():
    c = one_point()
    t = build_tree(c)
    x = c.positions[0] + np.array([0, 0, -0.04])
    g = primal_gradient_query(t, c, x, EPS)[0]
    ref = 0.3 * grad_regularized_poisson(x, c.positions[0], c.normals[0], EPS)
    assert np.allclose(g, ref, rtol=1e-12)


def test_far_outside_closed_cloud_gradient_small():
    c = sphere_cloud(4000)
    t = build_tree(c)
    g = primal_gradient_query(t, c, np.array([5.0, 0, 0]), EPS)[0]
    assert np.linalg.norm(g) < 1e-3


def test_gradient_matches_finite_differences_of_primal(rng):
    c = random_cloud(2000, rng)
    c.moments[:] = 1.0
    t = build_tree(c)
    h = 1e-4 * np.linalg.norm(np.ptp(c.positions, axis=0))
    E = np.eye(3)
    checked = 0
    for x in rng.uniform(-1.2, 1.2, size=(100, 3)):
        pts = np.vstack([x, x + h * E, x - h * E, x + 0.5 * h * E, x - 0.5 * h * E])
        q = t.query(pts, EPS, n_grad=1)
        v = q["values"][:, 0]
        fd = (v[1:4] - v[4:7]) / (2 * h)
        fd_half = (v[7:10] - v[10:13]) / h
        g = q["grads"][0, 0]
        scale = np.linalg.norm(g) + 1e-12
        if np.linalg.norm(fd - fd_half) > 1e-5 * scale:
            continue  # a far-field switch inside the stencil makes the primal jump
        assert np.linalg.norm(fd - g) <= 1e-4 * scale
        checked += 1
    assert checked >= 60


def test_adjoint_zero_dout_no_change(rng):
    c = random_cloud(500, rng)
    t = build_tree(c)
    adjoint_query(t, rng.normal(size=(5, 3)), np.zeros((5, 1)), EPS)
    assert not t.node_acc_dip.any() and not t.pt_acc_dip.any()


def test_adjoint_single_point():
    c = one_point()
    t = build_tree(c)
    x = np.array([0.5, -0.3, 0.9])
    adjoint_query(t, x, [2.0], EPS)
    d_mu, d_n = flush_gradients(t, c)
    ref = 2.0 * regularized_poisson(x, c.positions[0], c.normals[0], EPS) * 0.3
    assert d_mu[0, 0] == pytest.approx(ref, rel=1e-13)
    # d/dn of a g(r) n.d mu is a g(r) d mu
    r = c.positions[0] - x
    assert np.allclose(d_n[0], ref / (c.normals[0] @ r) * r, rtol=1e-12)


def test_flush_without_calls_and_second_flush(rng):
    c = random_cloud(500, rng, k_appearance=1)
    t = build_tree(c)
    d_mu, d_n = flush_gradients(t, c)
    assert not d_mu.any() and not d_n.any()
    adjoint_query(t, rng.normal(size=(3, 3)), rng.normal(size=(3, 2)), EPS)
    d_mu, _ = flush_gradients(t, c)
    assert d_mu.any()
    d_mu2, d_n2 = flush_gradients(t, c)
    assert not d_mu2.any() and not d_n2.any()
    assert not t.node_acc_dip.any()


def test_flushed_gradients_match_naive_adjoint(rng):
    c = random_cloud(4000, rng, k_appearance=1)
    t = build_tree(c, beta_bh=INF)
    X = rng.uniform(-1.1, 1.1, size=(64, 3))
    d_out = rng.normal(size=(64, 2))
    adjoint_query(t, X, d_out, EPS)
    d_mu, d_n = flush_gradients(t, c)
    ref_mu, ref_n = oracles.naive_adjoint(c, X, d_out, EPS, radial_channels=(1,))
    assert np.max(np.abs(d_mu - ref_mu)) <= 1e-6 * np.max(np.abs(ref_mu))
    assert np.max(np.abs(d_n - ref_n)) <= 1e-6 * np.max(np.abs(ref_n))


def test_adjoint_is_exact_transpose_of_approximate_primal(rng):
    # primal is linear in the moments, so the directional derivative is exact
    c = random_cloud(3000, rng, k_appearance=1)
    t = build_tree(c, beta_bh=2.0)
    X = rng.uniform(-1.1, 1.1, size=(32, 3))
    d_out = rng.normal(size=(32, 2))
    adjoint_query(t, X, d_out, EPS)
    d_mu, _ = flush_gradients(t, c)
    delta = rng.normal(size=c.moments.shape)
    h = 1e-3
    cp, cm = c.copy(), c.copy()
    cp.moments = c.moments + h * delta
    cm.moments = c.moments - h * delta
    fp = np.sum(d_out * t.with_moments(cp).query(X, EPS)["values"])
    fm = np.sum(d_out * t.with_moments(cm).query(X, EPS)["values"])
    fd = (fp - fm) / (2 * h)
    assert fd == pytest.approx(np.sum(d_mu * delta), rel=1e-4)


def test_adjoint_order_independent(rng):
    c = random_cloud(2000, rng)
    X = rng.uniform(-1, 1, size=(50, 3))
    d = rng.normal(size=(50, 1))
    t = build_tree(c)
    adjoint_query(t, X, d, EPS)
    a, _ = flush_gradients(t)
    perm = rng.permutation(50)
    for i in perm:
        adjoint_query(t, X[i], d[i], EPS)
    b, _ = flush_gradients(t)
    assert np.max(np.abs(a - b)) <= 1e-10 * np.max(np.abs(a))


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_primal_linear_in_moments(seed, s1, s2):
    rng = np.random.default_rng(seed)
    c1 = random_cloud(300, rng)
    c2 = c1.copy()
    c2.moments = rng.normal(size=c1.moments.shape)
    c3 = c1.copy()
    c3.moments = s1 * c1.moments + s2 * c2.moments
    t = build_tree(c1)
    X = rng.uniform(-1, 1, size=(5, 3))
    v1, v2, v3 = (t.with_moments(c).query(X, EPS)["values"][:, 0] for c in (c1, c2, c3))
    scale = np.array([oracles.naive_abs_sum(c3, x, EPS) for x in X]) + 1e-12
    assert np.all(np.abs(v3 - (s1 * v1 + s2 * v2)) <= 1e-10 * (scale + abs(s1) + abs(s2)))


def test_dump_roundtrip(tmp_path, rng):
    c = random_cloud(500, rng, k_appearance=1)
    t = build_tree(c)
    p = tmp_path / "tree.bin"
    t.dump(p)
    d = read_tree_dump(p)
    assert d["version"] == 1 and d["beta_bh"] == t.beta_bh
    assert np.array_equal(d["node_center"], t.node_center)
    assert np.array_equal(d["order"], t.order)


def test_empty_cloud_rejected():
    from fastdipole.pointcloud import EmptyCloudError

    empty = OrientedPointCloud.from_arrays(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(EmptyCloudError):
        DipoleTree(empty)
