import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fastdipole import oracles
from fastdipole.fields import (
    DegenerateNormalError,
    SceneModel,
    attenuation,
    attenuation_backward,
    attenuation_terms,
    geometry_field,
    geometry_field_gradient,
    implicit_normal,
    normals_backward,
    normals_from_gradient,
    vacancy,
    winding_number,
)
from fastdipole.kernels import normal_cdf
from fastdipole.pointcloud import mean_spacing
from fastdipole.synthetic import sphere_cloud


@pytest.fixture(scope="module")
def dense_sphere():
    c = sphere_cloud(16_000)
    eps = 1.5 * mean_spacing(c)
    return SceneModel.create(c, eps, lambda_scale=20.0, beta_bh=float("inf"))


@pytest.fixture(scope="module")
def sphere_model():
    c = sphere_cloud(3000)
    return SceneModel.create(c, 1.5 * mean_spacing(c), lambda_scale=20.0)


def test_zero_area_winding_is_zero():
    c = sphere_cloud(200)
    c.areas[:] = 0.0
    m = SceneModel.create(c, 0.1)
    assert winding_number(m, np.array([0.1, 0.2, 0.0])) == 0.0


def test_gauss_lemma_dense_sphere(dense_sphere):
    m = dense_sphere
    c, k = m.cloud, m.kernel
    inside = winding_number(m, np.zeros(3))
    far = winding_number(m, np.array([3.0, 1.0, -2.0]))
    surf = winding_number(m, np.array([0.0, 0.6, 0.8]))
    assert 0.9 <= inside <= 1.1
    assert abs(far) < 0.05
    assert 0.4 <= surf <= 0.6
    # the naive oracle agrees with the exact traversal
    for x, v in ((np.zeros(3), inside), (np.array([0.0, 0.6, 0.8]), surf)):
        assert v == pytest.approx(oracles.naive_dipole_sum(c, x, k), abs=1e-12)


def test_unit_moment_field_is_half_minus_winding(sphere_model):
    X = np.random.default_rng(0).uniform(-1.5, 1.5, size=(20, 3))
    assert np.array_equal(geometry_field(sphere_model, X), 0.5 - winding_number(sphere_model, X))


def test_sphere_field_signs(sphere_model):
    assert geometry_field(sphere_model, np.zeros(3)) == pytest.approx(-0.5, abs=0.05)
    assert geometry_field(sphere_model, np.array([4.0, 0, 0])) == pytest.approx(0.5, abs=0.01)


def test_zero_moments_give_half_everywhere():
    c = sphere_cloud(500)
    c.moments[:, 0] = 0.0
    m = SceneModel.create(c, 0.1)
    X = np.random.default_rng(1).normal(size=(10, 3))
    assert np.all(geometry_field(m, X) == 0.5)


def test_vacancy_values():
    c = sphere_cloud(500)
    c.moments[:, 0] = 0.0
    m = SceneModel.create(c, 0.1, lambda_scale=2.0)
    # f = 1/2 everywhere, so v = Phi(1)
    assert vacancy(m, np.zeros(3)) == pytest.approx(normal_cdf(1.0), rel=1e-15)
    assert normal_cdf(0.0) == 0.5
    assert normal_cdf(0.2) == pytest.approx(0.5792597094391030, rel=1e-14)
    assert normal_cdf(40.0) == 1.0 and normal_cdf(-40.0) < 1e-300


@settings(max_examples=20)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_vacancy_monotone(a, b):
    lo, hi = sorted((a, b))
    assert normal_cdf(lo) <= normal_cdf(hi)
    assert 0 < normal_cdf(min(lo, 3)) < 1


def test_attenuation_orthogonal_and_flat():
    g = np.array([[0.0, 0.0, 2.0]])
    sig = attenuation_terms(np.array([0.3]), g, np.array([[1.0, 0, 0]]), 20.0)[0]
    assert sig[0] == 0.0
    sig = attenuation_terms(np.array([0.3]), np.zeros((1, 3)), np.array([[0, 0, 1.0]]), 20.0)[0]
    assert sig[0] == 0.0


def test_attenuation_matches_definition():
    from scipy.stats import norm

    D, g, w, lam = np.array([0.45]), np.array([[0.3, -1.0, 0.2]]), np.array([[0.6, 0.0, 0.8]]), 5.0
    f = 0.5 - D[0]
    v = norm.cdf(lam * f)
    grad_v = lam * norm.pdf(lam * f) * (-g[0])
    assert attenuation_terms(D, g, w, lam)[0][0] == pytest.approx(abs(w[0] @ grad_v) / v, rel=1e-12)


def test_attenuation_finite_deep_inside():
    sig = attenuation_terms(np.array([50.0]), np.array([[0, 0, 1.0]]), np.array([[0, 0, 1.0]]), 20.0)[0]
    assert np.isfinite(sig[0]) and sig[0] > 0


def test_attenuation_direction_symmetric(sphere_model):
    rng = np.random.default_rng(3)
    X = rng.uniform(-1.2, 1.2, size=(30, 3))
    W = rng.normal(size=(30, 3))
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    assert np.array_equal(attenuation(sphere_model, X, W), attenuation(sphere_model, X, -W))


def test_attenuation_peaks_near_surface(sphere_model):
    t = np.linspace(0.0, 2.0, 2001)
    X = np.column_stack([t, np.zeros_like(t), np.zeros_like(t)])
    sig = attenuation(sphere_model, X, np.array([1.0, 0, 0]))
    f = geometry_field(sphere_model, X)
    zero = t[np.argmin(np.abs(f))]
    # sigma keeps rising while v drops, until grad D decays about one width inside
    assert abs(t[np.argmax(sig)] - zero) < sphere_model.epsilon


def test_attenuation_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    D = rng.uniform(0, 1, 5)
    g = rng.normal(size=(5, 3))
    w = rng.normal(size=(5, 3))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    lam, ds = 7.0, rng.normal(size=5)

    def L(D_, g_, lam_):
        return np.sum(ds * attenuation_terms(D_, g_, w, lam_)[0])

    _, z, rho, s = attenuation_terms(D, g, w, lam)
    dD, dg, dlam = attenuation_backward(ds, z, rho, s, w, lam)
    h = 1e-6
    for i in range(5):
        e = np.zeros(5)
        e[i] = h
        assert dD[i] == pytest.approx((L(D + e, g, lam) - L(D - e, g, lam)) / (2 * h), rel=1e-5, abs=1e-8)
        for j in range(3):
            E = np.zeros((5, 3))
            E[i, j] = h
            assert dg[i, j] == pytest.approx((L(D, g + E, lam) - L(D, g - E, lam)) / (2 * h), rel=1e-5, abs=1e-8)
    assert dlam == pytest.approx((L(D, g, lam + h) - L(D, g, lam - h)) / (2 * h), rel=1e-5)


def test_normals_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    g = rng.normal(size=(4, 3))
    dn = rng.normal(size=(4, 3))
    n, ok, norm = normals_from_gradient(g)
    dg = normals_backward(dn, n, norm, ok)
    h = 1e-6
    for i in range(4):
        for j in range(3):
            E = np.zeros((4, 3))
            E[i, j] = h
            fd = (np.sum(dn * normals_from_gradient(g + E)[0]) - np.sum(dn * normals_from_gradient(g - E)[0])) / (2 * h)
            assert dg[i, j] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_implicit_normal_on_sphere(sphere_model):
    P = np.array([[0.0, 0, 1], [0.6, 0.8, 0], [-0.48, 0.6, -0.64]])
    n = implicit_normal(sphere_model, P)
    cosang = np.einsum("ij,ij->i", n, P / np.linalg.norm(P, axis=1, keepdims=True))
    assert np.all(cosang > np.cos(np.radians(5)))
    assert np.allclose(np.linalg.norm(n, axis=1), 1.0)


def test_implicit_normal_degenerate():
    c = sphere_cloud(300)
    c.moments[:, 0] = 0.0
    with pytest.raises(DegenerateNormalError):
        implicit_normal(SceneModel.create(c, 0.1), np.zeros(3))


def test_normal_matches_fd_of_field(sphere_model):
    rng = np.random.default_rng(6)
    d = rng.normal(size=(20, 3))
    X = d / np.linalg.norm(d, axis=1, keepdims=True) * rng.uniform(0.95, 1.05, size=(20, 1))
    h = 1e-4 * np.sqrt(12)
    n = implicit_normal(sphere_model, X)
    checked = 0
    for x, nx in zip(X, n):
        fd = np.array([geometry_field(sphere_model, x + h * e) - geometry_field(sphere_model, x - h * e)
                       for e in np.eye(3)]) / (2 * h)
        fd_half = np.array([geometry_field(sphere_model, x + h * e / 2) - geometry_field(sphere_model, x - h * e / 2)
                            for e in np.eye(3)]) / h
        if np.linalg.norm(fd - fd_half) > 1e-4 * np.linalg.norm(fd):
            continue  # far-field switch inside the stencil
        assert np.linalg.norm(nx - fd / np.linalg.norm(fd)) < 1e-3
        checked += 1
    assert checked >= 12


def test_gradient_matches_fd(sphere_model):
    x = np.array([0.3, 0.2, 0.1])
    g = geometry_field_gradient(sphere_model, x)
    h = 1e-4 * np.sqrt(12)
    fd = np.array([geometry_field(sphere_model, x + h * e) - geometry_field(sphere_model, x - h * e)
                   for e in np.eye(3)]) / (2 * h)
    assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(g) + 1e-9


def test_model_rejects_bad_params():
    with pytest.raises(ValueError):
        SceneModel.create(sphere_cloud(10), 0.0)
    m = SceneModel.create(sphere_cloud(10), 0.1, lambda_scale=3.0)
    assert m.lambda_scale == pytest.approx(3.0) and m.epsilon == pytest.approx(0.1)
