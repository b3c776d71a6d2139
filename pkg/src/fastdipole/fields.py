"""Scalar fields built from dipole sums.

With D the geometry-channel dipole sum, the geometry field is f = 1/2 - D,
the vacancy is v = Phi(lambda f) and the attenuation along a unit direction
omega is sigma = |omega . grad v| / v. Writing g = grad D,

    sigma = lambda * rho(lambda f) * |omega . g|,   rho = phi / Phi,

which stays finite deep inside objects where v underflows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bhtree import DipoleTree
from .kernels import KernelParams, mills_ratio, normal_cdf
from .pointcloud import OrientedPointCloud


class DegenerateNormalError(ValueError):
    """The geometry-field gradient vanishes, so no normal is defined."""


NORMAL_GRAD_FLOOR = 1e-12


@dataclass
class SceneModel:
    """Point cloud, its tree and the global field parameters.

    ``log_lambda`` and ``log_epsilon`` are the optimized quantities; the
    public scalars are derived from them.
    """

    cloud: OrientedPointCloud
    tree: DipoleTree
    log_lambda: float
    log_epsilon: float
    head: object = None
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # (lo, hi) rendering bounds; None uses the cloud bounding box
    bbox: tuple | None = None

    @classmethod
    def create(cls, cloud, epsilon, lambda_scale=20.0, head=None, background=None, bbox=None,
               max_leaf_size=8, max_depth=20, beta_bh=2.0, appearance_kernel="radial"):
        if epsilon <= 0 or lambda_scale <= 0:
            raise ValueError("epsilon and lambda must be positive")
        tree = DipoleTree(cloud, max_leaf_size, max_depth, beta_bh, appearance_kernel)
        bg = np.zeros(3) if background is None else np.asarray(background, dtype=float).copy()
        return cls(cloud, tree, math.log(lambda_scale), math.log(epsilon), head, bg, bbox)

    @property
    def lambda_scale(self) -> float:
        return math.exp(self.log_lambda)

    @property
    def epsilon(self) -> float:
        return math.exp(self.log_epsilon)

    @property
    def kernel(self) -> KernelParams:
        return KernelParams(self.epsilon)

    def refresh(self):
        """Recompute node moments after the cloud's attributes changed."""
        self.tree.update_moments(self.cloud)

    def unit_moment_tree(self) -> DipoleTree:
        c = self.cloud.copy()
        c.moments = np.ones((len(c), 1))
        return self.tree.with_moments(c)


def _pts(x):
    return np.atleast_2d(np.asarray(x, dtype=float))


def _out(val, x):
    return val[0] if np.ndim(x) == 1 else val


def dipole_geometry(model: SceneModel, x) -> np.ndarray:
    """Geometry-channel dipole sum D at one or many points."""
    return _out(model.tree.geometry(_pts(x), model.kernel), x)


def winding_number(model: SceneModel, x, kernel: KernelParams | None = None):
    """Regularized winding number: the dipole sum with every geometry moment set to 1."""
    tree = model.unit_moment_tree()
    return _out(tree.geometry(_pts(x), kernel or model.kernel), x)


def geometry_field(model: SceneModel, x):
    return 0.5 - dipole_geometry(model, x)


def geometry_field_gradient(model: SceneModel, x):
    q = model.tree.query(_pts(x), model.kernel, n_grad=1)
    return _out(-q["grads"][:, 0], x)


def vacancy(model: SceneModel, x):
    return normal_cdf(model.lambda_scale * geometry_field(model, x))


def attenuation_terms(D, g, omega, lam):
    """Attenuation and the pieces needed to differentiate it.

    D: (Q,) dipole sums, g: (Q,3) their gradients, omega: (Q,3) unit directions.
    Returns sigma, z = lambda f, rho(z), and s = omega . g.
    """
    f = 0.5 - D
    z = lam * f
    rho = mills_ratio(z)
    s = np.einsum("ij,ij->i", omega, g)
    return lam * rho * np.abs(s), z, rho, s


def attenuation_backward(d_sigma, z, rho, s, omega, lam):
    """Chain rule through sigma = lambda rho(lambda f) |s|.

    Returns gradients with respect to D, g and lambda. Uses
    rho'(z) = -rho (z + rho).
    """
    drho = -rho * (z + rho)
    a = np.abs(s)
    dD = -d_sigma * lam * lam * drho * a
    dg = (d_sigma * lam * rho * np.sign(s))[:, None] * omega
    f = z / lam
    dlam = np.sum(d_sigma * (rho * a + lam * drho * f * a))
    return dD, dg, dlam


def attenuation(model: SceneModel, x, omega):
    """sigma(x, omega) = |omega . grad v| / v at one or many points."""
    X = _pts(x)
    W = np.broadcast_to(_pts(omega), X.shape)
    q = model.tree.query(X, model.kernel, n_grad=1)
    sigma = attenuation_terms(q["values"][:, 0], q["grads"][:, 0], W, model.lambda_scale)[0]
    return _out(sigma, x)


def normals_from_gradient(g):
    """Unit normals -g/|g| of the geometry field; rows with |g| below the
    floor come back as zero with a False mask entry."""
    norm = np.linalg.norm(g, axis=-1)
    ok = norm > NORMAL_GRAD_FLOOR
    n = np.zeros_like(g)
    n[ok] = -g[ok] / norm[ok, None]
    return n, ok, norm


def normals_backward(d_n, n, norm, ok):
    """Gradient with respect to g given the gradient with respect to n = -g/|g|."""
    dg = np.zeros_like(d_n)
    dn = d_n[ok]
    nn = n[ok]
    proj = dn - np.einsum("ij,ij->i", dn, nn)[:, None] * nn
    dg[ok] = -proj / norm[ok, None]
    return dg


def implicit_normal(model: SceneModel, x):
    """Unit normal grad f / |grad f|; raises DegenerateNormalError where it vanishes."""
    X = _pts(x)
    q = model.tree.query(X, model.kernel, n_grad=1)
    n, ok, _ = normals_from_gradient(q["grads"][:, 0])
    if not np.all(ok):
        raise DegenerateNormalError(f"geometry-field gradient vanishes at {X[~ok][0]}")
    return _out(n, x)
