"""Singular and regularized Laplace (Poisson) kernels.

The regularized kernel multiplies the free-space Poisson kernel by a radial
profile ``tau(r / epsilon)`` obtained from Gaussian mollification of the
Green's function. Scalar versions are compiled with numba so that the tree
traversal code can inline them; the public functions are numpy-vectorized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

INV_4PI = 1.0 / (4.0 * math.pi)
TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)
FOUR_OVER_SQRT_PI = 4.0 / math.sqrt(math.pi)

# below this argument tau is evaluated by its Taylor series (erf cancellation)
_TAU_SERIES_CUTOFF = 0.5

KERNEL_REGULARIZED = 0
KERNEL_DESINGULARIZED = 1
KERNEL_SINGULAR = 2

_KERNEL_CODES = {
    "regularized": KERNEL_REGULARIZED,
    "desingularized": KERNEL_DESINGULARIZED,
    "singular": KERNEL_SINGULAR,
}


class CoincidenceError(ValueError):
    """Raised when the singular kernel is evaluated at coincident points."""


@dataclass(frozen=True)
class KernelParams:
    """Regularization settings shared by every dipole-sum evaluation.

    ``epsilon = 0`` selects the singular kernel. ``kind="desingularized"``
    replaces the regularization by a denominator cutoff of width ``cutoff``;
    it only exists to reproduce the ablation where it underperforms.
    """

    epsilon: float
    coincident_value: float = 0.0
    kind: str = "regularized"
    cutoff: float = 0.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        if self.kind not in _KERNEL_CODES:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "desingularized" and self.cutoff <= 0:
            raise ValueError("desingularized kernel needs a positive cutoff")

    @property
    def code(self) -> int:
        if self.kind == "regularized" and self.epsilon == 0:
            return KERNEL_SINGULAR
        return _KERNEL_CODES[self.kind]

    @property
    def width(self) -> float:
        """Scalar handed to compiled code: epsilon or the cutoff."""
        return self.cutoff if self.code == KERNEL_DESINGULARIZED else self.epsilon


# ---------------------------------------------------------------------------
# compiled scalar primitives
# ---------------------------------------------------------------------------


@njit(cache=True)
def tau_scalar(t):
    if t <= 0.0:
        return 0.0
    if t < _TAU_SERIES_CUTOFF:
        # tau(t) = 4/sqrt(pi) * sum_k (-1)^k t^(2k+3) / (k! (2k+3))
        t2 = t * t
        term = t2 * t
        total = 0.0
        for k in range(30):
            total += term / (2 * k + 3)
            term *= -t2 / (k + 1)
            if abs(term) < 1e-18 * total:
                break
        return FOUR_OVER_SQRT_PI * total
    return math.erf(t) - TWO_OVER_SQRT_PI * t * math.exp(-t * t)


@njit(cache=True)
def tau_prime_scalar(t):
    return FOUR_OVER_SQRT_PI * t * t * math.exp(-t * t)


@njit(cache=True)
def tau_second_scalar(t):
    return 2.0 * FOUR_OVER_SQRT_PI * t * (1.0 - t * t) * math.exp(-t * t)


@njit(cache=True)
def _tau_over_cube_series(t):
    # S(t) = tau(t) / t^3 and its first two derivatives
    t2 = t * t
    s = 0.0
    s1 = 0.0
    s2 = 0.0
    coef = 1.0  # (-1)^k / k!
    pw = 1.0  # t^(2k - 2), starts at k = 1
    s += coef / 3.0
    for k in range(1, 30):
        coef *= -1.0 / k
        c = coef / (2 * k + 3)
        s2 += c * 2 * k * (2 * k - 1) * pw
        s1 += c * 2 * k * pw * t
        s += c * pw * t2
        pw *= t2
        if pw * abs(coef) < 1e-30:
            break
    return FOUR_OVER_SQRT_PI * s, FOUR_OVER_SQRT_PI * s1, FOUR_OVER_SQRT_PI * s2


@njit(cache=True)
def radial_profile(r, width, code):
    """Return (g, dg/dr, dg/dwidth, d(dg/dr)/dwidth) for g(r) = w(r) / (4 pi r^3).

    ``w`` is tau(r/eps) for the regularized kernel, 1 for the singular one;
    the desingularized kernel uses g = 1 / (4 pi (r^2 + c^2)^(3/2)).
    Width derivatives are only meaningful for the regularized kernel.
    """
    if code == KERNEL_DESINGULARIZED:
        s2 = r * r + width * width
        s = math.sqrt(s2)
        g = INV_4PI / (s2 * s)
        dg = -3.0 * INV_4PI * r / (s2 * s2 * s)
        return g, dg, 0.0, 0.0
    r2 = r * r
    r3 = r2 * r
    if code == KERNEL_SINGULAR:
        g = INV_4PI / r3
        return g, -3.0 * g / r, 0.0, 0.0
    t = r / width
    if t < _TAU_SERIES_CUTOFF:
        s, s1, s2 = _tau_over_cube_series(t)
        w3 = width * width * width
        g = INV_4PI * s / w3
        dg = INV_4PI * s1 / (w3 * width)
        g_w = -INV_4PI * (3.0 * s + t * s1) / (w3 * width)
        dg_w = -INV_4PI * (4.0 * s1 + t * s2) / (w3 * width * width)
        return g, dg, g_w, dg_w
    tv = tau_scalar(t)
    tp = tau_prime_scalar(t)
    tpp = tau_second_scalar(t)
    g = INV_4PI * tv / r3
    dg = INV_4PI * (tp / (width * r3) - 3.0 * tv / (r3 * r))
    g_w = -INV_4PI * t * tp / (width * r3)
    dg_w = INV_4PI * (2.0 * tp - t * tpp) / (width * width * r3)
    return g, dg, g_w, dg_w


@njit(cache=True)
def radial_weight(r, width, code):
    """Return (h, dh/dr, dh/dwidth) for the foreshortening-free weight w(r)/(4 pi r^2)."""
    if code == KERNEL_DESINGULARIZED:
        s2 = r * r + width * width
        return INV_4PI / s2, -2.0 * INV_4PI * r / (s2 * s2), 0.0
    r2 = r * r
    if code == KERNEL_SINGULAR:
        h = INV_4PI / r2
        return h, -2.0 * h / r, 0.0
    t = r / width
    tv = tau_scalar(t)
    tp = tau_prime_scalar(t)
    h = INV_4PI * tv / r2
    dh = INV_4PI * (tp / (width * r2) - 2.0 * tv / (r2 * r))
    h_w = -INV_4PI * t * tp / (width * r2)
    return h, dh, h_w


# ---------------------------------------------------------------------------
# numpy-facing API
# ---------------------------------------------------------------------------

_tau_vec = np.vectorize(tau_scalar, otypes=[float])
_tau_prime_vec = np.vectorize(tau_prime_scalar, otypes=[float])


def tau(t):
    """Radial regularization profile erf(t) - 2t/sqrt(pi) exp(-t^2)."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("tau is defined for t >= 0")
    out = _tau_vec(t)
    return float(out) if out.ndim == 0 else out


def tau_prime(t):
    t = np.asarray(t, dtype=float)
    out = _tau_prime_vec(t)
    return float(out) if out.ndim == 0 else out


def _as_points(a):
    return np.atleast_2d(np.asarray(a, dtype=float))


def _squeeze(out, *inputs):
    if all(np.ndim(a) == 1 for a in inputs):
        return out[0]
    return out


def poisson_kernel(x, y, n_y):
    """Singular Poisson kernel n(y).(y-x) / (4 pi |y-x|^3).

    Raises CoincidenceError if any x equals y.
    """
    X, Y, N = _as_points(x), _as_points(y), _as_points(n_y)
    d = Y - X
    r = np.linalg.norm(d, axis=-1)
    if np.any(r == 0):
        raise CoincidenceError("singular Poisson kernel evaluated at x == y")
    out = INV_4PI * np.einsum("...i,...i->...", N, d) / r**3
    return _squeeze(out, x, y, n_y)


def regularized_poisson(x, y, n_y, params: KernelParams):
    """tau(|y-x|/eps) times the Poisson kernel; ``coincident_value`` at x == y."""
    X, Y, N = _as_points(x), _as_points(y), _as_points(n_y)
    d = Y - X
    r = np.linalg.norm(d, axis=-1)
    code, width = params.code, params.width
    out = np.full(r.shape, float(params.coincident_value))
    nz = r > 0
    if code == KERNEL_SINGULAR and not np.all(nz):
        raise CoincidenceError("epsilon = 0 selects the singular kernel")
    g = np.array([radial_profile(ri, width, code)[0] for ri in r[nz]])
    dot = np.einsum("...i,...i->...", N, d)
    out[nz] = g * dot[nz]
    return _squeeze(out, x, y, n_y)


def grad_regularized_poisson(x, y, n_y, params: KernelParams):
    """Gradient of the regularized kernel with respect to the query point x.

    With d = y - x and g(r) the radial profile, the kernel is g(r) n.d and

        grad_x = -g n - g'(r) (n.d) d / r.

    The gradient vanishes at x == y.
    """
    X, Y, N = _as_points(x), _as_points(y), _as_points(n_y)
    X, Y, N = np.broadcast_arrays(X, Y, N)
    d = Y - X
    r = np.linalg.norm(d, axis=-1)
    code, width = params.code, params.width
    out = np.zeros(d.shape)
    for i in np.flatnonzero(r > 0):
        g, dg, _, _ = radial_profile(r[i], width, code)
        nd = N[i] @ d[i]
        out[i] = -g * N[i] - dg * nd * d[i] / r[i]
    return _squeeze(out, x, y, n_y)


def desingularized_poisson(x, y, n_y, cutoff: float):
    """Poisson kernel with denominator (|y-x|^2 + cutoff^2)^(3/2)."""
    return regularized_poisson(x, y, n_y, KernelParams(1.0, kind="desingularized", cutoff=cutoff))


def radial_kernel(x, y, params: KernelParams):
    """Foreshortening-free weight tau(r/eps) / (4 pi r^2) used for appearance channels."""
    X, Y = _as_points(x), _as_points(y)
    r = np.linalg.norm(Y - X, axis=-1)
    out = np.zeros(r.shape)
    for i in np.flatnonzero(r > 0):
        out[i] = radial_weight(r[i], params.width, params.code)[0]
    return _squeeze(out, x, y)


# ---------------------------------------------------------------------------
# Gaussian helpers used by the vacancy function
# ---------------------------------------------------------------------------

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def normal_cdf(z):
    """Standard normal CDF via erf: (1 + erf(z / sqrt 2)) / 2."""
    from scipy.special import erf

    return 0.5 * (1.0 + erf(np.asarray(z, dtype=float) / SQRT2))


def normal_pdf(z):
    z = np.asarray(z, dtype=float)
    return INV_SQRT_2PI * np.exp(-0.5 * z * z)


def mills_ratio(z):
    """phi(z) / Phi(z), stable for very negative z."""
    from scipy.special import erfcx

    z = np.asarray(z, dtype=float)
    return math.sqrt(2.0 / math.pi) / erfcx(-z / SQRT2)
