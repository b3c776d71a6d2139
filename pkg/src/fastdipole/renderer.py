"""Volume rendering of the dipole-sum scene model.

Rays are sampled in two passes: a dense geometry-only probe finds the first
sign change of f, then a sparse/dense/sparse schedule is placed around it
(uniform when no crossing exists). Colors are composited with the standard
exclusive-transmittance quadrature

    T_j = exp(-sum_{i<j} sigma_i Delta_i),  p_j = T_j (1 - exp(-sigma_j Delta_j)),

and whatever weight is left over goes to a constant background color.
Everything needed for the backward pass is kept in a ``RenderCache``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SamplingConfig
from .fields import (SceneModel, attenuation_backward, attenuation_terms, normals_backward,
                     normals_from_gradient)

SCENE_VERSION = 1


class SceneError(ValueError):
    """Scene file violates the schema; the message names the offending field."""


# ---------------------------------------------------------------------------
# cameras and rays
# ---------------------------------------------------------------------------


@dataclass
class PointLight:
    position: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.intensity = np.broadcast_to(np.asarray(self.intensity, dtype=float), (3,)).copy()


@dataclass
class Camera:
    """Pinhole camera. ``rotation`` maps camera axes to world axes (x right,
    y down, z forward); pixel (u, v) is continuous with centers at i + 0.5."""

    position: np.ndarray
    rotation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    lights: list = field(default_factory=list)
    image: str | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        R = self.rotation
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValueError("camera rotation must be orthonormal with determinant +1")

    @classmethod
    def look_at(cls, eye, target, up, fov_deg, width, height, lights=None):
        eye = np.asarray(eye, dtype=float)
        z = np.asarray(target, dtype=float) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [1.0, 0.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(eye, np.stack([x, y, z], axis=1), f, f, width / 2, height / 2, width, height,
                   list(lights or []))

    @property
    def optical_axis(self):
        return self.rotation[:, 2].copy()

    def pixel_centers(self):
        """Continuous (u, v) coordinates of every pixel center, row-major."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        return np.stack([u.ravel() + 0.5, v.ravel() + 0.5], axis=1).astype(float)

    def project(self, points):
        """World points to continuous pixel coordinates (u, v)."""
        P = np.atleast_2d(points) - self.position
        c = P @ self.rotation
        return np.stack([self.fx * c[:, 0] / c[:, 2] + self.cx, self.fy * c[:, 1] / c[:, 2] + self.cy],
                        axis=1)


def generate_rays(camera: Camera, pixels):
    """Origins and unit directions through continuous pixel coordinates (N, 2)."""
    uv = np.atleast_2d(np.asarray(pixels, dtype=float))
    if np.any(uv < 0) or np.any(uv[:, 0] > camera.width) or np.any(uv[:, 1] > camera.height):
        raise ValueError("pixel coordinates outside the image")
    dc = np.stack([(uv[:, 0] - camera.cx) / camera.fx, (uv[:, 1] - camera.cy) / camera.fy,
                   np.ones(len(uv))], axis=1)
    d = dc @ camera.rotation.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(camera.position, d.shape).copy()
    return o, d


def ray_box(origins, dirs, lo, hi):
    """Slab intersection; returns (t_near, t_far, hit) with t_near >= 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t0), np.inf, np.maximum(t0, t1))
    tn = np.maximum(tmin.max(axis=1), 0.0)
    tf = tmax.min(axis=1)
    return tn, tf, tf > tn


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass
class RaySamples:
    """Segment midpoints ``t`` with lengths ``deltas`` between ``edges``."""

    edges: np.ndarray
    crossing: float | None = None

    @property
    def t(self):
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def deltas(self):
        return np.diff(self.edges)

    def __len__(self):
        return len(self.edges) - 1


def _first_crossing(t, f):
    pos = f > 0
    change = np.flatnonzero(pos[1:] != pos[:-1])
    if len(change) == 0:
        return None
    k = change[0]
    f0, f1 = f[k], f[k + 1]
    w = f0 / (f0 - f1) if f0 != f1 else 0.5
    return t[k] + w * (t[k + 1] - t[k])


def schedule_edges(t_near, t_far, crossing, cfg: SamplingConfig, halfwidth):
    """Segment edges for one ray given its first crossing (or None)."""
    span = t_far - t_near
    if span <= 1e-6 * max(1.0, abs(t_far)):
        return np.array([t_near, max(t_far, np.nextafter(t_near, np.inf))])
    if crossing is None:
        return np.linspace(t_near, t_far, cfg.uniform_count + 1)
    lo = max(t_near, crossing - halfwidth)
    hi = min(t_far, crossing + halfwidth)
    parts = [np.array([t_near])]
    if lo > t_near and cfg.sparse_before > 0:
        parts.append(np.linspace(t_near, lo, cfg.sparse_before + 1)[1:])
    elif lo > t_near:
        parts.append(np.array([lo]))
    parts.append(np.linspace(lo, hi, cfg.dense_count + 1)[1:])
    if t_far > hi and cfg.sparse_after > 0:
        parts.append(np.linspace(hi, t_far, cfg.sparse_after + 1)[1:])
    elif t_far > hi:
        parts.append(np.array([t_far]))
    e = np.concatenate(parts)
    keep = np.concatenate([[True], np.diff(e) > 0])
    return e[keep]


def _field_fn(model_or_fn):
    if callable(model_or_fn) and not isinstance(model_or_fn, SceneModel):
        return model_or_fn
    model = model_or_fn

    def f(points):
        return 0.5 - model.tree.geometry(points, model.kernel)

    return f


def sample_ray(model_or_field, origin, direction, cfg: SamplingConfig, t_near, t_far,
               epsilon=None) -> RaySamples:
    """Two-pass sampling schedule for one ray.

    ``model_or_field`` is a SceneModel or a callable mapping (N, 3) points to
    geometry-field values.
    """
    if not t_far > t_near:
        raise ValueError("t_near must be smaller than t_far")
    fn = _field_fn(model_or_field)
    if epsilon is None:
        epsilon = model_or_field.epsilon if isinstance(model_or_field, SceneModel) else 0.0
    if t_far - t_near <= 1e-6 * max(1.0, abs(t_far)):
        return RaySamples(schedule_edges(t_near, t_far, None, cfg, 0.0))
    tp = np.linspace(t_near, t_far, cfg.probe_count)
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    f = np.asarray(fn(o + tp[:, None] * d), dtype=float)
    c = _first_crossing(tp, f)
    hw = max(cfg.dense_halfwidth_eps * epsilon, (t_far - t_near) / cfg.probe_count)
    return RaySamples(schedule_edges(t_near, t_far, c, cfg, hw), c)


def sample_rays(model_or_field, origins, dirs, t_near, t_far, cfg: SamplingConfig, epsilon):
    """Batched version of ``sample_ray``; returns padded (B, J) midpoints,
    segment lengths (0 on padding) and the validity mask."""
    fn = _field_fn(model_or_field)
    B = len(origins)
    P = cfg.probe_count
    span = t_far - t_near
    live = span > 1e-6 * np.maximum(1.0, np.abs(t_far))
    crossings = [None] * B
    idx = np.flatnonzero(live)
    if len(idx):
        tp = t_near[idx, None] + np.linspace(0.0, 1.0, P)[None, :] * span[idx, None]
        pts = origins[idx, None, :] + tp[..., None] * dirs[idx, None, :]
        f = np.asarray(fn(pts.reshape(-1, 3)), dtype=float).reshape(len(idx), P)
        for r, b in enumerate(idx):
            crossings[b] = _first_crossing(tp[r], f[r])
    edges = []
    for b in range(B):
        if t_far[b] <= t_near[b]:
            edges.append(np.zeros(1))
            continue
        hw = max(cfg.dense_halfwidth_eps * epsilon, span[b] / P)
        edges.append(schedule_edges(t_near[b], t_far[b], crossings[b], cfg, hw))
    J = max(1, max(len(e) - 1 for e in edges))
    t = np.zeros((B, J))
    dl = np.zeros((B, J))
    mask = np.zeros((B, J), dtype=bool)
    for b, e in enumerate(edges):
        n = len(e) - 1
        if n > 0:
            t[b, :n] = 0.5 * (e[1:] + e[:-1])
            dl[b, :n] = np.diff(e)
            mask[b, :n] = True
    return t, dl, mask


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------


def quadrature_weights(sigma, deltas):
    """Free-flight weights p_j and transmittances T_j along the last axis."""
    a = np.asarray(sigma, dtype=float) * np.asarray(deltas, dtype=float)
    cum = np.cumsum(a, axis=-1)
    T = np.exp(-(cum - a))
    p = T * -np.expm1(-a)
    return p, T


def composite(sigma, deltas, rgb, background):
    """Composite per-sample colors (..., J, 3); returns (color, p, T)."""
    p, T = quadrature_weights(sigma, deltas)
    color = np.einsum("...j,...jc->...c", p, rgb) + (1.0 - p.sum(axis=-1))[..., None] * background
    return color, p, T


def composite_backward(d_color, d_p_extra, sigma, deltas, p, T, rgb, background):
    """Gradients of the composite with respect to sigma, rgb and background."""
    a = sigma * deltas
    dp = np.einsum("...c,...jc->...j", d_color, rgb) - (d_color @ background)[..., None]
    if d_p_extra is not None:
        dp = dp + d_p_extra
    q = dp * p
    tail = np.cumsum(q[..., ::-1], axis=-1)[..., ::-1] - q
    da = dp * T * np.exp(-a) - tail
    d_sigma = da * deltas
    d_rgb = p[..., None] * d_color[..., None, :]
    d_bg = (d_color * (1.0 - p.sum(axis=-1))[..., None]).reshape(-1, 3).sum(axis=0)
    return d_sigma, d_rgb, d_bg


def quadrature_render(sigma, deltas, radiance, background=None):
    """Render one ray from per-sample attenuation and radiance (J, 3)."""
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=float)
    color, p, _ = composite(np.asarray(sigma, dtype=float), np.asarray(deltas, dtype=float),
                            np.asarray(radiance, dtype=float), bg)
    return color, p


def ray_entropy(p):
    """Shannon entropy -sum p log p over the last axis, 0 log 0 = 0."""
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise ValueError("weights must be nonnegative")
    safe = np.where(p > 0, p, 1.0)
    return -np.sum(np.where(p > 0, p * np.log(safe), 0.0), axis=-1)


ENTROPY_FLOOR = 1e-12


def ray_entropy_grad(p):
    safe = np.where(p > ENTROPY_FLOOR, p, 1.0)
    return np.where(p > ENTROPY_FLOOR, -(np.log(safe) + 1.0), 0.0)


# ---------------------------------------------------------------------------
# radiance heads
# ---------------------------------------------------------------------------


def sh_basis(d):
    """Real spherical harmonics up to degree 3 (16 values) of unit directions."""
    d = np.atleast_2d(d)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    return np.stack([
        np.full_like(x, 0.28209479177387814),
        -0.4886025119029199 * y,
        0.4886025119029199 * z,
        -0.4886025119029199 * x,
        1.0925484305920792 * x * y,
        -1.0925484305920792 * y * z,
        0.31539156525252005 * (2 * zz - xx - yy),
        -1.0925484305920792 * x * z,
        0.5462742152960396 * (xx - yy),
        -0.5900435899266435 * y * (3 * xx - yy),
        2.890611442640554 * x * y * z,
        -0.4570457994644658 * y * (4 * zz - xx - yy),
        0.3731763325901154 * z * (2 * zz - 3 * xx - 3 * yy),
        -0.4570457994644658 * x * (4 * zz - xx - yy),
        1.445305721320277 * z * (xx - yy),
        -0.5900435899266435 * x * (xx - 3 * yy),
    ], axis=1)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class RadianceHead:
    """Maps interpolated appearance channels to RGB (and albedo).

    ``direct-rgb`` squashes channels 0-2 (3-5 for albedo) with a logistic.
    ``tiny-mlp`` feeds (x, SH(omega), normal, features) through ReLU layers
    with a logistic output; forward and backward are written out by hand.
    """

    def __init__(self, variant="direct-rgb", k_features=None, hidden=(64, 64), albedo=False,
                 sh_degree=3, init_scale=0.1, seed=0):
        if variant not in ("direct-rgb", "tiny-mlp"):
            raise ValueError(f"unknown head variant {variant!r}")
        if sh_degree != 3:
            raise ValueError("only degree-3 spherical harmonics are supported")
        self.variant = variant
        self.albedo = bool(albedo)
        self.n_out = 6 if self.albedo else 3
        if variant == "direct-rgb":
            self.k_features = self.n_out
            self.hidden = []
        else:
            self.k_features = int(k_features or 8)
            self.hidden = [int(h) for h in hidden]
        self.params = {}
        if variant == "tiny-mlp":
            rng = np.random.default_rng(seed)
            sizes = [3 + 16 + 3 + self.k_features] + self.hidden + [self.n_out]
            for i in range(len(sizes) - 1):
                std = math.sqrt(2.0 / sizes[i])
                if i == len(sizes) - 2:
                    std *= init_scale
                self.params[f"W{i}"] = rng.normal(0.0, std, size=(sizes[i], sizes[i + 1]))
                self.params[f"b{i}"] = np.zeros(sizes[i + 1])

    @property
    def n_layers(self):
        return len(self.hidden) + 1

    def forward(self, x, omega, normals, feats):
        """Returns (rgb, albedo or None, cache)."""
        if self.variant == "direct-rgb":
            out = _sigmoid(feats[:, : self.n_out])
            return out[:, :3], (out[:, 3:6] if self.albedo else None), {"out": out}
        h = np.concatenate([x, sh_basis(omega), normals, feats], axis=1)
        acts = [h]
        for i in range(self.n_layers):
            z = acts[-1] @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < self.n_layers - 1:
                z = np.maximum(z, 0.0)
            acts.append(z)
        out = _sigmoid(acts[-1])
        return out[:, :3], (out[:, 3:6] if self.albedo else None), {"out": out, "acts": acts}

    def backward(self, cache, d_rgb, d_albedo=None):
        """Returns (d_feats, d_normals, param grads)."""
        out = cache["out"]
        d_out = np.zeros_like(out)
        d_out[:, :3] = d_rgb
        if self.albedo and d_albedo is not None:
            d_out[:, 3:6] = d_albedo
        dz = d_out * out * (1.0 - out)
        if self.variant == "direct-rgb":
            return dz, np.zeros((len(out), 3)), {}
        acts = cache["acts"]
        grads = {}
        for i in range(self.n_layers - 1, -1, -1):
            grads[f"W{i}"] = acts[i].T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            dh = dz @ self.params[f"W{i}"].T
            if i > 0:
                dz = dh * (acts[i] > 0)
        d_normals = dh[:, 19:22]
        d_feats = dh[:, 22:]
        return d_feats, d_normals, grads

    def state(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def config(self) -> dict:
        return {"variant": self.variant, "k_features": self.k_features, "hidden": self.hidden,
                "albedo": self.albedo}


def radiance_eval(model: SceneModel, x, omega):
    """Head RGB at points x for outgoing directions omega (no direct lighting)."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    W = np.broadcast_to(np.atleast_2d(omega), X.shape)
    q = model.tree.query(X, model.kernel, n_grad=1)
    n, _, _ = normals_from_gradient(q["grads"][:, 0])
    rgb, _, _ = model.head.forward(X, W, n, q["values"][:, 1:])
    return rgb[0] if np.ndim(x) == 1 else rgb


# ---------------------------------------------------------------------------
# shadows
# ---------------------------------------------------------------------------


def segment_points(x, y, n_samples):
    """Midpoints, step length and unit direction for segments x -> y."""
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    seg = y - x
    length = np.linalg.norm(seg, axis=1)
    u = (np.arange(n_samples) + 0.5) / n_samples
    pts = x[:, None, :] + u[None, :, None] * seg[:, None, :]
    return pts, length / n_samples, seg / length[:, None]


def transmittance(model: SceneModel, x, y, n_samples=64):
    """exp(-integral of sigma) along the segment x -> y (midpoint rule)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(np.all(np.atleast_2d(x) == np.atleast_2d(y), axis=1)):
        raise ValueError("transmittance needs distinct endpoints")
    pts, dt, w = segment_points(x, y, n_samples)
    S = pts.shape[0]
    P = pts.reshape(-1, 3)
    W = np.repeat(w, n_samples, axis=0)
    q = model.tree.query(P, model.kernel, n_grad=1)
    sigma = attenuation_terms(q["values"][:, 0], q["grads"][:, 0], W, model.lambda_scale)[0]
    T = np.exp(-sigma.reshape(S, n_samples).sum(axis=1) * dt)
    return T[0] if np.ndim(x) == 1 else T


def direct_illumination(x, normals, albedo, lights, T):
    """albedo * sum_i I_i T_i max(0, n.(l_i - x)) / |l_i - x|^3.

    ``T`` is (N, L) transmittance to each light.
    """
    x = np.atleast_2d(x)
    out = np.zeros((len(x), 3))
    for i, light in enumerate(lights):
        d = light.position - x
        r = np.linalg.norm(d, axis=1)
        cos = np.maximum(np.einsum("ij,ij->i", np.atleast_2d(normals), d), 0.0)
        out += (T[:, i] * cos / r**3)[:, None] * light.intensity
    return np.atleast_2d(albedo) * out


# ---------------------------------------------------------------------------
# batched rendering with backward pass
# ---------------------------------------------------------------------------


@dataclass
class RenderCache:
    sigma: np.ndarray
    deltas: np.ndarray
    mask: np.ndarray
    p: np.ndarray
    T: np.ndarray
    rgb: np.ndarray
    X: np.ndarray
    omega: np.ndarray
    query: dict
    att: tuple
    normals: tuple
    head_cache: dict
    head_rgb: np.ndarray
    albedo: np.ndarray | None
    shadow: dict | None


def _shadow_forward(model, X, normals, lights, cfg: SamplingConfig, keep):
    L = len(lights)
    S = len(X)
    n = cfg.shadow_samples
    direct = np.zeros((S, 3))
    if S == 0 or L == 0:
        return direct, None
    lp = np.stack([l.position for l in lights])
    xs = np.repeat(X, L, axis=0)
    ys = np.tile(lp, (S, 1))
    pts, dt, w = segment_points(xs, ys, n)
    P = pts.reshape(-1, 3)
    W = np.repeat(w, n, axis=0)
    q = model.tree.query(P, model.kernel, n_grad=1, eps_derivs=keep)
    att = attenuation_terms(q["values"][:, 0], q["grads"][:, 0], W, model.lambda_scale)
    tau = (att[0].reshape(S * L, n).sum(axis=1) * dt)
    T = np.exp(-tau).reshape(S, L)
    dvec = ys.reshape(S, L, 3) - X[:, None, :]
    r = np.linalg.norm(dvec, axis=2)
    cosr = np.einsum("slk,sk->sl", dvec, normals)
    lit = cosr > 0
    geo = np.where(lit, cosr, 0.0) / r**3
    I = np.stack([l.intensity for l in lights])
    direct = np.einsum("sl,lc->sc", T * geo, I)
    cache = {"P": P, "W": W, "q": q, "att": att, "T": T, "dt": dt, "dvec": dvec, "r": r,
             "lit": lit, "geo": geo, "I": I, "n": n} if keep else None
    return direct, cache


def render_rays(model: SceneModel, origins, dirs, cfg: SamplingConfig, lights=None,
                shadows=False, keep=False, samples=None):
    """Render a batch of rays. Returns (colors (B,3), cache or None).

    ``samples`` may supply precomputed (t, deltas, mask) to freeze the
    sampling schedule (used by gradient checks).
    """
    B = len(origins)
    lo, hi = model_bounds(model)
    if samples is None:
        tn, tf, hit = ray_box(origins, dirs, lo, hi)
        tf = np.where(hit, tf, tn)
        t, deltas, mask = sample_rays(model, origins, dirs, tn, tf, cfg, model.epsilon)
    else:
        t, deltas, mask = samples
    J = t.shape[1]
    bi, ji = np.nonzero(mask)
    X = origins[bi] + t[bi, ji, None] * dirs[bi]
    omega = dirs[bi]
    q = model.tree.query(X, model.kernel, n_grad=1, eps_derivs=keep)
    D = q["values"][:, 0]
    g = q["grads"][:, 0]
    att = attenuation_terms(D, g, omega, model.lambda_scale)
    sigma = np.zeros((B, J))
    sigma[bi, ji] = att[0]
    nrm = normals_from_gradient(g)
    head_rgb, albedo, hcache = model.head.forward(X, -omega, nrm[0], q["values"][:, 1:])
    p, T = quadrature_weights(sigma, deltas)
    rgb_s = head_rgb
    shadow = None
    if shadows and lights:
        sel = p[bi, ji] > cfg.shadow_weight_cutoff
        direct, scache = _shadow_forward(model, X[sel], nrm[0][sel], lights, cfg, keep)
        rgb_s = head_rgb.copy()
        rgb_s[sel] += albedo[sel] * direct
        shadow = {"sel": sel, "direct": direct, "cache": scache}
    rgb = np.zeros((B, J, 3))
    rgb[bi, ji] = rgb_s
    bg = model.background
    color = np.einsum("bj,bjc->bc", p, rgb) + (1.0 - p.sum(axis=1))[:, None] * bg
    if not keep:
        return color, None
    cache = RenderCache(sigma, deltas, mask, p, T, rgb, X, omega, q, att, nrm, hcache, head_rgb,
                        albedo, shadow)
    return color, cache


def model_bounds(model: SceneModel):
    bb = getattr(model, "bbox", None)
    if bb is None:
        return model.cloud.bbox(0.05)
    return np.asarray(bb[0], dtype=float), np.asarray(bb[1], dtype=float)


def render_backward(model: SceneModel, cache: RenderCache, d_color, d_p_extra=None):
    """Backpropagate color (and optional per-sample weight) gradients.

    Adjoint increments go straight into the tree accumulators; returns a dict
    with head parameter grads, background, log-lambda and log-epsilon grads.
    """
    lam = model.lambda_scale
    eps = model.epsilon
    d_sigma, d_rgb, d_bg = composite_backward(d_color, d_p_extra, cache.sigma, cache.deltas,
                                              cache.p, cache.T, cache.rgb, model.background)
    bi, ji = np.nonzero(cache.mask)
    d_rgb_s = d_rgb[bi, ji]
    d_sig_s = d_sigma[bi, ji]
    Q = len(cache.X)
    d_normals = np.zeros((Q, 3))
    d_albedo = None
    dlam = 0.0
    deps = 0.0
    sh = cache.shadow
    if sh is not None and sh["cache"] is not None:
        sel = sh["sel"]
        sc = sh["cache"]
        d_albedo = np.zeros((Q, 3))
        d_albedo[sel] = d_rgb_s[sel] * sh["direct"]
        d_direct = d_rgb_s[sel] * cache.albedo[sel]
        # direct = sum_l T_l geo_l I_l
        dTg = np.einsum("sc,lc->sl", d_direct, sc["I"])
        dT = dTg * sc["geo"]
        dgeo = dTg * sc["T"]
        d_normals[sel] += np.einsum("sl,slk->sk", np.where(sc["lit"], dgeo / sc["r"]**3, 0.0),
                                    sc["dvec"])
        S, L = sc["T"].shape
        n = sc["n"]
        d_tau = -(dT * sc["T"]).reshape(S * L)
        d_sig_shadow = np.repeat(d_tau * sc["dt"], n)
        dD, dg, dl = attenuation_backward(d_sig_shadow, *sc["att"][1:], sc["W"], lam)
        dlam += dl
        dv = np.zeros((len(sc["P"]), model.tree.n_channels))
        dv[:, 0] = dD
        model.tree.adjoint(sc["P"], dv, model.kernel, d_grads=dg[:, None, :])
        deps += np.sum(dD * sc["q"]["d_eps"][:, 0]) + np.sum(dg * sc["q"]["grads_d_eps"][:, 0])
    d_feats, d_n_head, head_grads = model.head.backward(cache.head_cache, d_rgb_s, d_albedo)
    d_normals += d_n_head
    n, ok, norm = cache.normals
    dg_n = normals_backward(d_normals, n, norm, ok)
    dD, dg_a, dl = attenuation_backward(d_sig_s, *cache.att[1:], cache.omega, lam)
    dlam += dl
    dv = np.zeros((Q, model.tree.n_channels))
    dv[:, 0] = dD
    dv[:, 1:] = d_feats
    dg = dg_a + dg_n
    model.tree.adjoint(cache.X, dv, model.kernel, d_grads=dg[:, None, :])
    q = cache.query
    deps += np.sum(dv * q["d_eps"]) + np.sum(dg * q["grads_d_eps"][:, 0])
    return {"head": head_grads, "background": d_bg, "log_lambda": lam * dlam,
            "log_epsilon": eps * deps}


def render_image(model: SceneModel, camera: Camera, cfg: SamplingConfig, shadows=False,
                 chunk=4096):
    """Full image (H, W, 3) rendered in ray chunks."""
    uv = camera.pixel_centers()
    o, d = generate_rays(camera, uv)
    out = np.zeros((len(uv), 3))
    for s in range(0, len(uv), chunk):
        out[s:s + chunk] = render_rays(model, o[s:s + chunk], d[s:s + chunk], cfg,
                                       lights=camera.lights, shadows=shadows)[0]
    return out.reshape(camera.height, camera.width, 3)


# ---------------------------------------------------------------------------
# image and scene files
# ---------------------------------------------------------------------------


def save_png(path, img):
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    """Float RGB image in [0, 1] from PNG/JPEG or linear PFM."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


def write_pfm(path, img):
    img = np.asarray(img, dtype="<f4")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"PF":
            raise ValueError(f"{path}: not an RGB PFM file")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(w * h * 12), dtype=dt)
    return data.reshape(h, w, 3)[::-1].astype(float)


@dataclass
class Scene:
    cameras: list
    point_cloud: Path
    background: np.ndarray
    bbox: tuple | None
    root: Path

    def image(self, i) -> np.ndarray:
        cam = self.cameras[i]
        if cam.image is None:
            raise SceneError(f"cameras[{i}].image: missing")
        img = load_image(self.root / cam.image)
        if img.shape[:2] != (cam.height, cam.width):
            raise SceneError(f"cameras[{i}].image: size {img.shape[1]}x{img.shape[0]} "
                             f"does not match {cam.width}x{cam.height}")
        return img


def _req(d, key, where):
    if key not in d:
        raise SceneError(f"{where}.{key}: missing")
    return d[key]


def _vec(v, n, where):
    arr = np.asarray(v, dtype=float)
    if arr.shape != (n,) or not np.all(np.isfinite(arr)):
        raise SceneError(f"{where}: expected {n} finite numbers")
    return arr


def load_scene(path) -> Scene:
    """Parse a scene description (JSON) and validate its schema."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SceneError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise SceneError("scene: expected an object")
    version = _req(data, "format_version", "scene")
    if version != SCENE_VERSION:
        raise SceneError(f"scene.format_version: {version}, expected {SCENE_VERSION}")
    cams = []
    raw_cams = _req(data, "cameras", "scene")
    if not isinstance(raw_cams, list) or not raw_cams:
        raise SceneError("scene.cameras: expected a nonempty list")
    for i, c in enumerate(raw_cams):
        where = f"scene.cameras[{i}]"
        lights = []
        for j, l in enumerate(c.get("lights", [])):
            lw = f"{where}.lights[{j}]"
            inten = _req(l, "intensity", lw)
            inten = _vec([inten] * 3 if np.isscalar(inten) else inten, 3, lw + ".intensity")
            lights.append(PointLight(_vec(_req(l, "position", lw), 3, lw + ".position"), inten))
        try:
            R = np.asarray(_req(c, "rotation", where), dtype=float)
            if R.shape != (3, 3):
                raise SceneError(f"{where}.rotation: expected a 3x3 matrix")
            cam = Camera(_vec(_req(c, "position", where), 3, where + ".position"), R,
                         float(_req(c, "fx", where)), float(_req(c, "fy", where)),
                         float(_req(c, "cx", where)), float(_req(c, "cy", where)),
                         int(_req(c, "width", where)), int(_req(c, "height", where)), lights,
                         c.get("image"))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, SceneError):
                raise
            raise SceneError(f"{where}: {exc}") from exc
        cams.append(cam)
    bg = _vec(data.get("background", [0.0, 0.0, 0.0]), 3, "scene.background")
    bbox = None
    if data.get("bbox") is not None:
        bb = data["bbox"]
        if not isinstance(bb, list) or len(bb) != 2:
            raise SceneError("scene.bbox: expected [lo, hi]")
        bbox = (_vec(bb[0], 3, "scene.bbox[0]"), _vec(bb[1], 3, "scene.bbox[1]"))
    return Scene(cams, path.parent / _req(data, "point_cloud", "scene"), bg, bbox, path.parent)


def camera_to_dict(cam: Camera) -> dict:
    return {"position": cam.position.tolist(), "rotation": cam.rotation.tolist(),
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height, "image": cam.image,
            "lights": [{"position": l.position.tolist(), "intensity": l.intensity.tolist()}
                       for l in cam.lights]}


def save_scene(path, cameras, point_cloud, background=(0.0, 0.0, 0.0), bbox=None):
    data = {"format_version": SCENE_VERSION, "point_cloud": str(point_cloud),
            "background": list(map(float, background)),
            "bbox": None if bbox is None else [list(map(float, bbox[0])), list(map(float, bbox[1]))],
            "cameras": [camera_to_dict(c) for c in cameras]}
    Path(path).write_text(json.dumps(data, indent=1))
