"""Analytic test scenes: signed distance functions, ground-truth renders
and noisy oriented point clouds sampled from their surfaces."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .meshing import TriangleMesh, grid_from_function, marching_cubes
from .pointcloud import OrientedPointCloud, estimate_area_weights
from .renderer import Camera, PointLight, generate_rays


# ---------------------------------------------------------------------------
# signed distance functions
# ---------------------------------------------------------------------------


def sphere_sdf(center=(0.0, 0.0, 0.0), radius=0.8):
    c = np.asarray(center, dtype=float)

    def f(p):
        return np.linalg.norm(p - c, axis=-1) - radius

    return f


def box_sdf(center, half):
    c = np.asarray(center, dtype=float)
    b = np.asarray(half, dtype=float)

    def f(p):
        q = np.abs(p - c) - b
        return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)

    return f


def smooth_union(sdfs, k=0.15):
    """Polynomial smooth minimum of several distance functions."""

    def f(p):
        d = sdfs[0](p)
        for s in sdfs[1:]:
            e = s(p)
            h = np.clip(0.5 + 0.5 * (e - d) / k, 0.0, 1.0)
            d = e * (1 - h) + d * h - k * h * (1 - h)
        return d

    return f


def union(sdfs):
    def f(p):
        return np.min(np.stack([s(p) for s in sdfs]), axis=0)

    return f


def blobby_sdf():
    """Smooth union of four spheres, roughly unit size."""
    parts = [sphere_sdf((0.0, 0.0, 0.0), 0.55), sphere_sdf((0.45, 0.2, 0.1), 0.38),
             sphere_sdf((-0.38, -0.22, 0.18), 0.36), sphere_sdf((0.05, 0.3, -0.4), 0.33)]
    return smooth_union(parts, 0.2)


def sdf_gradient(sdf, p, h=1e-5):
    p = np.atleast_2d(p)
    g = np.zeros_like(p)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[:, k] = (sdf(p + e) - sdf(p - e)) / (2 * h)
    return g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)


def procedural_albedo(p):
    """Smooth color pattern in [0.15, 0.85]."""
    p = np.atleast_2d(p)
    return np.stack([0.5 + 0.35 * np.sin(3.0 * p[:, 0] + 0.5),
                     0.5 + 0.35 * np.sin(3.0 * p[:, 1] + 1.7),
                     0.5 + 0.35 * np.sin(3.0 * p[:, 2] + 2.9)], axis=1)


# ---------------------------------------------------------------------------
# ground-truth rendering
# ---------------------------------------------------------------------------


def sphere_trace(sdf, origins, dirs, t_max=20.0, iters=256, tol=1e-6):
    """First hit distance along each ray (inf where the ray misses)."""
    t = np.zeros(len(origins))
    alive = np.ones(len(origins), dtype=bool)
    hit = np.zeros(len(origins), dtype=bool)
    for _ in range(iters):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        d = sdf(origins[idx] + t[idx, None] * dirs[idx])
        done = d < tol
        hit[idx[done]] = True
        alive[idx[done]] = False
        t[idx[~done]] += d[~done]
        far = t[idx] > t_max
        alive[idx[far]] = False
    t[~hit] = np.inf
    return t


@dataclass
class LightingModel:
    ambient: float = 0.35
    # fixed directional light used when no point lights are given
    direction: np.ndarray = field(default_factory=lambda: np.array([0.4, -0.7, -0.6]))
    strength: float = 0.65


def shade(sdf, x, albedo_fn, lights=None, lighting=LightingModel(), shadows=True):
    """Lambertian color at surface points; point lights fall off as 1/r^2 and
    are hard-shadowed by sphere tracing toward them."""
    n = sdf_gradient(sdf, x)
    alb = albedo_fn(x)
    if not lights:
        ldir = lighting.direction / np.linalg.norm(lighting.direction)
        cos = np.maximum(np.einsum("ij,j->i", n, -ldir), 0.0)
        return alb * (lighting.ambient + lighting.strength * cos)[:, None], np.zeros((len(x), 0), bool)
    out = alb * lighting.ambient
    occluded = np.zeros((len(x), len(lights)), dtype=bool)
    for i, light in enumerate(lights):
        d = light.position - x
        r = np.linalg.norm(d, axis=1)
        u = d / r[:, None]
        cos = np.einsum("ij,ij->i", n, u)
        vis = np.ones(len(x))
        if shadows:
            start = x + 2e-3 * n
            th = sphere_trace(sdf, start, u, t_max=float(r.max()))
            blocked = th < r - 1e-2
            vis[blocked] = 0.0
            occluded[:, i] = blocked & (cos > 0)
        out = out + alb * (np.maximum(cos, 0.0) * vis / r**2)[:, None] * light.intensity
    return out, occluded


def render_ground_truth(sdf, camera: Camera, albedo_fn=procedural_albedo, background=(0.0, 0.0, 0.0),
                        lighting=LightingModel(), shadows=True):
    """Sphere-traced image plus masks (hit, shadowed by at least one light)."""
    o, d = generate_rays(camera, camera.pixel_centers())
    t = sphere_trace(sdf, o, d)
    hit = np.isfinite(t)
    img = np.tile(np.asarray(background, dtype=float), (len(o), 1))
    shadowed = np.zeros(len(o), dtype=bool)
    if hit.any():
        x = o[hit] + t[hit, None] * d[hit]
        col, occ = shade(sdf, x, albedo_fn, camera.lights, lighting, shadows)
        img[hit] = col
        shadowed[hit] = occ.any(axis=1) if occ.size else False
    shape = (camera.height, camera.width)
    return np.clip(img, 0.0, 1.0).reshape(shape + (3,)), hit.reshape(shape), shadowed.reshape(shape)


def orbit_cameras(n, radius=3.0, fov=40.0, size=64, elevation=(-0.35, 0.6), seed=0,
                  target=(0.0, 0.0, 0.0)):
    """Cameras on a sphere around ``target``, spread by a Fibonacci spiral."""
    cams = []
    lo, hi = elevation
    for i in range(n):
        z = lo + (hi - lo) * (i + 0.5) / n
        phi = i * math.pi * (3.0 - math.sqrt(5.0)) + 0.1 * seed
        s = math.sqrt(max(0.0, 1 - z * z))
        eye = np.asarray(target) + radius * np.array([s * math.cos(phi), -z, s * math.sin(phi)])
        cams.append(Camera.look_at(eye, target, (0.0, -1.0, 0.0), fov, size, size))
    return cams


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------


def surface_mesh(sdf, bbox, resolution=96) -> TriangleMesh:
    return marching_cubes(grid_from_function(sdf, resolution, bbox), 0.0)


def sample_surface(sdf, mesh: TriangleMesh, n, rng, project=True):
    """Area-uniform surface samples snapped to the zero set, with analytic normals."""
    p = mesh.sample(n, rng)
    if project:
        for _ in range(3):
            p = p - sdf(p)[:, None] * sdf_gradient(sdf, p)
    return p, sdf_gradient(sdf, p)


def floater_clusters(centers, radius, points_each, rng):
    """Small closed spheres of points (outliers a reconstruction should remove)."""
    P, N = [], []
    for c in np.atleast_2d(centers):
        v = rng.normal(size=(points_each, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        P.append(c + radius * v)
        N.append(v)
    return np.concatenate(P), np.concatenate(N)


def noisy_cloud(sdf, bbox, n_points, rng, position_noise=0.0, normal_noise=0.0, floaters=None,
                floater_radius=0.08, floater_points=60, mesh_resolution=96):
    """Oriented cloud from the surface of ``sdf`` with Gaussian position and
    normal noise, plus optional floater clusters. Areas are estimated."""
    mesh = surface_mesh(sdf, bbox, mesh_resolution)
    P, N = sample_surface(sdf, mesh, n_points, rng)
    P = P + position_noise * rng.normal(size=P.shape)
    if normal_noise > 0:
        N = N + normal_noise * rng.normal(size=N.shape)
        N /= np.linalg.norm(N, axis=1, keepdims=True)
    if floaters is not None and len(floaters):
        fp, fn = floater_clusters(floaters, floater_radius, floater_points, rng)
        P = np.concatenate([P, fp])
        N = np.concatenate([N, fn])
    cloud = OrientedPointCloud.from_arrays(P, N)
    return estimate_area_weights(cloud)


# ---------------------------------------------------------------------------
# complete scenes
# ---------------------------------------------------------------------------


@dataclass
class SyntheticScene:
    sdf: object
    cameras: list
    images: list
    cloud: OrientedPointCloud
    bbox: tuple
    background: np.ndarray
    gt_mesh: TriangleMesh
    hit_masks: list = field(default_factory=list)
    shadow_masks: list = field(default_factory=list)


def blobby_scene(n_views=32, size=64, n_points=6000, seed=0, position_noise=0.01,
                 normal_noise=0.1, n_floaters=6, floater_offset=0.15):
    rng = np.random.default_rng(seed)
    sdf = blobby_sdf()
    bbox = (np.array([-1.2, -1.2, -1.2]), np.array([1.2, 1.2, 1.2]))
    cams = orbit_cameras(n_views, size=size, seed=seed)
    # a light background keeps floaters from hiding by turning dark
    bg = np.array([0.85, 0.85, 0.9])
    images, hits = [], []
    for c in cams:
        img, hit, _ = render_ground_truth(sdf, c, background=bg)
        images.append(img)
        hits.append(hit)
    floaters = None
    if n_floaters:
        dirs = rng.normal(size=(n_floaters, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        floaters = 0.3 * dirs
        # push each floater out until it sits just clear of the surface
        for i in range(n_floaters):
            while sdf(floaters[i][None])[0] < floater_offset:
                floaters[i] *= 1.02
    cloud = noisy_cloud(sdf, bbox, n_points, rng, position_noise, normal_noise, floaters)
    gt = surface_mesh(sdf, bbox, 160)
    return SyntheticScene(sdf, cams, images, cloud, bbox, bg, gt, hits)


def sphere_scene(n_views=16, size=48, n_points=3000, seed=0, radius=0.8, position_noise=0.0,
                 normal_noise=0.0):
    rng = np.random.default_rng(seed)
    sdf = sphere_sdf((0.0, 0.0, 0.0), radius)
    bbox = (np.full(3, -1.1), np.full(3, 1.1))
    cams = orbit_cameras(n_views, size=size, seed=seed)
    bg = np.array([0.05, 0.05, 0.08])
    images = [render_ground_truth(sdf, c, background=bg)[0] for c in cams]
    cloud = noisy_cloud(sdf, bbox, n_points, rng, position_noise, normal_noise)
    gt = surface_mesh(sdf, bbox, 128)
    return SyntheticScene(sdf, cams, images, cloud, bbox, bg, gt)


def shadow_sdf():
    return union([sphere_sdf((0.0, -0.25, 0.0), 0.35), box_sdf((0.0, 0.35, 0.0), (0.9, 0.12, 0.9))])


def random_lights(rng, n=2, intensity=1.6):
    """Point lights above the slab (negative y is up)."""
    out = []
    for _ in range(n):
        th = rng.uniform(0, 2 * np.pi)
        el = rng.uniform(0.5, 1.1)
        pos = np.array([1.6 * math.cos(th) * math.cos(el), -1.6 * math.sin(el) - 0.4,
                        1.6 * math.sin(th) * math.cos(el)])
        out.append(PointLight(pos, np.full(3, intensity)))
    return out


def shadow_scene(n_views=24, size=48, n_points=6000, seed=0, position_noise=0.01,
                 normal_noise=0.1, n_novel=4):
    """Sphere over a slab lit by two point lights whose positions change per view.

    Returns the training scene and a list of (camera, image, hit, shadow mask)
    tuples under held-out light positions.
    """
    rng = np.random.default_rng(seed)
    sdf = shadow_sdf()
    bbox = (np.array([-1.0, -0.75, -1.0]), np.array([1.0, 0.55, 1.0]))
    bg = np.array([0.05, 0.05, 0.08])
    cams = orbit_cameras(n_views, radius=3.0, size=size, elevation=(0.25, 0.85), seed=seed,
                         target=(0.0, 0.0, 0.0))
    images, hits, shadows = [], [], []
    for c in cams:
        c.lights = random_lights(rng)
        img, hit, sh = render_ground_truth(sdf, c, background=bg)
        images.append(img)
        hits.append(hit)
        shadows.append(sh)
    cloud = noisy_cloud(sdf, bbox, n_points, rng, position_noise, normal_noise, mesh_resolution=128)
    gt = surface_mesh(sdf, bbox, 160)
    scene = SyntheticScene(sdf, cams, images, cloud, bbox, bg, gt, hits, shadows)
    novel = []
    for c in orbit_cameras(n_novel, radius=3.0, size=size, elevation=(0.3, 0.8), seed=seed + 7):
        c.lights = random_lights(rng)
        img, hit, sh = render_ground_truth(sdf, c, background=bg)
        novel.append((c, img, hit, sh))
    return scene, novel


def fibonacci_sphere(n, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Near-uniform points and outward normals on a sphere."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    th = math.pi * (1 + 5**0.5) * i
    u = np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], axis=1)
    return np.asarray(center) + radius * u, u


def sphere_cloud(n, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Fibonacci sphere with equal areas summing to the sphere's area."""
    P, N = fibonacci_sphere(n, radius, center)
    return OrientedPointCloud.from_arrays(P, N, areas=np.full(n, 4 * math.pi * radius**2 / n))


def reconstruction_config(shadow_rays=False):
    """Desk-scale training config for the synthetic scenes.

    The summed per-point regularizers are weakened because a few thousand
    points and small ray batches give each point only a small share of the
    render gradient; at the default weights the geometry attributes of
    floaters stay pinned near one.
    """
    from .config import desk_preset

    cfg = desk_preset()
    cfg.loss.w_winding = 1e-6
    cfg.loss.w_normal = 1e-4
    cfg.train.shadow_rays = shadow_rays
    return cfg
