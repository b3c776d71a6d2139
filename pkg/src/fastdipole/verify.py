"""Acceptance checks against independent oracles.

Each check returns a :class:`CheckResult`; ``run_checks`` executes the
registry (optionally filtered by name substring) and reports one line per
check.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels, oracles
from .bhtree import DipoleTree
from .kernels import KernelParams
from .pointcloud import OrientedPointCloud


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    metrics: dict = field(default_factory=dict)

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


@dataclass
class Check:
    name: str
    description: str
    fn: object
    budget_s: float
    slow: bool = False


REGISTRY: dict[str, Check] = {}


def register(name, description, budget_s, slow=False):
    def deco(fn):
        REGISTRY[name] = Check(name, description, fn, budget_s, slow)
        return fn

    return deco


def run_check(name, **kwargs) -> CheckResult:
    chk = REGISTRY[name]
    t0 = time.perf_counter()
    try:
        passed, detail, metrics = chk.fn(**kwargs)
    except Exception as exc:  # a crashing check is a failing check
        passed, detail, metrics = False, f"raised {type(exc).__name__}: {exc}", {}
    dt = time.perf_counter() - t0
    if dt > chk.budget_s:
        passed = False
        detail += f"; exceeded time budget {chk.budget_s:.0f}s"
    return CheckResult(name, bool(passed), detail, dt, metrics)


def select(filter_text=None, include_slow=True):
    names = list(REGISTRY)
    if filter_text:
        keys = [f.strip() for f in filter_text.split(",") if f.strip()]
        names = [n for n in names if any(k in n for k in keys)]
    if not include_slow:
        names = [n for n in names if not REGISTRY[n].slow]
    return names


def run_checks(filter_text=None, include_slow=True, log=print) -> list[CheckResult]:
    out = []
    for name in select(filter_text, include_slow):
        res = run_check(name)
        if log is not None:
            log(res.line())
        out.append(res)
    return out


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def random_cloud(m, rng, k_appearance=0, spread=1.0):
    P = rng.uniform(-spread, spread, size=(m, 3))
    N = rng.normal(size=(m, 3))
    A = rng.uniform(0.5, 1.5, size=m) * (4.0 * spread * spread / m)
    cloud = OrientedPointCloud.from_arrays(P, N, areas=A, k_appearance=k_appearance)
    cloud.moments = rng.uniform(-1.0, 2.0, size=cloud.moments.shape)
    return cloud


def fibonacci_cloud(m, radius=1.0):
    from .synthetic import sphere_cloud

    return sphere_cloud(m, radius)


def _grad_scale(cloud, x, params, channel, radial):
    """sum_m |a_m mu_m| |grad of the kernel term|, the scale for gradient errors."""
    d = cloud.positions - x
    r = np.linalg.norm(d, axis=1)
    ok = r > 0
    w = np.abs(cloud.areas * cloud.moments[:, channel])
    if radial:
        dh = np.array([kernels.radial_weight(ri, params.width, params.code)[1] for ri in r[ok]])
        return float(np.sum(w[ok] * np.abs(dh)))
    g = kernels.grad_regularized_poisson(x[None, :], cloud.positions[ok], cloud.normals[ok], params)
    return float(np.sum(w[ok] * np.linalg.norm(np.atleast_2d(g), axis=1)))


def _rel(a, b, scale):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)) / np.maximum(scale, 1e-300)))


# ---------------------------------------------------------------------------
# kernel profile
# ---------------------------------------------------------------------------


@register("tau", "regularization profile against 40-digit reference", 60)
def check_tau():
    t = np.concatenate([[0.0], np.logspace(-6, 1, 120), np.linspace(0.05, 6.0, 120)])
    got = np.asarray(kernels.tau(t), dtype=float)
    ref = np.array([oracles.tau_reference(x) for x in t])
    rel = float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-300)))
    mono = bool(np.all(np.diff(got[np.argsort(t)]) >= -1e-15))
    bounded = bool(np.all((got >= 0) & (got <= 1 + 1e-15)))
    ok = rel <= 1e-12 and mono and bounded
    return ok, f"tau max rel err {rel:.2e}, monotone={mono}, in [0,1]={bounded}", {"rel": rel}


# ---------------------------------------------------------------------------
# Barnes-Hut
# ---------------------------------------------------------------------------


@register("bh-exact", "beta=inf primal/adjoint equal naive sums (1000 configurations)", 60)
def check_bh_exact(n_clouds=20, queries_per_cloud=50, seed=0, tol=1e-12):
    rng = np.random.default_rng(seed)
    worst_v = worst_g = worst_a = 0.0
    for _ in range(n_clouds):
        m = int(rng.integers(20, 300))
        cloud = random_cloud(m, rng, k_appearance=2)
        params = KernelParams(float(rng.uniform(0.02, 0.3)))
        tree = DipoleTree(cloud, max_leaf_size=int(rng.integers(1, 9)), beta_bh=np.inf)
        X = rng.uniform(-1.3, 1.3, size=(queries_per_cloud, 3))
        q = tree.query(X, params, n_grad=3)
        for i, x in enumerate(X):
            for c in range(3):
                radial = c > 0
                ref = oracles.naive_dipole_sum(cloud, x, params, c, radial)
                scale = oracles.naive_abs_sum(cloud, x, params, c, radial)
                worst_v = max(worst_v, _rel(q["values"][i, c], ref, scale))
                gref = oracles.naive_gradient(cloud, x, params, c, radial)
                gs = _grad_scale(cloud, x, params, c, radial)
                worst_g = max(worst_g, _rel(q["grads"][i, c], gref, gs))
        d_out = rng.normal(size=(queries_per_cloud, 3))
        d_grad = rng.normal(size=(queries_per_cloud, 3, 3))
        tree.adjoint(X, d_out, params, d_grads=d_grad)
        dm, dn = tree.flush()
        rm, rn = oracles.naive_adjoint(cloud, X, d_out, params, d_grad, radial_channels=(1, 2))
        worst_a = max(worst_a, _rel(dm, rm, np.max(np.abs(rm))), _rel(dn, rn, np.max(np.abs(rn))))
    worst = max(worst_v, worst_g, worst_a)
    detail = f"max rel err values {worst_v:.1e}, grads {worst_g:.1e}, adjoint {worst_a:.1e} (tol {tol:g})"
    return worst <= tol, detail, {"values": worst_v, "grads": worst_g, "adjoint": worst_a}


def bh_accuracy_sample(m=10_000, n_queries=1000, beta=2.0, seed=0):
    """Max and mean relative error of the beta-accelerated geometry sum over
    uniformly random points with random normals and unit moments, relative
    to the sum of absolute term magnitudes."""
    rng = np.random.default_rng(seed)
    cloud = random_cloud(m, rng)
    cloud.moments = np.ones((m, 1))
    params = KernelParams(0.05)
    tree = DipoleTree(cloud, beta_bh=beta)
    X = rng.uniform(-1.2, 1.2, size=(n_queries, 3))
    q = tree.query(X, params)
    ref = oracles.naive_dipole_sum_batch(cloud, X, params)
    scale = np.array([oracles.naive_abs_sum(cloud, x, params) for x in X])
    err = np.abs(q["values"][:, 0] - ref) / scale
    return float(err.max()), float(err.mean()), float(q["visits"].mean())


@register("bh-accuracy", "beta=2, M=10k, 1000 queries: max relative error <= 1e-3", 300)
def check_bh_accuracy(tol=1e-3):
    mx, mean, visits = bh_accuracy_sample()
    return mx <= tol, f"max rel err {mx:.2e}, mean {mean:.2e} (tol {tol:g}), {visits:.0f} nodes/query", {
        "max": mx, "mean": mean}


def visit_counts(sizes=(1_000, 10_000, 100_000), n_queries=1000, beta=2.0, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.5, 1.5, size=(n_queries, 3))
    out = []
    for m in sizes:
        cloud = fibonacci_cloud(m)
        params = KernelParams(1.5 * math.sqrt(4 * math.pi / m))
        tree = DipoleTree(cloud, beta_bh=beta)
        out.append(float(tree.query(X, params)["visits"].mean()))
    return np.array(out)


@register("bh-complexity", "mean visited nodes vs M fits exponent < 0.3", 300)
def check_bh_complexity(sizes=(1_000, 10_000, 100_000), limit=0.3):
    v = visit_counts(sizes)
    slope = float(np.polyfit(np.log(sizes), np.log(v), 1)[0])
    return slope < limit, f"visits {np.round(v, 1).tolist()}, fitted exponent {slope:.3f} (< {limit})", {
        "slope": slope, "visits": v.tolist()}


# ---------------------------------------------------------------------------
# adjoint through the full pipeline
# ---------------------------------------------------------------------------


def toy_scene(seed=0, shadows=False, variant="direct-rgb", beta_bh=2.0):
    """Ten-point scene, a camera-like ray bundle, frozen samples and targets."""
    from .config import Config
    from .optimizer import build_model
    from .renderer import PointLight

    rng = np.random.default_rng(seed)
    P = rng.normal(scale=0.3, size=(10, 3))
    N = P + 0.2 * rng.normal(size=(10, 3))
    cloud = OrientedPointCloud.from_arrays(P, N, areas=np.full(10, 0.08))
    cfg = Config()
    cfg.head.variant = variant
    cfg.head.hidden = [8]
    cfg.head.k_features = 4
    cfg.train.shadow_rays = shadows
    cfg.tree.beta_bh = beta_bh
    cfg.tree.max_leaf_size = 2
    cfg.field.lambda_init = 5.0
    cfg.field.epsilon = 0.15
    model = build_model(cloud, cfg, background=np.array([0.2, 0.3, 0.4]),
                        bbox=(np.full(3, -1.0), np.full(3, 1.0)), seed=seed)
    model.cloud.moments[:, 0] += 0.1 * rng.normal(size=10)
    model.cloud.normals = model.cloud.normals + 0.05 * rng.normal(size=(10, 3))
    model.cloud.normals /= np.linalg.norm(model.cloud.normals, axis=1, keepdims=True)
    model.refresh()
    B, J = 12, 40
    origins = np.tile([0.0, 0.0, -2.5], (B, 1)) + 0.1 * rng.normal(size=(B, 3))
    targets = rng.uniform(-0.4, 0.4, size=(B, 3))
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t = np.linspace(1.5, 3.5, J + 1)
    tm = np.tile(0.5 * (t[1:] + t[:-1]), (B, 1))
    deltas = np.tile(np.diff(t), (B, 1))
    mask = np.ones((B, J), dtype=bool)
    gt = rng.uniform(0, 1, size=(B, 3))
    lights = [PointLight([1.5, -1.5, -1.0], [2.0, 2.0, 2.0]), PointLight([-1.5, -1.0, -1.5], 1.5)]
    return model, cfg, origins, dirs, gt, (tm, deltas, mask), lights


def _record_adjoint(tree):
    calls = []
    orig = tree.adjoint

    def rec(X, d_vals, params, d_grads=None, beta=None):
        calls.append((np.array(X), np.array(d_vals), None if d_grads is None else np.array(d_grads)))
        return orig(X, d_vals, params, d_grads=d_grads, beta=beta)

    tree.adjoint = rec
    return calls


def _total_loss(model, origins, dirs, gt, samples, cfg, lights, shadows):
    from .optimizer import LossWeights, compute_losses
    from .renderer import render_rays

    model.refresh()
    colors, cache = render_rays(model, origins, dirs, cfg.sampling, lights=lights, shadows=shadows,
                                keep=True, samples=samples)
    total, _ = compute_losses(model, colors, gt, LossWeights.from_config(cfg.loss), cache.p)
    model.tree.flush()
    return total


def _fd_directional(model, groups, loss_fn, grads, rng, h=1e-6):
    """Central differences along random directions for each parameter group."""
    out = {}
    for name, (get, put) in groups.items():
        base = get().copy()
        v = rng.normal(size=base.shape)
        if name == "normals":
            v -= np.einsum("ij,ij->i", v, base)[:, None] * base
        analytic = float(np.sum(grads[name] * v))
        put(base + h * v)
        fp = loss_fn()
        put(base - h * v)
        fm = loss_fn()
        put(base)
        fd = (fp - fm) / (2 * h)
        out[name] = (analytic, fd, abs(analytic - fd) / max(abs(fd), abs(analytic), 1e-12))
    return out


def adjoint_errors(shadows=False, variant="direct-rgb", seed=0):
    from .optimizer import LossWeights, loss_and_grads

    model, cfg, origins, dirs, gt, samples, lights = toy_scene(seed, shadows, variant)
    # stage-two flush vs the exact adjoint of the same recorded queries, beta = inf
    model.tree.beta_bh = np.inf
    calls = _record_adjoint(model.tree)
    _, _, g = loss_and_grads(model, origins, dirs, gt, LossWeights(1.0, 0.01, 0.0, 0.0),
                             cfg.sampling, lights, shadows, samples, refresh=False)
    K = model.tree.n_channels
    rm = np.zeros_like(g["moments"])
    rn = np.zeros_like(g["normals"])
    for X, dv, dg in calls:
        a, b = oracles.naive_adjoint(model.cloud, X, dv, model.kernel, dg,
                                     radial_channels=tuple(range(1, K)))
        rm += a
        rn += b
    flush_err = max(_rel(g["moments"], rm, np.max(np.abs(rm))), _rel(g["normals"], rn, np.max(np.abs(rn))))
    # full-loss finite differences at the configured beta
    model, cfg, origins, dirs, gt, samples, lights = toy_scene(seed, shadows, variant)
    weights = LossWeights.from_config(cfg.loss)
    _, _, g = loss_and_grads(model, origins, dirs, gt, weights, cfg.sampling, lights, shadows, samples)
    cl = model.cloud
    head = model.head

    def setter(attr):
        def put(v):
            setattr(cl, attr, v)
        return put

    groups = {
        "geometry": (lambda: cl.moments[:, :1], lambda v: cl.moments.__setitem__((slice(None), slice(0, 1)), v)),
        "appearance": (lambda: cl.moments[:, 1:], lambda v: cl.moments.__setitem__((slice(None), slice(1, None)), v)),
        "normals": (lambda: cl.normals, setter("normals")),
        "log_lambda": (lambda: np.array([model.log_lambda]), lambda v: setattr(model, "log_lambda", float(v[0]))),
        "log_epsilon": (lambda: np.array([model.log_epsilon]), lambda v: setattr(model, "log_epsilon", float(v[0]))),
    }
    for k in head.params:
        groups[f"head/{k}"] = (lambda k=k: head.params[k], lambda v, k=k: head.params.__setitem__(k, v))
    grads = {"geometry": g["moments"][:, :1], "appearance": g["moments"][:, 1:], "normals": g["normals"],
             "log_lambda": np.array([g["log_lambda"]]), "log_epsilon": np.array([g["log_epsilon"]])}
    for k, v in g["head"].items():
        grads[f"head/{k}"] = v
    fd = _fd_directional(model, groups, lambda: _total_loss(model, origins, dirs, gt, samples, cfg,
                                                            lights, shadows),
                         grads, np.random.default_rng(seed + 1))
    return flush_err, fd


@register("adjoint", "flushed gradients vs naive adjoint and full-loss finite differences", 120)
def check_adjoint(tol_flush=1e-6, tol_fd=1e-3):
    lines = []
    worst_flush = 0.0
    worst_fd = 0.0
    for shadows, variant in ((False, "direct-rgb"), (True, "direct-rgb"), (False, "tiny-mlp")):
        fe, fd = adjoint_errors(shadows, variant)
        worst_flush = max(worst_flush, fe)
        w = max(v[2] for v in fd.values())
        worst_fd = max(worst_fd, w)
        lines.append(f"{variant}{'+shadows' if shadows else ''}: flush {fe:.1e}, fd {w:.1e}")
    ok = worst_flush <= tol_flush and worst_fd <= tol_fd
    return ok, "; ".join(lines), {"flush": worst_flush, "fd": worst_fd}


# ---------------------------------------------------------------------------
# propositions
# ---------------------------------------------------------------------------


@register("psr", "grid Poisson solve equals the regularized winding number", 300)
def check_psr(m=4000, resolution=64, epsilon=0.15, half=1.3):
    from .bhtree import DipoleTree

    cloud = fibonacci_cloud(m)
    params = KernelParams(epsilon)
    bbox = (np.full(3, -half), np.full(3, half))
    grid = oracles.psr_grid_solve(cloud, params, resolution, bbox)
    pts = grid.points()
    chi = grid.values.ravel()
    # stay clear of the zero-boundary layer
    inner = np.all(np.abs(pts) <= 0.75 * half, axis=1)
    w = oracles.naive_dipole_sum_batch(cloud, pts[inner], params)
    corr = float(np.corrcoef(chi[inner], w)[0, 1])
    linf = float(np.max(np.abs(chi[inner] - w)))
    ok = corr >= 0.99 and linf <= 0.05
    return ok, f"correlation {corr:.6f} (>= 0.99), L_inf {linf:.4f} (<= 0.05)", {"corr": corr, "linf": linf}


@register("mc", "stochastic point cloud Monte Carlo matches the regularized dipole sum", 180)
def check_mc(m=50, trials=20_000, seed=0, n_queries=6):
    rng = np.random.default_rng(seed)
    P = rng.normal(scale=0.5, size=(m, 3))
    N = rng.normal(size=(m, 3))
    cloud = OrientedPointCloud.from_arrays(P, N, areas=rng.uniform(0.02, 0.06, size=m))
    cloud.moments = rng.uniform(0.1, 1.0, size=(m, 1))
    params = KernelParams(0.2)
    X = rng.normal(scale=0.6, size=(n_queries, 3))
    mean, se = oracles.stochastic_winding_mc(cloud, params, X, trials, rng)
    ref = np.array([oracles.naive_dipole_sum(cloud, x, params) for x in X])
    z = np.abs(mean - ref) / se
    zero = cloud.copy()
    zero.moments = np.zeros((m, 1))
    mean0, se0 = oracles.stochastic_winding_mc(zero, params, X, trials, rng)
    z0 = np.abs(mean0) / se0
    ok = bool(np.all(z <= 3.0) and np.all(z0 <= 3.0))
    return ok, f"max |z| {z.max():.2f}, zero-moment max |z| {z0.max():.2f} (<= 3)", {
        "z": z.tolist(), "z0": z0.tolist()}


@register("gauss", "regularized winding number of a 16k sphere cloud", 60)
def check_gauss(m=16_000):
    cloud = fibonacci_cloud(m)
    params = KernelParams(1.5 * math.sqrt(4 * math.pi / m))
    tree = DipoleTree(cloud)
    rng = np.random.default_rng(0)
    u = rng.normal(size=(64, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    center = float(tree.geometry(np.zeros((1, 3)), params)[0])
    surf = tree.geometry(u, params)
    far = tree.geometry(3.0 * u, params)
    ok = 0.9 <= center <= 1.1 and np.all((surf >= 0.4) & (surf <= 0.6)) and np.all(np.abs(far) < 0.05)
    return bool(ok), (f"center {center:.4f}, surface [{surf.min():.4f}, {surf.max():.4f}], "
                      f"3 radii max |w| {np.abs(far).max():.2e}"), {"center": center}


@register("ablation", "regularized kernel meshes a noisy sphere better than the desingularized one", 180)
def check_ablation(m=3000, noise=0.02, resolution=64, seed=0):
    from .meshing import grid_from_function, marching_cubes

    rng = np.random.default_rng(seed)
    cloud = fibonacci_cloud(m)
    cloud.positions = cloud.positions + noise * rng.normal(size=cloud.positions.shape)
    width = 1.5 * math.sqrt(4 * math.pi / m)
    tree = DipoleTree(cloud)
    bbox = (np.full(3, -1.3), np.full(3, 1.3))
    rms = {}
    for name, params in (("regularized", KernelParams(width)),
                         ("desingularized", KernelParams(0.0, kind="desingularized", cutoff=width))):
        grid = grid_from_function(lambda p: 0.5 - tree.geometry(p, params), resolution, bbox)
        mesh = marching_cubes(grid, 0.0)
        r = np.linalg.norm(mesh.vertices, axis=1) - 1.0
        rms[name] = float(np.sqrt(np.mean(r * r)))
    ok = rms["regularized"] < rms["desingularized"]
    return ok, f"vertex RMS regularized {rms['regularized']:.4f} < desingularized {rms['desingularized']:.4f}", rms


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------


def quadrature_errors(counts=(16, 64, 256), reference=4096, seed=0):
    from .fields import SceneModel
    from .renderer import RadianceHead, render_rays, ray_box

    rng = np.random.default_rng(seed)
    cloud = fibonacci_cloud(2000, 0.7)
    cloud.moments = np.concatenate([np.ones((2000, 1)), rng.normal(size=(2000, 3))], axis=1)
    model = SceneModel.create(cloud, 0.1, 20.0, RadianceHead("direct-rgb", 3),
                              np.array([0.1, 0.2, 0.3]), (np.full(3, -1.0), np.full(3, 1.0)))
    B = 16
    origins = np.tile([0.0, 0.0, -3.0], (B, 1))
    targets = rng.uniform(-0.8, 0.8, size=(B, 3))
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    tn, tf, _ = ray_box(origins, dirs, np.full(3, -1.0), np.full(3, 1.0))

    def render(J):
        u = np.linspace(0.0, 1.0, J + 1)
        edges = tn[:, None] + u[None, :] * (tf - tn)[:, None]
        t = 0.5 * (edges[:, 1:] + edges[:, :-1])
        return render_rays(model, origins, dirs, None, samples=(t, np.diff(edges, axis=1),
                                                                np.ones((B, J), bool)))[0]

    ref = render(reference)
    return np.array([np.max(np.abs(render(J) - ref), axis=0) for J in counts])


@register("quadrature", "volume-rendering quadrature converges to the 4096-sample reference", 60)
def check_quadrature(counts=(16, 64, 256), tol=1e-3):
    err = quadrature_errors(counts)
    worst = err.max(axis=1)
    mono = bool(np.all(np.diff(err, axis=0) <= 0))
    ok = mono and bool(np.all(err[-1] <= tol))
    return ok, (f"max error per J {dict(zip(counts, np.round(worst, 6).tolist()))}, "
                f"monotone={mono}, final per-channel max {err[-1].max():.2e} (<= {tol:g})"), {
        "errors": err.tolist()}


# ---------------------------------------------------------------------------
# synthetic end-to-end runs
# ---------------------------------------------------------------------------


def reconstruction_run(scene, cfg, iters, resolution=128, rng_seed=0, metrics_path=None):
    from .meshing import extract_mesh
    from .optimizer import Trainer, build_model

    model = build_model(scene.cloud, cfg, background=scene.background, bbox=scene.bbox)
    c0 = oracles.chamfer_distance(extract_mesh(model, resolution, scene.bbox), scene.gt_mesh, 20000,
                                  np.random.default_rng(rng_seed))
    trainer = Trainer(model, scene.cameras, scene.images, cfg, metrics_path)
    hist = trainer.run(iters)
    c1 = oracles.chamfer_distance(extract_mesh(model, resolution, scene.bbox), scene.gt_mesh, 20000,
                                  np.random.default_rng(rng_seed))
    return model, c0, c1, np.array([h["render"] for h in hist])


@register("e2e", "blobby scene: 1000 iterations reduce Chamfer to <= 0.7x initial", 1200, slow=True)
def check_e2e(iters=1000, window=200, ratio=0.7):
    from .synthetic import blobby_scene, reconstruction_config

    scene = blobby_scene(n_views=32, size=64)
    _, c0, c1, render = reconstruction_run(scene, reconstruction_config(), iters)
    means = [float(render[i:i + window].mean()) for i in range(0, iters, window)]
    mono = all(b < a for a, b in zip(means, means[1:]))
    ok = c1 <= ratio * c0 and mono
    return ok, (f"Chamfer {c0:.5f} -> {c1:.5f} (ratio {c1 / c0:.3f} <= {ratio}), "
                f"L1 window means {np.round(means, 5).tolist()} decreasing={mono}"), {
        "c0": c0, "c1": c1, "windows": means}


@register("shadow", "shadow rays: Chamfer and novel-light shadow L1 no worse than without", 1800, slow=True)
def check_shadow(iters=1000):
    from .renderer import render_image
    from .synthetic import reconstruction_config, shadow_scene

    scene, novel = shadow_scene(n_views=24, size=48)
    res = {}
    for shadows in (False, True):
        cfg = reconstruction_config(shadow_rays=shadows)
        model, _, c1, _ = reconstruction_run(scene, cfg, iters)
        err, count = 0.0, 0
        for cam, img, _hit, smask in novel:
            out = render_image(model, cam, cfg.sampling, shadows=shadows)
            err += float(np.abs(out - img).mean(axis=2)[smask].sum())
            count += int(smask.sum())
        res[shadows] = (c1, err / max(count, 1))
    ok = res[True][0] <= res[False][0] and res[True][1] < res[False][1]
    return ok, (f"Chamfer shadows {res[True][0]:.5f} vs plain {res[False][0]:.5f}; "
                f"shadowed-pixel L1 {res[True][1]:.4f} vs {res[False][1]:.4f}"), {
        "chamfer": [res[False][0], res[True][0]], "l1": [res[False][1], res[True][1]]}
