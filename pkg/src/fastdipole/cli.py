"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error (bad paths, malformed
files), 3 numerical failure (including failed verification checks).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("fastdipole")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# shared option handling
# ---------------------------------------------------------------------------


def _load_config(args):
    from .config import Config, desk_preset

    cfg = Config.load(args.config) if getattr(args, "config", None) else desk_preset()
    if getattr(args, "seed", None) is not None:
        cfg.train.rng_seed = args.seed
    if getattr(args, "beta_bh", None) is not None:
        cfg.tree.beta_bh = args.beta_bh
    if getattr(args, "epsilon", None) is not None:
        cfg.field.epsilon = args.epsilon
    if getattr(args, "iters", None) is not None:
        cfg.train.total_iters = args.iters
    if getattr(args, "resolution", None) is not None:
        cfg.mesh.resolution = args.resolution
    if getattr(args, "head", None) is not None:
        cfg.head.variant = args.head
    if getattr(args, "shadow_rays", False):
        cfg.train.shadow_rays = True
    cfg.validate()
    return cfg


def _set_workers(n):
    import numba

    # the installed TBB is too old for numba; pick the portable layer quietly
    numba.config.THREADING_LAYER = "workqueue"
    avail = numba.config.NUMBA_NUM_THREADS
    numba.set_num_threads(max(1, min(n or avail, avail)))


def _common(p, training=False):
    p.add_argument("--config", help="JSON config file (defaults to the desk preset)")
    p.add_argument("--seed", type=int, default=None, help="random seed")
    p.add_argument("--workers", type=int, default=None, help="worker threads (default: all)")
    p.add_argument("--beta-bh", type=float, default=None, help="Barnes-Hut far-field threshold")
    p.add_argument("--epsilon", type=float, default=None, help="fixed regularization width")
    p.add_argument("--resolution", type=int, default=None, help="mesh extraction grid resolution")
    if training:
        p.add_argument("--iters", type=int, default=None, help="training iterations")
        p.add_argument("--shadow-rays", action="store_true", help="direct illumination with shadow rays")
        p.add_argument("--head", choices=["direct-rgb", "tiny-mlp"], default=None)


def _mesh_bbox(cloud, cfg):
    return cloud.bbox(cfg.mesh.bbox_inflate)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_mesh(args) -> int:
    from .meshing import export_obj, extract_mesh
    from .optimizer import build_model
    from .pointcloud import load_ply

    cfg = _load_config(args)
    cloud = load_ply(args.cloud)
    model = build_model(cloud, cfg)
    model.cloud.moments[:, 0] = 1.0
    model.refresh()
    mesh = extract_mesh(model, cfg.mesh.resolution, _mesh_bbox(model.cloud, cfg))
    export_obj(mesh, args.out)
    print(f"wrote {args.out}: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles "
          f"(epsilon {model.epsilon:.4g})")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .meshing import export_obj, extract_mesh
    from .optimizer import Trainer, build_model, save_checkpoint
    from .pointcloud import load_ply
    from .renderer import load_scene

    cfg = _load_config(args)
    scene = load_scene(args.scene)
    cloud = load_ply(scene.point_cloud)
    images = [scene.image(i) for i in range(len(scene.cameras))]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    model = build_model(cloud, cfg, background=scene.background, bbox=scene.bbox)
    mesh_bbox = _mesh_bbox(model.cloud, cfg)
    trainer = Trainer(model, scene.cameras, images, cfg, metrics_path=out / "metrics.csv")
    every = cfg.train.checkpoint_every
    t0 = time.perf_counter()

    def progress(tr, row):
        if every and tr.iteration % every == 0:
            save_checkpoint(out / f"checkpoint_{tr.iteration:06d}.npz", tr.model, tr.iteration, cfg,
                            tr.adam)
        if tr.iteration % 50 == 0:
            log.info("iter %d loss %.5f render %.5f points %d", tr.iteration, row["loss"],
                     row["render"], row["n_points"])

    trainer.run(cfg.train.total_iters, callback=progress)
    if trainer.history and not any(r["accepted"] for r in trainer.history):
        raise NumericalFailure("every training step was rejected (non-finite loss)")
    save_checkpoint(out / "checkpoint.npz", model, trainer.iteration, cfg, trainer.adam)
    mesh = extract_mesh(model, cfg.mesh.resolution, mesh_bbox)
    export_obj(mesh, out / "mesh.obj")
    print(f"trained {trainer.iteration} iterations in {time.perf_counter() - t0:.1f}s; "
          f"wrote {out / 'mesh.obj'} ({len(mesh.triangles)} triangles)")
    return EXIT_OK


def _read_camera(path, view):
    from .renderer import SceneError, load_scene

    data = json.loads(Path(path).read_text())
    if isinstance(data, dict) and "cameras" in data:
        scene = load_scene(path)
        if not 0 <= view < len(scene.cameras):
            raise SceneError(f"--view {view} out of range (scene has {len(scene.cameras)} cameras)")
        return scene.cameras[view]
    # a bare camera object: wrap it in a one-camera scene for validation
    tmp = {"format_version": 1, "point_cloud": "", "cameras": [data]}
    import tempfile

    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as fh:
        json.dump(tmp, fh)
    try:
        return load_scene(fh.name).cameras[0]
    finally:
        os.unlink(fh.name)


def cmd_render(args) -> int:
    from .config import desk_preset
    from .optimizer import load_checkpoint
    from .renderer import render_image, save_png, write_pfm

    model, _, cfg = load_checkpoint(args.checkpoint)
    cfg = cfg or desk_preset()
    cam = _read_camera(args.camera, args.view)
    shadows = bool(model.head.albedo) and bool(cam.lights)
    img = render_image(model, cam, cfg.sampling, shadows=shadows)
    if not np.all(np.isfinite(img)):
        raise NumericalFailure("rendered image contains non-finite values")
    save_png(args.out, img)
    if args.pfm:
        write_pfm(args.pfm, img)
    print(f"wrote {args.out} ({cam.width}x{cam.height})")
    return EXIT_OK


def _parse_list(text, conv):
    return [conv(v) for v in text.split(",") if v.strip()]


def bench_rows(cloud=None, sizes=(1000, 10000), betas=(1.0, 2.0, 4.0, math.inf), n_queries=1000,
               seed=0):
    """Naive vs accelerated geometry sums for each (M, beta)."""
    from . import oracles
    from .bhtree import DipoleTree
    from .kernels import KernelParams
    from .synthetic import sphere_cloud

    rng = np.random.default_rng(seed)
    rows = []
    warm = sphere_cloud(16)
    oracles.naive_dipole_sum_batch(warm, np.zeros((1, 3)), KernelParams(0.1))
    for m in sizes:
        if cloud is None:
            c = sphere_cloud(m)
        else:
            idx = np.sort(rng.choice(len(cloud), size=min(m, len(cloud)), replace=False))
            c = cloud.copy()
            c.positions, c.normals, c.areas = cloud.positions[idx], cloud.normals[idx], cloud.areas[idx]
            c.moments = np.ones((len(idx), 1))
            c.initial_normals = c.normals.copy()
        lo, hi = c.bbox(0.1)
        X = rng.uniform(lo, hi, size=(n_queries, 3))
        from .pointcloud import mean_spacing

        params = KernelParams(1.5 * mean_spacing(c))
        t0 = time.perf_counter()
        ref = oracles.naive_dipole_sum_batch(c, X, params)
        t_naive = time.perf_counter() - t0
        scale = np.array([oracles.naive_abs_sum(c, x, params) for x in X])
        for beta in betas:
            t0 = time.perf_counter()
            tree = DipoleTree(c, beta_bh=beta)
            t_build = time.perf_counter() - t0
            t0 = time.perf_counter()
            q = tree.query(X, params)
            t_fast = time.perf_counter() - t0
            err = float(np.max(np.abs(q["values"][:, 0] - ref) / scale))
            rows.append({"M": len(c), "beta": beta, "naive_s": t_naive, "build_s": t_build,
                         "tree_s": t_fast, "max_rel_error": err,
                         "mean_visits": float(q["visits"].mean())})
    return rows


def cmd_bench(args) -> int:
    from .pointcloud import load_ply

    cloud = load_ply(args.cloud) if args.cloud else None
    rows = bench_rows(cloud, _parse_list(args.sizes, int), _parse_list(args.betas, float),
                      args.queries, args.seed or 0)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    names = verify.select(args.filter, include_slow=not args.quick)
    if not names:
        raise UsageError(f"no checks match filter {args.filter!r}; available: {', '.join(verify.REGISTRY)}")
    results = verify.run_checks(args.filter, include_slow=not args.quick)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_synth(args) -> int:
    from . import synthetic as S
    from .meshing import export_obj
    from .pointcloud import save_ply
    from .renderer import save_png, save_scene

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed or 0
    if args.kind == "blobby":
        sc = S.blobby_scene(n_views=args.views, size=args.size, n_points=args.points, seed=seed)
    elif args.kind == "sphere":
        sc = S.sphere_scene(n_views=args.views, size=args.size, n_points=args.points, seed=seed,
                            position_noise=0.01, normal_noise=0.1)
    else:
        sc, _ = S.shadow_scene(n_views=args.views, size=args.size, n_points=args.points, seed=seed)
    for i, (cam, img) in enumerate(zip(sc.cameras, sc.images)):
        cam.image = f"view_{i:03d}.png"
        save_png(out / cam.image, img)
    save_ply(sc.cloud, out / "cloud.ply")
    export_obj(sc.gt_mesh, out / "ground_truth.obj")
    save_scene(out / "scene.json", sc.cameras, "cloud.ply", sc.background, sc.bbox)
    print(f"wrote {args.kind} scene with {len(sc.cameras)} views and {len(sc.cloud)} points to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


class NumericalFailure(RuntimeError):
    pass


def build_parser():
    p = _Parser(prog="fastdipole", description="Regularized dipole sums for point-based reconstruction.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    m = sub.add_parser("mesh", help="mesh a point cloud through its regularized winding number")
    m.add_argument("cloud")
    m.add_argument("out")
    _common(m)
    m.set_defaults(func=cmd_mesh)

    r = sub.add_parser("reconstruct", help="optimize point attributes against posed images")
    r.add_argument("scene")
    r.add_argument("out")
    _common(r, training=True)
    r.set_defaults(func=cmd_reconstruct)

    rd = sub.add_parser("render", help="render a checkpoint from a camera")
    rd.add_argument("checkpoint")
    rd.add_argument("camera", help="scene JSON (with --view) or a single camera JSON object")
    rd.add_argument("out")
    rd.add_argument("--view", type=int, default=0)
    rd.add_argument("--pfm", default=None, help="also write a float PFM image")
    rd.add_argument("--seed", type=int, default=None)
    rd.add_argument("--workers", type=int, default=None)
    rd.set_defaults(func=cmd_render)

    b = sub.add_parser("bench", help="naive vs Barnes-Hut timing and accuracy table")
    b.add_argument("--cloud", default=None, help="PLY to subsample (default: Fibonacci spheres)")
    b.add_argument("--sizes", default="1000,10000")
    b.add_argument("--betas", default="1,2,4,inf")
    b.add_argument("--queries", type=int, default=1000)
    b.add_argument("--out", default=None, help="CSV output path")
    b.add_argument("--seed", type=int, default=None)
    b.add_argument("--workers", type=int, default=None)
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("verify", help="run the acceptance checks")
    v.add_argument("--filter", default=None, help="comma-separated substrings of check names")
    v.add_argument("--quick", action="store_true", help="skip the synthetic training runs")
    v.add_argument("--workers", type=int, default=None)
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("synth", help="write a synthetic scene (images, cloud, scene JSON)")
    s.add_argument("kind", choices=["blobby", "sphere", "shadow"])
    s.add_argument("out")
    s.add_argument("--views", type=int, default=32)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--points", type=int, default=6000)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    from .config import ConfigError
    from .oracles import SolverError
    from .optimizer import CheckpointVersionError, NumericalError
    from .pointcloud import EmptyCloudError, PLYParseError
    from .renderer import SceneError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        _set_workers(getattr(args, "workers", None))
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, SceneError, EmptyCloudError, PLYParseError, CheckpointVersionError,
            FileNotFoundError, IsADirectoryError, PermissionError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalFailure, NumericalError, SolverError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
