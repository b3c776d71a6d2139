"""Inverse rendering: losses, gradients, Adam and point growing.

One training step refreshes the node moments, renders a random ray batch,
backpropagates the losses through the quadrature and the attenuation into
adjoint tree queries, flushes the node gradients to the points and applies
Adam. Point positions and areas never move; normals are updated in their
tangent plane and renormalized.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bhtree import DipoleTree
from .config import Config, LossConfig
from .fields import SceneModel
from .pointcloud import (OrientedPointCloud, estimate_area_weights, initial_moments, knn_batch,
                         mean_spacing)
from .renderer import (RadianceHead, generate_rays, model_bounds, ray_box, ray_entropy,
                       ray_entropy_grad, render_backward, render_rays, sample_rays)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    pass


class CheckpointVersionError(ValueError):
    pass


@dataclass
class LossWeights:
    w_render: float = 1.0
    w_entropy: float = 0.01
    w_winding: float = 0.001
    w_normal: float = 0.01

    def __post_init__(self):
        if min(self.w_render, self.w_entropy, self.w_winding, self.w_normal) < 0:
            raise ValueError("loss weights must be nonnegative")

    @classmethod
    def from_config(cls, c: LossConfig):
        return cls(c.w_render, c.w_entropy, c.w_winding, c.w_normal)


def compute_losses(model: SceneModel, colors, gt_colors, weights: LossWeights, p=None):
    """Weighted total loss and its per-term breakdown.

    ``p`` holds the per-ray free-flight weights (B, J); the entropy term is
    zero when it is omitted.
    """
    colors = np.asarray(colors, dtype=float)
    gt = np.asarray(gt_colors, dtype=float)
    render = float(np.mean(np.abs(colors - gt))) if colors.size else 0.0
    entropy = float(np.mean(ray_entropy(p))) if p is not None and len(p) else 0.0
    beta = model.cloud.moments[:, 0]
    winding = float(np.sum((beta - 1.0) ** 2))
    normal = float(np.sum((model.cloud.normals - model.cloud.initial_normals) ** 2))
    total = (weights.w_render * render + weights.w_entropy * entropy
             + weights.w_winding * winding + weights.w_normal * normal)
    return total, {"render": render, "entropy": entropy, "winding": winding, "normal": normal}


def loss_and_grads(model: SceneModel, origins, dirs, gt, weights: LossWeights, sampling,
                   lights=None, shadows=False, samples=None, refresh=True):
    """Forward render, losses and full gradients of every learnable group.

    Returns (total, breakdown, grads); grads is None when the loss is not finite.
    """
    if refresh:
        model.refresh()
    colors, cache = render_rays(model, origins, dirs, sampling, lights=lights, shadows=shadows,
                                keep=True, samples=samples)
    total, parts = compute_losses(model, colors, gt, weights, cache.p)
    if not np.isfinite(total):
        model.tree.flush()
        return total, parts, None
    B = len(origins)
    d_color = weights.w_render * np.sign(colors - gt) / (3.0 * B)
    d_p = weights.w_entropy * ray_entropy_grad(cache.p) / B
    g = render_backward(model, cache, d_color, d_p)
    d_mom, d_nrm = model.tree.flush()
    cl = model.cloud
    d_mom[:, 0] += 2.0 * weights.w_winding * (cl.moments[:, 0] - 1.0)
    d_nrm += 2.0 * weights.w_normal * (cl.normals - cl.initial_normals)
    g["moments"] = d_mom
    g["normals"] = d_nrm
    return total, parts, g


def lr_schedule(it, warmup_iters, total_iters):
    """Linear warmup to 1, then cosine decay to 0 at ``total_iters``."""
    if it < warmup_iters:
        return it / warmup_iters
    if total_iters <= warmup_iters:
        return 1.0 if it <= warmup_iters else 0.0
    progress = min(1.0, (it - warmup_iters) / (total_iters - warmup_iters))
    return 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, name, value, grad, lr):
        """Return the updated value (a new array); ``lr == 0`` returns ``value`` untouched."""
        if lr == 0.0:
            return value
        grad = np.asarray(grad, dtype=float)
        if name not in self.m or self.m[name].shape != grad.shape:
            self.m[name] = np.zeros_like(grad)
            self.v[name] = np.zeros_like(grad)
            self.t[name] = 0
        self.t[name] += 1
        t = self.t[name]
        m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
        v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad * grad
        mhat = m / (1 - self.beta1**t)
        vhat = v / (1 - self.beta2**t)
        return value - lr * mhat / (np.sqrt(vhat) + self.eps)

    def grow(self, name, extra_rows):
        """Extend per-row state with zeros after new points were added."""
        for st in (self.m, self.v):
            if name in st:
                pad = np.zeros((extra_rows,) + st[name].shape[1:])
                st[name] = np.concatenate([st[name], pad])

    def state(self):
        out = {}
        for k in self.m:
            out[f"adam_m/{k}"] = self.m[k]
            out[f"adam_v/{k}"] = self.v[k]
            out[f"adam_t/{k}"] = np.array(self.t[k])
        return out

    def load_state(self, data):
        for key in data:
            if key.startswith("adam_m/"):
                k = key[7:]
                self.m[k] = np.array(data[key])
                self.v[k] = np.array(data[f"adam_v/{k}"])
                self.t[k] = int(data[f"adam_t/{k}"])


def apply_update(model: SceneModel, adam: Adam, grads, cfg: Config, mult: float):
    tc = cfg.train
    lp, lh, ls = tc.lr_points * mult, tc.lr_head * mult, tc.lr_scalars * mult
    cl = model.cloud
    cl.moments = adam.step("moments", cl.moments, grads["moments"], lp)
    if lp > 0:
        n = cl.normals
        dn = grads["normals"]
        dn = dn - np.einsum("ij,ij->i", dn, n)[:, None] * n
        n_new = adam.step("normals", n, dn, lp)
        norm = np.linalg.norm(n_new, axis=1, keepdims=True)
        cl.normals = np.where(norm > 0, n_new / np.where(norm > 0, norm, 1.0), n)
    head = model.head
    for k, gk in grads["head"].items():
        head.params[k] = adam.step(f"head/{k}", head.params[k], gk, lh)
    model.background = adam.step("background", model.background, grads["background"], lh)
    if cfg.field.learn_lambda:
        model.log_lambda = float(adam.step("log_lambda", np.array(model.log_lambda),
                                           grads["log_lambda"], ls))
    if cfg.field.learn_epsilon:
        model.log_epsilon = float(adam.step("log_epsilon", np.array(model.log_epsilon),
                                            grads["log_epsilon"], ls))


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------


def n_appearance_channels(cfg: Config) -> int:
    if cfg.head.variant == "direct-rgb":
        return 6 if cfg.train.shadow_rays else 3
    return cfg.head.k_features


def build_model(cloud: OrientedPointCloud, cfg: Config, background=None, bbox=None,
                seed=None) -> SceneModel:
    """Scene model with moments, head and global scalars initialized from ``cfg``."""
    seed = cfg.train.rng_seed if seed is None else seed
    k = n_appearance_channels(cfg)
    cloud = cloud.copy()
    if cloud.moments.shape[1] != k + 1:
        mom = initial_moments(len(cloud), k, seed)
        mom[:, 0] = cloud.moments[:, 0]
        cloud.moments = mom
    eps = cfg.field.epsilon if cfg.field.epsilon > 0 else cfg.field.epsilon_scale * mean_spacing(cloud)
    head = RadianceHead(cfg.head.variant, k_features=k, hidden=cfg.head.hidden,
                        albedo=cfg.train.shadow_rays, sh_degree=cfg.head.sh_degree,
                        init_scale=cfg.head.init_scale, seed=seed)
    t = cfg.tree
    return SceneModel.create(cloud, eps, cfg.field.lambda_init, head, background, bbox,
                             t.max_leaf_size, t.max_depth, t.beta_bh, t.appearance_kernel)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class Trainer:
    """Training loop state over a set of posed images."""

    def __init__(self, model: SceneModel, cameras, images, cfg: Config, metrics_path=None):
        self.model = model
        self.cameras = cameras
        self.images = [np.asarray(im, dtype=float).reshape(-1, 3) for im in images]
        self.cfg = cfg
        self.weights = LossWeights.from_config(cfg.loss)
        self.adam = Adam(cfg.train.adam_beta1, cfg.train.adam_beta2, cfg.train.adam_eps)
        self.rng = np.random.default_rng(cfg.train.rng_seed)
        self.iteration = 0
        self.history = []
        self.n_original = len(model.cloud)
        self.n_grown = 0
        self.metrics_path = Path(metrics_path) if metrics_path else None
        self._csv = None

    def sample_batch(self, n, by_camera=True):
        """Uniformly random pixels across all views; rays grouped by camera
        (one group holding every ray when ``by_camera`` is False)."""
        counts = np.array([im.shape[0] for im in self.images])
        flat = self.rng.integers(0, counts.sum(), size=n)
        flat.sort()
        offsets = np.concatenate([[0], np.cumsum(counts)])
        cam_idx = np.searchsorted(offsets, flat, side="right") - 1
        origins, dirs, gt, light_sets = [], [], [], []
        for c in np.unique(cam_idx):
            pix = flat[cam_idx == c] - offsets[c]
            cam = self.cameras[c]
            uv = np.stack([pix % cam.width + 0.5, pix // cam.width + 0.5], axis=1).astype(float)
            o, d = generate_rays(cam, uv)
            origins.append(o)
            dirs.append(d)
            gt.append(self.images[c][pix])
            light_sets.append((c, len(pix)))
        if not by_camera:
            return ([np.concatenate(origins)], [np.concatenate(dirs)], [np.concatenate(gt)],
                    [(None, n)])
        return origins, dirs, gt, light_sets

    def step(self):
        """One optimization step; returns the metrics row."""
        cfg = self.cfg
        model = self.model
        shadows = cfg.train.shadow_rays
        origins, dirs, gts, groups = self.sample_batch(cfg.train.batch_rays, by_camera=shadows)
        model.refresh()
        total_B = sum(len(o) for o in origins)
        acc = None
        total = 0.0
        parts_sum = None
        ok = True
        # rays from different cameras can see different lights, so batch per camera
        for o, d, gt, (c, _) in zip(origins, dirs, gts, groups):
            lights = self.cameras[c].lights if c is not None else None
            w = len(o) / total_B
            wts = LossWeights(self.weights.w_render * w, self.weights.w_entropy * w, 0.0, 0.0)
            tot, parts, g = loss_and_grads(model, o, d, gt, wts, cfg.sampling, lights, shadows,
                                           refresh=False)
            if g is None:
                ok = False
                break
            total += tot
            if parts_sum is None:
                parts_sum = {k: 0.0 for k in parts}
            for k in ("render", "entropy"):
                parts_sum[k] += w * parts[k]
            acc = g if acc is None else _add_grads(acc, g)
        self.iteration += 1
        mult = lr_schedule(self.iteration, cfg.train.warmup_iters, cfg.train.total_iters)
        if ok:
            cl = model.cloud
            winding = float(np.sum((cl.moments[:, 0] - 1.0) ** 2))
            normal = float(np.sum((cl.normals - cl.initial_normals) ** 2))
            lw = self.weights
            total += lw.w_winding * winding + lw.w_normal * normal
            acc["moments"][:, 0] += 2.0 * lw.w_winding * (cl.moments[:, 0] - 1.0)
            acc["normals"] += 2.0 * lw.w_normal * (cl.normals - cl.initial_normals)
            parts_sum.update(winding=winding, normal=normal)
            if not np.isfinite(total):
                ok = False
        if ok:
            apply_update(model, self.adam, acc, cfg, mult)
        else:
            log.warning("iteration %d: non-finite loss, step rejected", self.iteration)
            parts_sum = {"render": float("nan"), "entropy": float("nan"), "winding": float("nan"),
                         "normal": float("nan")}
        row = {"iteration": self.iteration, "loss": total if ok else float("nan"), **parts_sum,
               "lambda": model.lambda_scale, "epsilon": model.epsilon, "n_points": len(model.cloud),
               "lr_mult": mult, "accepted": int(ok)}
        self.history.append(row)
        self._write_row(row)
        tc = cfg.train
        if tc.grow_every > 0 and self.iteration % tc.grow_every == 0 and self.iteration < tc.total_iters:
            added = self.grow()
            log.info("iteration %d: grew %d points", self.iteration, added)
        return row

    def grow(self):
        cap = math.ceil(self.cfg.train.grow_cap_fraction * self.n_original) - self.n_grown
        added = point_growing(self.model, self.cameras, self.cfg, self.rng, cap, self.adam)
        self.n_grown += added
        return added

    def run(self, iters=None, callback=None):
        iters = self.cfg.train.total_iters if iters is None else iters
        for _ in range(iters):
            row = self.step()
            if callback is not None:
                callback(self, row)
        self.model.refresh()
        return self.history

    def _write_row(self, row):
        if self.metrics_path is None:
            return
        new = self._csv is None
        with open(self.metrics_path, "a" if not new else "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            if new:
                w.writeheader()
                self._csv = True
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _add_grads(a, b):
    out = {}
    for k in a:
        if isinstance(a[k], dict):
            out[k] = {kk: a[k][kk] + b[k][kk] for kk in a[k]}
        else:
            out[k] = a[k] + b[k]
    return out


def training_step(trainer: Trainer):
    return trainer.step()


# ---------------------------------------------------------------------------
# point growing
# ---------------------------------------------------------------------------


def first_intersections(model: SceneModel, origins, dirs, sampling):
    """Positions of the first zero crossing of f along each ray (NaN if none)."""
    lo, hi = model_bounds(model)
    tn, tf, hit = ray_box(origins, dirs, lo, hi)
    tf = np.where(hit, tf, tn)
    P = sampling.probe_count
    span = tf - tn
    out = np.full((len(origins), 3), np.nan)
    idx = np.flatnonzero(span > 0)
    if len(idx) == 0:
        return out
    tp = tn[idx, None] + np.linspace(0.0, 1.0, P)[None, :] * span[idx, None]
    pts = origins[idx, None, :] + tp[..., None] * dirs[idx, None, :]
    f = 0.5 - model.tree.geometry(pts.reshape(-1, 3), model.kernel).reshape(len(idx), P)
    pos = f > 0
    change = pos[:, 1:] != pos[:, :-1]
    has = change.any(axis=1)
    k = np.argmax(change, axis=1)
    r = np.arange(len(idx))
    f0, f1 = f[r, k], f[r, k + 1]
    w = np.where(f0 != f1, f0 / np.where(f0 != f1, f0 - f1, 1.0), 0.5)
    t = tp[r, k] + w * (tp[r, k + 1] - tp[r, k])
    hitp = origins[idx] + t[:, None] * dirs[idx]
    out[idx[has]] = hitp[has]
    return out


def point_growing(model: SceneModel, cameras, cfg: Config, rng, cap=None, adam: Adam | None = None,
                  threshold=None, n_rays=None, neighbors=8):
    """Add points at first intersections far from the existing cloud.

    New points average their neighbors' attributes and get a PCA normal
    oriented like the neighbors; all area weights are then recomputed and
    the tree is rebuilt. Returns the number of points added.
    """
    cl = model.cloud
    m0 = len(cl)
    if cap is None:
        cap = math.ceil(cfg.train.grow_cap_fraction * m0)
    if cap <= 0:
        return 0
    if threshold is None:
        threshold = cfg.train.grow_distance_scale * mean_spacing(cl)
    if not np.isfinite(threshold):
        return 0
    n_rays = n_rays or cfg.train.grow_rays
    cam_idx = rng.integers(0, len(cameras), size=n_rays)
    origins = np.empty((n_rays, 3))
    dirs = np.empty((n_rays, 3))
    for i, c in enumerate(cam_idx):
        cam = cameras[c]
        uv = rng.uniform([0, 0], [cam.width, cam.height])
        o, d = generate_rays(cam, uv[None])
        origins[i], dirs[i] = o[0], d[0]
    hits = first_intersections(model, origins, dirs, cfg.sampling)
    hits = hits[np.all(np.isfinite(hits), axis=1)]
    if len(hits) == 0:
        return 0
    from scipy.spatial import cKDTree

    tree = cKDTree(cl.positions)
    accepted = []
    for x in hits:
        if len(accepted) >= cap:
            break
        if tree.query(x)[0] <= threshold:
            continue
        if accepted and np.min(np.linalg.norm(np.array(accepted) - x, axis=1)) <= threshold:
            continue
        accepted.append(x)
    if not accepted:
        return 0
    new_pos = np.array(accepted)
    k = min(neighbors, m0)
    _, nbr = knn_batch(cl.positions, k, tree=tree, queries=new_pos)
    mom = cl.moments[nbr].mean(axis=1)
    ref = cl.normals[nbr].mean(axis=1)
    pts = np.concatenate([cl.positions[nbr], new_pos[:, None, :]], axis=1)
    centered = pts - pts.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, evecs = np.linalg.eigh(cov)
    nrm = evecs[:, :, 0]
    nrm *= np.where(np.einsum("ij,ij->i", nrm, ref) < 0, -1.0, 1.0)[:, None]
    grown = OrientedPointCloud(
        np.concatenate([cl.positions, new_pos]), np.concatenate([cl.normals, nrm]),
        np.concatenate([cl.areas, np.ones(len(new_pos))]), np.concatenate([cl.moments, mom]),
        np.concatenate([cl.initial_normals, nrm]))
    grown = estimate_area_weights(grown)
    model.cloud = grown
    t = model.tree
    model.tree = DipoleTree(grown, t.max_leaf_size, t.max_depth, t.beta_bh, t.appearance_kernel)
    if adam is not None:
        adam.grow("moments", len(new_pos))
        adam.grow("normals", len(new_pos))
    return len(new_pos)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: SceneModel, iteration=0, cfg: Config | None = None, adam=None):
    """npz archive: cloud arrays, head weights, log lambda/epsilon, background,
    bbox, iteration and the JSON config, tagged with ``format_version``."""
    cl = model.cloud
    data = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "positions": cl.positions, "normals": cl.normals, "areas": cl.areas,
        "moments": cl.moments, "initial_normals": cl.initial_normals,
        "log_lambda": np.array(model.log_lambda), "log_epsilon": np.array(model.log_epsilon),
        "background": model.background, "iteration": np.array(iteration),
        "head_config": np.array(json.dumps(model.head.config())),
        "tree_config": np.array(json.dumps({
            "max_leaf_size": model.tree.max_leaf_size, "max_depth": model.tree.max_depth,
            "beta_bh": model.tree.beta_bh, "appearance_kernel": model.tree.appearance_kernel})),
        "config": np.array(cfg.to_json() if cfg is not None else ""),
    }
    if model.bbox is not None:
        data["bbox"] = np.stack([np.asarray(model.bbox[0]), np.asarray(model.bbox[1])])
    for k, v in model.head.params.items():
        data[f"head/{k}"] = v
    if adam is not None:
        data.update(adam.state())
    with open(path, "wb") as fh:
        np.savez(fh, **data)


def load_checkpoint(path):
    """Returns (model, iteration, config or None)."""
    with np.load(path, allow_pickle=False) as z:
        if "format_version" not in z:
            raise CheckpointVersionError(f"{path}: not a checkpoint (no format_version)")
        ver = int(z["format_version"])
        if ver != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"{path}: checkpoint format_version {ver}, expected {CHECKPOINT_VERSION}")
        cl = OrientedPointCloud(z["positions"], z["normals"], z["areas"], z["moments"],
                                z["initial_normals"])
        hc = json.loads(str(z["head_config"]))
        head = RadianceHead(hc["variant"], k_features=hc["k_features"],
                            hidden=hc["hidden"] or (64, 64), albedo=hc["albedo"])
        for k in list(head.params):
            head.params[k] = np.array(z[f"head/{k}"])
        tc = json.loads(str(z["tree_config"]))
        bbox = (z["bbox"][0], z["bbox"][1]) if "bbox" in z else None
        model = SceneModel.create(cl, math.exp(float(z["log_epsilon"])),
                                  math.exp(float(z["log_lambda"])), head, z["background"], bbox,
                                  tc["max_leaf_size"], tc["max_depth"], tc["beta_bh"],
                                  tc["appearance_kernel"])
        model.log_lambda = float(z["log_lambda"])
        model.log_epsilon = float(z["log_epsilon"])
        cfg_text = str(z["config"])
        cfg = Config.from_dict(json.loads(cfg_text)) if cfg_text else None
        return model, int(z["iteration"]), cfg
