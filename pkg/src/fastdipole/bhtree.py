"""Barnes-Hut octree for regularized dipole sums.

Nodes are stored in depth-first preorder with skip pointers, so every
traversal is a flat loop: a node whose centroid is farther than
``beta * radius`` from the query contributes its aggregated dipole and its
subtree is skipped; a near leaf is summed exactly over its points.

Moment channels come in two kinds. Dipole channels aggregate
``a_m n_m mu_m`` into a vector per node and use the full Poisson kernel.
Radial channels (appearance attributes without the foreshortening term)
aggregate ``a_m mu_m`` and use ``tau(r/eps) / (4 pi r^2)``. Channel 0, the
geometry attribute, is always a dipole channel.

Backpropagation is two-staged: adjoint queries only touch the nodes (or
exact leaf points) their primal traversal terminated at, and
``flush_gradients`` pushes node accumulators down to points in one pass.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .kernels import KERNEL_DESINGULARIZED, KernelParams, radial_profile, radial_weight
from .pointcloud import EmptyCloudError, OrientedPointCloud

DEFAULT_LEAF_SIZE = 8
DEFAULT_MAX_DEPTH = 20
DEFAULT_BETA = 2.0

TREE_MAGIC = b"FDTR"
TREE_VERSION = 1


class TreeMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _build_structure(pos, leaf_size, max_depth):
    """Octree partition in preorder; returns per-node lists and point order."""
    lo = pos.min(axis=0)
    hi = pos.max(axis=0)
    center = 0.5 * (lo + hi)
    half = 0.5 * float(np.max(hi - lo))
    if half <= 0:
        half = 0.5
    half *= 1.0 + 1e-9

    starts, ends, skips, leaves, parents, depths, boxes = [], [], [], [], [], [], []
    order = []

    def rec(idx, c, h, depth, parent):
        t = len(starts)
        starts.append(len(order))
        ends.append(-1)
        skips.append(-1)
        parents.append(parent)
        depths.append(depth)
        boxes.append((c - h, c + h))
        p = pos[idx]
        coincident = bool(np.all(p == p[0]))
        if len(idx) <= leaf_size or depth >= max_depth or coincident:
            leaves.append(True)
            order.extend(idx.tolist())
        else:
            leaves.append(False)
            octant = ((p[:, 0] >= c[0]).astype(np.int64)
                      | ((p[:, 1] >= c[1]).astype(np.int64) << 1)
                      | ((p[:, 2] >= c[2]).astype(np.int64) << 2))
            srt = np.argsort(octant, kind="stable")
            counts = np.bincount(octant, minlength=8)
            off = 0
            for o in range(8):
                n = counts[o]
                if n == 0:
                    continue
                sub = idx[srt[off:off + n]]
                off += n
                sign = np.array([(o >> 0) & 1, (o >> 1) & 1, (o >> 2) & 1]) * 2.0 - 1.0
                rec(sub, c + 0.5 * h * sign, 0.5 * h, depth + 1, t)
        ends[t] = len(order)
        skips[t] = len(starts)

    rec(np.arange(len(pos)), center, half, 0, -1)
    box = np.array(boxes)
    return (np.array(starts, dtype=np.int64), np.array(ends, dtype=np.int64),
            np.array(skips, dtype=np.int64), np.array(leaves, dtype=np.bool_),
            np.array(parents, dtype=np.int64), np.array(depths, dtype=np.int64),
            box[:, 0].copy(), box[:, 1].copy(), np.array(order, dtype=np.int64))


@njit(cache=True)
def _aggregate_geometry(pos, area, starts, ends, skips, is_leaf):
    n = len(starts)
    node_area = np.zeros(n)
    node_center = np.zeros((n, 3))
    node_radius = np.zeros(n)
    for t in range(n - 1, -1, -1):
        a = 0.0
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        for i in range(starts[t], ends[t]):
            a += area[i]
            s0 += area[i] * pos[i, 0]
            s1 += area[i] * pos[i, 1]
            s2 += area[i] * pos[i, 2]
        node_area[t] = a
        if a > 0.0:
            node_center[t, 0] = s0 / a
            node_center[t, 1] = s1 / a
            node_center[t, 2] = s2 / a
        else:
            cnt = ends[t] - starts[t]
            for i in range(starts[t], ends[t]):
                for k in range(3):
                    node_center[t, k] += pos[i, k] / cnt
        rmax = 0.0
        for i in range(starts[t], ends[t]):
            dx = pos[i, 0] - node_center[t, 0]
            dy = pos[i, 1] - node_center[t, 1]
            dz = pos[i, 2] - node_center[t, 2]
            d = math.sqrt(dx * dx + dy * dy + dz * dz)
            if d > rmax:
                rmax = d
        node_radius[t] = rmax
    return node_area, node_center, node_radius


@njit(cache=True)
def _aggregate_moments(area, pt_dip, pt_rad, starts, ends, node_area):
    n = len(starts)
    nd = pt_dip.shape[1]
    nr = pt_rad.shape[1]
    node_dip = np.zeros((n, nd, 3))
    node_rad = np.zeros((n, nr))
    for t in range(n):
        a = node_area[t]
        if a <= 0.0:
            continue
        for i in range(starts[t], ends[t]):
            w = area[i] / a
            for c in range(nd):
                for k in range(3):
                    node_dip[t, c, k] += w * pt_dip[i, c, k]
            for c in range(nr):
                node_rad[t, c] += w * pt_rad[i, c]
    return node_dip, node_rad


# ---------------------------------------------------------------------------
# traversal kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _source_forward(x0, x1, x2, px, py, pz, A, dip, rad, c_dip, c_rad, width, code,
                    ng, with_eps, vals, grads, dvals, dgrads, q):
    # one source (node or point): area A, location P, dipole vectors dip[c], radial scalars rad[c]
    d0 = px - x0
    d1 = py - x1
    d2 = pz - x2
    r = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    nd = dip.shape[0]
    nr = rad.shape[0]
    if r == 0.0:
        if code == KERNEL_DESINGULARIZED:
            g, dg, gw, dgw = radial_profile(0.0, width, code)
            for c in range(min(nd, ng)):
                for k in range(3):
                    grads[q, c, k] += -A * g * dip[c, k]
        return
    g, dg, gw, dgw = radial_profile(r, width, code)
    for c in range(nd):
        cd = dip[c, 0] * d0 + dip[c, 1] * d1 + dip[c, 2] * d2
        vals[q, c_dip + c] += A * g * cd
        if with_eps:
            dvals[q, c_dip + c] += A * gw * cd
        if c < ng:
            f = dg * cd / r
            grads[q, c, 0] += -A * (g * dip[c, 0] + f * d0)
            grads[q, c, 1] += -A * (g * dip[c, 1] + f * d1)
            grads[q, c, 2] += -A * (g * dip[c, 2] + f * d2)
            if with_eps:
                fw = dgw * cd / r
                dgrads[q, c, 0] += -A * (gw * dip[c, 0] + fw * d0)
                dgrads[q, c, 1] += -A * (gw * dip[c, 1] + fw * d1)
                dgrads[q, c, 2] += -A * (gw * dip[c, 2] + fw * d2)
    if nr > 0:
        h, dh, hw = radial_weight(r, width, code)
        dhw = 0.0
        if with_eps and code == 0:
            t = r / width
            tp = 4.0 / math.sqrt(math.pi) * t * t * math.exp(-t * t)
            tpp = 8.0 / math.sqrt(math.pi) * t * (1.0 - t * t) * math.exp(-t * t)
            dhw = (tp - t * tpp) / (4.0 * math.pi * width * width * r * r)
        for c in range(nr):
            ch = c_rad + c
            vals[q, ch] += A * h * rad[c]
            if with_eps:
                dvals[q, ch] += A * hw * rad[c]
            if ch < ng:
                s = -A * dh * rad[c] / r
                grads[q, ch, 0] += s * d0
                grads[q, ch, 1] += s * d1
                grads[q, ch, 2] += s * d2
                if with_eps:
                    sw = -A * dhw * rad[c] / r
                    dgrads[q, ch, 0] += sw * d0
                    dgrads[q, ch, 1] += sw * d1
                    dgrads[q, ch, 2] += sw * d2


@njit(cache=True)
def _forward_kernel(X, node_center, node_radius, node_area, node_dip, node_rad, skips, is_leaf,
                    starts, ends, pt_pos, pt_area, pt_dip, pt_rad, width, code, beta, ng, with_eps,
                    nch):
    Q = X.shape[0]
    nd = node_dip.shape[1]
    vals = np.zeros((Q, nch))
    grads = np.zeros((Q, max(ng, 1), 3))
    dvals = np.zeros((Q, nch))
    dgrads = np.zeros((Q, max(ng, 1), 3))
    visits = np.zeros(Q, dtype=np.int64)
    N = len(skips)
    for q in range(Q):
        x0 = X[q, 0]
        x1 = X[q, 1]
        x2 = X[q, 2]
        t = 0
        while t < N:
            visits[q] += 1
            e0 = x0 - node_center[t, 0]
            e1 = x1 - node_center[t, 1]
            e2 = x2 - node_center[t, 2]
            dist = math.sqrt(e0 * e0 + e1 * e1 + e2 * e2)
            if dist > beta * node_radius[t]:
                _source_forward(x0, x1, x2, node_center[t, 0], node_center[t, 1], node_center[t, 2],
                                node_area[t], node_dip[t], node_rad[t], 0, nd, width, code,
                                ng, with_eps, vals, grads, dvals, dgrads, q)
                t = skips[t]
            elif is_leaf[t]:
                for i in range(starts[t], ends[t]):
                    _source_forward(x0, x1, x2, pt_pos[i, 0], pt_pos[i, 1], pt_pos[i, 2],
                                    pt_area[i], pt_dip[i], pt_rad[i], 0, nd, width, code,
                                    ng, with_eps, vals, grads, dvals, dgrads, q)
                t = skips[t]
            else:
                t += 1
    return vals, grads, dvals, dgrads, visits


@njit(cache=True)
def _geometry_kernel(X, node_center, node_radius, node_area, node_dip, skips, is_leaf,
                     starts, ends, pt_pos, pt_area, pt_dip, width, code, beta):
    # geometry channel only; used for probing and grid sampling
    Q = X.shape[0]
    out = np.zeros(Q)
    N = len(skips)
    for q in range(Q):
        x0 = X[q, 0]
        x1 = X[q, 1]
        x2 = X[q, 2]
        acc = 0.0
        t = 0
        while t < N:
            e0 = node_center[t, 0] - x0
            e1 = node_center[t, 1] - x1
            e2 = node_center[t, 2] - x2
            r = math.sqrt(e0 * e0 + e1 * e1 + e2 * e2)
            if r > beta * node_radius[t]:
                g = radial_profile(r, width, code)[0]
                acc += node_area[t] * g * (node_dip[t, 0, 0] * e0 + node_dip[t, 0, 1] * e1
                                           + node_dip[t, 0, 2] * e2)
                t = skips[t]
            elif is_leaf[t]:
                for i in range(starts[t], ends[t]):
                    d0 = pt_pos[i, 0] - x0
                    d1 = pt_pos[i, 1] - x1
                    d2 = pt_pos[i, 2] - x2
                    ri = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
                    if ri == 0.0:
                        continue
                    g = radial_profile(ri, width, code)[0]
                    acc += pt_area[i] * g * (pt_dip[i, 0, 0] * d0 + pt_dip[i, 0, 1] * d1
                                             + pt_dip[i, 0, 2] * d2)
                t = skips[t]
            else:
                t += 1
        out[q] = acc
    return out


@njit(cache=True)
def _source_adjoint(x0, x1, x2, px, py, pz, A, nd, nr, width, code, dv, dG, ng, acc_dip, acc_rad):
    d0 = px - x0
    d1 = py - x1
    d2 = pz - x2
    r = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
    if r == 0.0:
        if code == KERNEL_DESINGULARIZED:
            g = radial_profile(0.0, width, code)[0]
            for c in range(min(nd, ng)):
                for k in range(3):
                    acc_dip[c, k] += -A * g * dG[c, k]
        return
    g, dg, gw, dgw = radial_profile(r, width, code)
    for c in range(nd):
        s = A * g * dv[c]
        acc_dip[c, 0] += s * d0
        acc_dip[c, 1] += s * d1
        acc_dip[c, 2] += s * d2
        if c < ng:
            # symmetric Jacobian: J dG = -g dG - (g'/r) d (d . dG)
            dd = d0 * dG[c, 0] + d1 * dG[c, 1] + d2 * dG[c, 2]
            f = dg * dd / r
            acc_dip[c, 0] += -A * (g * dG[c, 0] + f * d0)
            acc_dip[c, 1] += -A * (g * dG[c, 1] + f * d1)
            acc_dip[c, 2] += -A * (g * dG[c, 2] + f * d2)
    if nr > 0:
        h, dh, hw = radial_weight(r, width, code)
        for c in range(nr):
            ch = nd + c
            acc_rad[c] += A * h * dv[ch]
            if ch < ng:
                dd = d0 * dG[ch, 0] + d1 * dG[ch, 1] + d2 * dG[ch, 2]
                acc_rad[c] += -A * dh * dd / r


@njit(cache=True)
def _adjoint_kernel(X, d_vals, d_grads, ng, node_center, node_radius, node_area, skips, is_leaf,
                    starts, ends, pt_pos, pt_area, width, code, beta, node_acc_dip, node_acc_rad,
                    pt_acc_dip, pt_acc_rad):
    Q = X.shape[0]
    nd = node_acc_dip.shape[1]
    nr = node_acc_rad.shape[1]
    N = len(skips)
    for q in range(Q):
        x0 = X[q, 0]
        x1 = X[q, 1]
        x2 = X[q, 2]
        dv = d_vals[q]
        dG = d_grads[q]
        t = 0
        while t < N:
            e0 = x0 - node_center[t, 0]
            e1 = x1 - node_center[t, 1]
            e2 = x2 - node_center[t, 2]
            dist = math.sqrt(e0 * e0 + e1 * e1 + e2 * e2)
            if dist > beta * node_radius[t]:
                _source_adjoint(x0, x1, x2, node_center[t, 0], node_center[t, 1], node_center[t, 2],
                                node_area[t], nd, nr, width, code, dv, dG, ng,
                                node_acc_dip[t], node_acc_rad[t])
                t = skips[t]
            elif is_leaf[t]:
                for i in range(starts[t], ends[t]):
                    _source_adjoint(x0, x1, x2, pt_pos[i, 0], pt_pos[i, 1], pt_pos[i, 2],
                                    pt_area[i], nd, nr, width, code, dv, dG, ng,
                                    pt_acc_dip[i], pt_acc_rad[i])
                t = skips[t]
            else:
                t += 1


@njit(cache=True)
def _flush_kernel(parents, starts, ends, is_leaf, node_area, node_acc_dip, node_acc_rad,
                  pt_area, pt_normal, pt_mu_dip, pt_acc_dip, pt_acc_rad):
    N = len(parents)
    nd = node_acc_dip.shape[1]
    nr = node_acc_rad.shape[1]
    M = len(pt_area)
    G_dip = np.zeros((N, nd, 3))
    G_rad = np.zeros((N, nr))
    d_mu = np.zeros((M, nd + nr))
    d_n = np.zeros((M, 3))
    for t in range(N):
        p = parents[t]
        a = node_area[t]
        for c in range(nd):
            for k in range(3):
                G_dip[t, c, k] = (G_dip[p, c, k] if p >= 0 else 0.0)
                if a > 0.0:
                    G_dip[t, c, k] += node_acc_dip[t, c, k] / a
        for c in range(nr):
            G_rad[t, c] = (G_rad[p, c] if p >= 0 else 0.0)
            if a > 0.0:
                G_rad[t, c] += node_acc_rad[t, c] / a
        if is_leaf[t]:
            for i in range(starts[t], ends[t]):
                ai = pt_area[i]
                for c in range(nd):
                    v0 = ai * G_dip[t, c, 0] + pt_acc_dip[i, c, 0]
                    v1 = ai * G_dip[t, c, 1] + pt_acc_dip[i, c, 1]
                    v2 = ai * G_dip[t, c, 2] + pt_acc_dip[i, c, 2]
                    d_mu[i, c] = pt_normal[i, 0] * v0 + pt_normal[i, 1] * v1 + pt_normal[i, 2] * v2
                    mu = pt_mu_dip[i, c]
                    d_n[i, 0] += mu * v0
                    d_n[i, 1] += mu * v1
                    d_n[i, 2] += mu * v2
                for c in range(nr):
                    d_mu[i, nd + c] = ai * G_rad[t, c] + pt_acc_rad[i, c]
    for t in range(N):
        for c in range(nd):
            for k in range(3):
                node_acc_dip[t, c, k] = 0.0
        for c in range(nr):
            node_acc_rad[t, c] = 0.0
    for i in range(M):
        for c in range(nd):
            for k in range(3):
                pt_acc_dip[i, c, k] = 0.0
        for c in range(nr):
            pt_acc_rad[i, c] = 0.0
    return d_mu, d_n


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


@dataclass
class TreeNode:
    """Read-only view of one octree node."""

    tree: "DipoleTree"
    index: int

    @property
    def centroid(self):
        return self.tree.node_center[self.index]

    @property
    def area(self):
        return float(self.tree.node_area[self.index])

    @property
    def radius(self):
        return float(self.tree.node_radius[self.index])

    @property
    def moment_vectors(self):
        """(1+K, 3) aggregated moments; radial channels occupy the first component."""
        t = self.index
        out = np.zeros((self.tree.n_channels, 3))
        out[: self.tree.n_dip] = self.tree.node_dip[t]
        out[self.tree.n_dip:, 0] = self.tree.node_rad[t]
        return out

    @property
    def grad_vectors(self):
        t = self.index
        out = np.zeros((self.tree.n_channels, 3))
        out[: self.tree.n_dip] = self.tree.node_acc_dip[t]
        out[self.tree.n_dip:, 0] = self.tree.node_acc_rad[t]
        return out

    @property
    def is_leaf(self):
        return bool(self.tree.is_leaf[self.index])

    @property
    def point_indices(self):
        s, e = self.tree.starts[self.index], self.tree.ends[self.index]
        return self.tree.order[s:e]

    @property
    def children(self):
        t = self.index
        out = []
        if self.tree.is_leaf[t]:
            return out
        c = t + 1
        while c < self.tree.skips[t]:
            out.append(TreeNode(self.tree, c))
            c = self.tree.skips[c]
        return out


class DipoleTree:
    """Octree over point positions with per-node dipole and radial moments."""

    def __init__(self, cloud: OrientedPointCloud, max_leaf_size=DEFAULT_LEAF_SIZE,
                 max_depth=DEFAULT_MAX_DEPTH, beta_bh=DEFAULT_BETA, appearance_kernel="radial"):
        if len(cloud) == 0:
            raise EmptyCloudError("cannot build a tree over an empty cloud")
        if appearance_kernel not in ("radial", "dipole"):
            raise ValueError(f"unknown appearance kernel {appearance_kernel!r}")
        self.max_leaf_size = int(max_leaf_size)
        self.max_depth = int(max_depth)
        self.beta_bh = float(beta_bh)
        self.appearance_kernel = appearance_kernel
        self.n_points = len(cloud)
        (self.starts, self.ends, self.skips, self.is_leaf, self.parents, self.depths,
         self.box_lo, self.box_hi, self.order) = _build_structure(
            cloud.positions, self.max_leaf_size, self.max_depth)
        self.positions = cloud.positions.copy()
        self.pt_pos = np.ascontiguousarray(cloud.positions[self.order])
        self.pt_area = np.ascontiguousarray(cloud.areas[self.order])
        self.node_area, self.node_center, self.node_radius = _aggregate_geometry(
            self.pt_pos, self.pt_area, self.starts, self.ends, self.skips, self.is_leaf)
        self.n_channels = cloud.moments.shape[1]
        self.n_dip = self.n_channels if appearance_kernel == "dipole" else 1
        self.n_rad = self.n_channels - self.n_dip
        self._alloc_grads()
        self.update_moments(cloud)

    # -- state -------------------------------------------------------------

    @property
    def n_nodes(self):
        return len(self.skips)

    @property
    def root(self) -> TreeNode:
        return TreeNode(self, 0)

    @property
    def point_order(self):
        return self.order

    def _alloc_grads(self):
        self.node_acc_dip = np.zeros((self.n_nodes, self.n_dip, 3))
        self.node_acc_rad = np.zeros((self.n_nodes, self.n_rad))
        self.pt_acc_dip = np.zeros((self.n_points, self.n_dip, 3))
        self.pt_acc_rad = np.zeros((self.n_points, self.n_rad))

    def _check(self, cloud):
        if len(cloud) != self.n_points:
            raise TreeMismatchError(f"tree built over {self.n_points} points, cloud has {len(cloud)}")
        if cloud.moments.shape[1] != self.n_channels:
            raise TreeMismatchError(
                f"tree has {self.n_channels} channels, cloud has {cloud.moments.shape[1]}")

    def update_moments(self, cloud: OrientedPointCloud):
        """Recompute every node moment from the cloud's normals and attributes."""
        self._check(cloud)
        mu = cloud.moments[self.order]
        n = cloud.normals[self.order]
        self.pt_normal = np.ascontiguousarray(n)
        self.pt_mu_dip = np.ascontiguousarray(mu[:, : self.n_dip])
        self.pt_dip = np.ascontiguousarray(n[:, None, :] * self.pt_mu_dip[:, :, None])
        self.pt_rad = np.ascontiguousarray(mu[:, self.n_dip:])
        self.node_dip, self.node_rad = _aggregate_moments(
            self.pt_area, self.pt_dip, self.pt_rad, self.starts, self.ends, self.node_area)

    def with_moments(self, cloud: OrientedPointCloud) -> "DipoleTree":
        """Shallow copy sharing structure, with moments taken from ``cloud``."""
        other = object.__new__(DipoleTree)
        other.__dict__.update(self.__dict__)
        other.n_channels = cloud.moments.shape[1]
        other.n_dip = other.n_channels if self.appearance_kernel == "dipole" else 1
        other.n_rad = other.n_channels - other.n_dip
        other._alloc_grads()
        other.update_moments(cloud)
        return other

    # -- queries -------------------------------------------------------------

    def _beta(self, beta):
        return self.beta_bh if beta is None else float(beta)

    def query(self, X, params: KernelParams, beta=None, n_grad=0, eps_derivs=False):
        """Full traversal; returns values, gradients of the first ``n_grad``
        channels, their epsilon derivatives, and visit counts."""
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
        vals, grads, dvals, dgrads, visits = _forward_kernel(
            X, self.node_center, self.node_radius, self.node_area, self.node_dip, self.node_rad,
            self.skips, self.is_leaf, self.starts, self.ends, self.pt_pos, self.pt_area,
            self.pt_dip, self.pt_rad, params.width, params.code, self._beta(beta), int(n_grad),
            bool(eps_derivs), self.n_channels)
        return {"values": vals, "grads": grads[:, :n_grad], "d_eps": dvals,
                "grads_d_eps": dgrads[:, :n_grad], "visits": visits}

    def geometry(self, X, params: KernelParams, beta=None) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
        return _geometry_kernel(X, self.node_center, self.node_radius, self.node_area, self.node_dip,
                                self.skips, self.is_leaf, self.starts, self.ends, self.pt_pos,
                                self.pt_area, self.pt_dip, params.width, params.code,
                                self._beta(beta))

    def adjoint(self, X, d_vals, params: KernelParams, d_grads=None, beta=None):
        """Accumulate the adjoint of ``query`` into node/point gradient attributes."""
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
        Q = len(X)
        d_vals = np.ascontiguousarray(np.asarray(d_vals, dtype=float).reshape(Q, self.n_channels))
        if d_grads is None:
            ng = 0
            d_grads = np.zeros((Q, 1, 3))
        else:
            d_grads = np.asarray(d_grads, dtype=float).reshape(Q, -1, 3)
            ng = d_grads.shape[1]
        d_grads = np.ascontiguousarray(d_grads)
        _adjoint_kernel(X, d_vals, d_grads, ng, self.node_center, self.node_radius, self.node_area,
                        self.skips, self.is_leaf, self.starts, self.ends, self.pt_pos, self.pt_area,
                        params.width, params.code, self._beta(beta), self.node_acc_dip,
                        self.node_acc_rad, self.pt_acc_dip, self.pt_acc_rad)

    def flush(self):
        """Push accumulated gradients to points; returns (d_moments, d_normals)
        in cloud order and zeroes every accumulator."""
        d_mu, d_n = _flush_kernel(self.parents, self.starts, self.ends, self.is_leaf,
                                  self.node_area, self.node_acc_dip, self.node_acc_rad,
                                  self.pt_area, self.pt_normal, self.pt_mu_dip, self.pt_acc_dip,
                                  self.pt_acc_rad)
        out_mu = np.empty_like(d_mu)
        out_n = np.empty_like(d_n)
        out_mu[self.order] = d_mu
        out_n[self.order] = d_n
        return out_mu, out_n

    # -- I/O ------------------------------------------------------------------

    def dump(self, path):
        """Binary dump: little-endian header then node arrays.

        Header: magic 'FDTR', u32 version, u32 n_nodes, u32 n_points,
        u32 n_dip, u32 n_rad, f64 beta_bh. Body (in order): i64 starts, ends,
        skips, parents; u8 is_leaf; f64 node_area, node_center (n,3),
        node_radius, node_dip (n,n_dip,3), node_rad (n,n_rad); i64 order.
        """
        with open(path, "wb") as fh:
            fh.write(TREE_MAGIC)
            fh.write(struct.pack("<IIIIId", TREE_VERSION, self.n_nodes, self.n_points,
                                 self.n_dip, self.n_rad, self.beta_bh))
            for arr, dt in ((self.starts, "<i8"), (self.ends, "<i8"), (self.skips, "<i8"),
                            (self.parents, "<i8"), (self.is_leaf, "u1"), (self.node_area, "<f8"),
                            (self.node_center, "<f8"), (self.node_radius, "<f8"),
                            (self.node_dip, "<f8"), (self.node_rad, "<f8"), (self.order, "<i8")):
                fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tree_dump(path) -> dict:
    """Parse a dump written by ``DipoleTree.dump`` into plain arrays."""
    data = Path(path).read_bytes()
    if data[:4] != TREE_MAGIC:
        raise ValueError(f"{path}: not a tree dump")
    version, n, m, nd, nr, beta = struct.unpack_from("<IIIIId", data, 4)
    if version != TREE_VERSION:
        raise ValueError(f"{path}: tree dump version {version}, expected {TREE_VERSION}")
    off = 4 + struct.calcsize("<IIIIId")
    out = {"version": version, "beta_bh": beta}

    def take(name, dt, shape):
        nonlocal off
        cnt = int(np.prod(shape))
        arr = np.frombuffer(data, dtype=dt, count=cnt, offset=off).reshape(shape)
        off += arr.nbytes
        out[name] = arr

    for name in ("starts", "ends", "skips", "parents"):
        take(name, "<i8", (n,))
    take("is_leaf", "u1", (n,))
    take("node_area", "<f8", (n,))
    take("node_center", "<f8", (n, 3))
    take("node_radius", "<f8", (n,))
    take("node_dip", "<f8", (n, nd, 3))
    take("node_rad", "<f8", (n, nr))
    take("order", "<i8", (m,))
    return out


# functional aliases ---------------------------------------------------------


def build_tree(cloud, max_leaf_size=DEFAULT_LEAF_SIZE, max_depth=DEFAULT_MAX_DEPTH,
               beta_bh=DEFAULT_BETA, appearance_kernel="radial") -> DipoleTree:
    return DipoleTree(cloud, max_leaf_size, max_depth, beta_bh, appearance_kernel)


def update_moments(tree: DipoleTree, cloud: OrientedPointCloud) -> None:
    tree.update_moments(cloud)


def primal_query(tree: DipoleTree, cloud, x, params: KernelParams, beta=None) -> np.ndarray:
    """All 1+K channel values at one query point (or a batch)."""
    if cloud is not None:
        tree._check(cloud)
    out = tree.query(x, params, beta=beta)["values"]
    return out[0] if np.ndim(x) == 1 else out


def primal_gradient_query(tree: DipoleTree, cloud, x, params: KernelParams, beta=None):
    """Spatial gradients (1+K, 3) of every channel."""
    if cloud is not None:
        tree._check(cloud)
    out = tree.query(x, params, beta=beta, n_grad=tree.n_channels)["grads"]
    return out[0] if np.ndim(x) == 1 else out


def adjoint_query(tree: DipoleTree, x, d_out, params: KernelParams, beta=None, d_grad=None):
    tree.adjoint(x, d_out, params, d_grads=d_grad, beta=beta)


def flush_gradients(tree: DipoleTree, cloud=None):
    if cloud is not None:
        tree._check(cloud)
    return tree.flush()
