"""Oriented point clouds: container, PLY I/O and geometric preprocessing."""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

APPEARANCE_INIT_STD = 0.1


class EmptyCloudError(ValueError):
    pass


class PLYParseError(ValueError):
    pass


@dataclass(frozen=True)
class OrientedPoint:
    position: np.ndarray
    normal: np.ndarray
    area: float
    geometry_moment: float
    appearance_moments: np.ndarray


@dataclass
class OrientedPointCloud:
    """Struct-of-arrays oriented point cloud.

    ``moments[:, 0]`` is the per-point geometry attribute and
    ``moments[:, 1:]`` the K appearance attributes.
    """

    positions: np.ndarray
    normals: np.ndarray
    areas: np.ndarray
    moments: np.ndarray
    initial_normals: np.ndarray = None
    normal_fallback: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=float).reshape(-1, 3)
        m = len(self.positions)
        self.normals = np.ascontiguousarray(self.normals, dtype=float).reshape(m, 3)
        self.areas = np.ascontiguousarray(self.areas, dtype=float).reshape(m)
        mom = np.asarray(self.moments, dtype=float)
        # reshape(0, -1) is ambiguous, so empty clouds keep their channel count
        cols = mom.shape[1] if mom.ndim == 2 else 1
        self.moments = np.ascontiguousarray(mom.reshape(m, -1) if m else mom.reshape(0, cols))
        if self.initial_normals is None:
            self.initial_normals = self.normals.copy()
        if self.moments.shape[1] < 1:
            raise ValueError("moments must hold at least the geometry channel")
        if np.any(self.areas < 0):
            raise ValueError("areas must be nonnegative")

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i) -> OrientedPoint:
        return OrientedPoint(
            self.positions[i].copy(),
            self.normals[i].copy(),
            float(self.areas[i]),
            float(self.moments[i, 0]),
            self.moments[i, 1:].copy(),
        )

    @property
    def k_appearance(self) -> int:
        return self.moments.shape[1] - 1

    @property
    def geometry_moment(self) -> np.ndarray:
        return self.moments[:, 0]

    @property
    def appearance_moments(self) -> np.ndarray:
        return self.moments[:, 1:]

    def copy(self) -> "OrientedPointCloud":
        return OrientedPointCloud(
            self.positions.copy(),
            self.normals.copy(),
            self.areas.copy(),
            self.moments.copy(),
            self.initial_normals.copy(),
            None if self.normal_fallback is None else self.normal_fallback.copy(),
        )

    def bbox(self, inflate: float = 0.0):
        lo, hi = self.positions.min(axis=0), self.positions.max(axis=0)
        pad = inflate * (hi - lo)
        return lo - pad, hi + pad

    def kdtree(self) -> cKDTree:
        return cKDTree(self.positions)

    @classmethod
    def from_arrays(cls, positions, normals, areas=None, k_appearance=0, seed=0, moments=None):
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        m = len(positions)
        normals = _normalize(np.asarray(normals, dtype=float).reshape(m, 3))
        if moments is None:
            moments = initial_moments(m, k_appearance, seed)
        if areas is None:
            areas = np.ones(m)
        return cls(positions, normals, areas, moments)


def initial_moments(m: int, k_appearance: int, seed=0) -> np.ndarray:
    """Geometry attribute 1, appearance attributes N(0, 0.1^2)."""
    rng = np.random.default_rng(seed)
    out = np.empty((m, 1 + k_appearance))
    out[:, 0] = 1.0
    out[:, 1:] = rng.normal(0.0, APPEARANCE_INIT_STD, size=(m, k_appearance))
    return out


def _normalize(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, v / n, 0.0)


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_header(fh):
    lines = []
    first = fh.readline()
    if first.strip() != b"ply":
        raise PLYParseError("line 1: missing 'ply' magic")
    fmt = None
    elements = []  # (name, count, [(prop, dtype or ('list', cnt, item))])
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise PLYParseError(f"line {lineno}: unexpected end of header")
        line = raw.decode("ascii", errors="replace").strip()
        lines.append(line)
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise PLYParseError(f"line {lineno}: unsupported format {line!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            try:
                elements.append((parts[1], int(parts[2]), []))
            except (IndexError, ValueError):
                raise PLYParseError(f"line {lineno}: bad element declaration {line!r}") from None
        elif parts[0] == "property":
            if not elements:
                raise PLYParseError(f"line {lineno}: property before any element")
            if len(parts) >= 5 and parts[1] == "list":
                if parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise PLYParseError(f"line {lineno}: unknown list type in {line!r}")
                elements[-1][2].append((parts[4], ("list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
            elif len(parts) == 3 and parts[1] in _PLY_TYPES:
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
            else:
                raise PLYParseError(f"line {lineno}: bad property {line!r}")
        elif parts[0] == "end_header":
            break
        else:
            raise PLYParseError(f"line {lineno}: unexpected header keyword {parts[0]!r}")
    if fmt is None:
        raise PLYParseError("header has no format line")
    return fmt, elements, lineno


def _read_vertex_table(path: Path):
    with open(path, "rb") as fh:
        fmt, elements, header_lines = _parse_header(fh)
        body = fh.read()
    vidx = next((i for i, e in enumerate(elements) if e[0] == "vertex"), None)
    if vidx is None:
        raise PLYParseError("no 'vertex' element in header")
    name, count, props = elements[vidx]
    if any(isinstance(p[1], tuple) for p in props):
        raise PLYParseError("list properties on the vertex element are not supported")
    names = [p[0] for p in props]
    if fmt == "ascii":
        text = body.decode("ascii", errors="replace").splitlines()
        offset = sum(e[1] for e in elements[:vidx])
        rows = []
        for i in range(count):
            lineno = header_lines + offset + i + 1
            if offset + i >= len(text):
                raise PLYParseError(f"line {lineno}: expected {count} vertices, file ends early")
            toks = text[offset + i].split()
            if len(toks) < len(props):
                raise PLYParseError(f"line {lineno}: expected {len(props)} values, got {len(toks)}")
            try:
                rows.append([float(t) for t in toks[: len(props)]])
            except ValueError:
                raise PLYParseError(f"line {lineno}: non-numeric value in {text[offset + i]!r}") from None
        table = np.array(rows, dtype=float).reshape(count, len(props))
        return {n: table[:, j] for j, n in enumerate(names)}
    if vidx != 0:
        raise PLYParseError("binary PLY must list the vertex element first")
    endian = "<" if fmt == "binary_little_endian" else ">"
    dtype = np.dtype([(n, endian + t) for n, t in props])
    need = dtype.itemsize * count
    if len(body) < need:
        raise PLYParseError(f"binary body has {len(body)} bytes, expected at least {need}")
    rec = np.frombuffer(body[:need], dtype=dtype, count=count)
    return {n: rec[n].astype(float) for n in names}


def load_ply(path, k_appearance: int = 0, seed: int = 0, normal_k: int = 16, area_k: int = 16):
    """Read an oriented point cloud from an ASCII or binary PLY file.

    Missing normals are estimated with PCA, missing areas with tangent-plane
    Voronoi cells. Moment channels stored by ``save_ply`` are restored;
    otherwise moments take their default initialization.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    cols = _read_vertex_table(path)
    for c in "xyz":
        if c not in cols:
            raise PLYParseError(f"{path}: vertex element lacks property {c!r}")
    pos = np.column_stack([cols["x"], cols["y"], cols["z"]])
    m = len(pos)
    if m == 0:
        raise EmptyCloudError(f"{path}: point cloud has zero points")

    alpha_names = sorted((n for n in cols if n.startswith("alpha_")), key=lambda s: int(s[6:]))
    if "beta" in cols:
        k_file = len(alpha_names)
        moments = np.empty((m, 1 + k_file))
        moments[:, 0] = cols["beta"]
        for j, n in enumerate(alpha_names):
            moments[:, 1 + j] = cols[n]
    else:
        moments = initial_moments(m, k_appearance, seed)

    have_normals = all(c in cols for c in ("nx", "ny", "nz"))
    if have_normals:
        raw = np.column_stack([cols["nx"], cols["ny"], cols["nz"]])
        normals = _normalize(raw)
        missing = np.linalg.norm(raw, axis=1) == 0
    else:
        normals = np.zeros((m, 3))
        missing = np.ones(m, dtype=bool)

    areas = cols["area"].copy() if "area" in cols else np.ones(m)
    cloud = OrientedPointCloud(pos, normals, areas, moments)
    if missing.any():
        cloud = pca_normals(cloud, normal_k, oriented=~missing)
        cloud.initial_normals = cloud.normals.copy()
    if "area" not in cols:
        cloud = estimate_area_weights(cloud, area_k)
    return cloud


def save_ply(cloud: OrientedPointCloud, path, ascii: bool = False):
    """Write positions/normals as doubles and areas/moments as float32 extras."""
    m = len(cloud)
    k = cloud.k_appearance
    props = [("x", "f8"), ("y", "f8"), ("z", "f8"), ("nx", "f8"), ("ny", "f8"), ("nz", "f8"),
             ("area", "f4"), ("beta", "f4")] + [(f"alpha_{j}", "f4") for j in range(k)]
    ply_names = {"f8": "double", "f4": "float"}
    header = ["ply", "format " + ("ascii 1.0" if ascii else "binary_little_endian 1.0"),
              "comment fastdipole oriented point cloud", f"element vertex {m}"]
    header += [f"property {ply_names[t]} {n}" for n, t in props]
    header.append("end_header")
    rec = np.empty(m, dtype=[(n, "<" + t) for n, t in props])
    for j, c in enumerate("xyz"):
        rec[c] = cloud.positions[:, j]
        rec["n" + c] = cloud.normals[:, j]
    rec["area"] = cloud.areas
    rec["beta"] = cloud.moments[:, 0]
    for j in range(k):
        rec[f"alpha_{j}"] = cloud.moments[:, 1 + j]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if ascii:
            for row in rec:
                vals = [repr(float(row[n])) if t == "f8" else repr(float(np.float32(row[n]))) for n, t in props]
                fh.write((" ".join(vals) + "\n").encode("ascii"))
        else:
            fh.write(rec.tobytes())


# ---------------------------------------------------------------------------
# neighbors
# ---------------------------------------------------------------------------


def knn(cloud: OrientedPointCloud, query, k: int) -> np.ndarray:
    """Indices of the k nearest points, ascending distance, ties by lower index."""
    m = len(cloud)
    if k <= 0:
        return np.empty(0, dtype=int)
    if k > m:
        raise ValueError(f"k={k} exceeds point count {m}")
    q = np.asarray(query, dtype=float).reshape(3)
    tree = cKDTree(cloud.positions)
    dk, _ = tree.query(q, k=k)
    radius = float(np.max(np.atleast_1d(dk)))
    # every point tied with the k-th distance must compete for the tie-break
    cand = np.array(tree.query_ball_point(q, radius * (1 + 1e-12) + 1e-300), dtype=int)
    d2 = np.sum((cloud.positions[cand] - q) ** 2, axis=1)
    order = np.lexsort((cand, d2))
    return cand[order[:k]]


def knn_batch(positions: np.ndarray, k: int, tree: cKDTree | None = None, queries=None):
    """Neighbors (distances, indices) for every query; defaults to the points themselves."""
    tree = tree or cKDTree(positions)
    q = positions if queries is None else queries
    k = min(k, len(positions))
    d, i = tree.query(q, k=k)
    return np.atleast_2d(d).reshape(len(q), k), np.atleast_2d(i).reshape(len(q), k)


def mean_spacing(cloud: OrientedPointCloud, k: int = 1) -> float:
    """Mean distance to the k-th nearest other point."""
    if len(cloud) < 2:
        return 1.0
    d, _ = knn_batch(cloud.positions, k + 1)
    return float(np.mean(d[:, -1]))


# ---------------------------------------------------------------------------
# PCA normals
# ---------------------------------------------------------------------------

_UP = np.array([0.0, 0.0, 1.0])


def _pca_frames(positions, nbr_idx):
    nb = positions[nbr_idx]  # (M, k, 3)
    centroid = nb.mean(axis=1)
    centered = nb - centroid[:, None, :]
    cov = np.einsum("mki,mkj->mij", centered, centered) / nbr_idx.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    return evals, evecs, centroid


def pca_normals(cloud: OrientedPointCloud, k: int = 16, oriented=None) -> OrientedPointCloud:
    """Least-variance PCA directions of each k-neighborhood, consistently signed.

    Points flagged in ``oriented`` keep their normals and seed the sign
    propagation. Other points are visited breadth-first over the kNN graph
    and take the sign that agrees with the mean normal of already-oriented
    neighbors; a point with none faces away from its local centroid (the
    first seed faces away from the cloud centroid). Rank-deficient
    neighborhoods fall back to +z and are marked in ``normal_fallback``.
    """
    if k < 3:
        raise ValueError("pca_normals needs k >= 3")
    m = len(cloud)
    if m == 0:
        raise EmptyCloudError("empty cloud")
    pos = cloud.positions
    kk = min(k, m)
    _, nbr = knn_batch(pos, kk)
    evals, evecs, centroid = _pca_frames(pos, nbr)
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], 1e-300)
    fallback = (evals[:, 1] <= 1e-10 * scale) | (evals[:, 2] <= 0) | (kk < 3)
    normals[fallback] = _UP

    done = np.zeros(m, dtype=bool) if oriented is None else np.asarray(oriented, dtype=bool).copy()
    out = cloud.normals.copy()
    out[~done] = normals[~done]
    # sign propagation over the symmetric kNN graph
    adj = [[] for _ in range(m)]
    for i in range(m):
        for j in nbr[i]:
            if j != i:
                adj[i].append(j)
                adj[j].append(i)
    gcenter = pos.mean(axis=0)
    queue = deque(np.flatnonzero(done).tolist())
    seen = done.copy()

    def orient(i, use_global):
        if fallback[i]:
            return
        nb_done = [j for j in adj[i] if done[j]]
        if nb_done:
            ref = out[nb_done].mean(axis=0)
        else:
            ref = pos[i] - (gcenter if use_global else centroid[i])
        if out[i] @ ref < 0:
            out[i] = -out[i]

    remaining = np.argsort(-np.linalg.norm(pos - gcenter, axis=1), kind="stable")
    first = True
    ptr = 0
    while True:
        while queue:
            i = queue.popleft()
            for j in adj[i]:
                if not seen[j]:
                    seen[j] = True
                    orient(j, False)
                    done[j] = True
                    queue.append(j)
        while ptr < m and seen[remaining[ptr]]:
            ptr += 1
        if ptr >= m:
            break
        s = remaining[ptr]
        seen[s] = True
        orient(s, first)
        first = False
        done[s] = True
        queue.append(s)

    new = cloud.copy()
    new.normals = _normalize(out)
    new.normal_fallback = fallback & (oriented is None or ~np.asarray(oriented, dtype=bool))
    return new


# ---------------------------------------------------------------------------
# area weights
# ---------------------------------------------------------------------------

_DISK_SIDES = 64


@njit(cache=True)
def _clip_halfplane(px, py, n, ax, ay, b, ox, oy):
    # keep {y : a.y <= b}; returns the new vertex count
    cnt = 0
    for i in range(n):
        j = (i + 1) % n
        si = ax * px[i] + ay * py[i] - b
        sj = ax * px[j] + ay * py[j] - b
        if si <= 0.0:
            ox[cnt] = px[i]
            oy[cnt] = py[i]
            cnt += 1
        if (si < 0.0 < sj) or (sj < 0.0 < si):
            s = si / (si - sj)
            ox[cnt] = px[i] + s * (px[j] - px[i])
            oy[cnt] = py[i] + s * (py[j] - py[i])
            cnt += 1
    return cnt


@njit(cache=True)
def _voronoi_areas(proj, radius):
    m, k, _ = proj.shape
    cap = _DISK_SIDES + 2 * k + 4
    out = np.zeros(m)
    px = np.empty(cap)
    py = np.empty(cap)
    ox = np.empty(cap)
    oy = np.empty(cap)
    for i in range(m):
        r = radius[i]
        n = _DISK_SIDES
        for s in range(n):
            ang = 2.0 * np.pi * s / n
            px[s] = r * np.cos(ang)
            py[s] = r * np.sin(ang)
        for j in range(k):
            ax = proj[i, j, 0]
            ay = proj[i, j, 1]
            d2 = ax * ax + ay * ay
            if d2 <= 1e-24 * r * r:
                continue
            n = _clip_halfplane(px, py, n, ax, ay, 0.5 * d2, ox, oy)
            for s in range(n):
                px[s] = ox[s]
                py[s] = oy[s]
            if n < 3:
                break
        area = 0.0
        if n >= 3:
            for s in range(n):
                t = (s + 1) % n
                area += px[s] * py[t] - px[t] * py[s]
        out[i] = 0.5 * abs(area)
    return out


def _tangent_basis(normals):
    helper = np.where(np.abs(normals[:, [0]]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    u = _normalize(np.cross(normals, helper))
    v = np.cross(normals, u)
    return u, v


def estimate_area_weights(cloud: OrientedPointCloud, k: int = 16) -> OrientedPointCloud:
    """Per-point area of the tangent-plane Voronoi cell of its k-neighborhood.

    The cell is clipped to the disk bounding the projected neighborhood.
    Points whose neighbors all lie beyond 10x the median spacing get the
    median area.
    """
    if k < 4:
        raise ValueError("estimate_area_weights needs k >= 4")
    m = len(cloud)
    if m == 0:
        raise EmptyCloudError("empty cloud")
    new = cloud.copy()
    if m == 1:
        log.warning("single point cloud: using unit area")
        new.areas = np.ones(1)
        return new
    kk = min(k + 1, m)
    dist, nbr = knn_batch(cloud.positions, kk)
    dist, nbr = dist[:, 1:], nbr[:, 1:]
    d = cloud.positions[nbr] - cloud.positions[:, None, :]
    u, v = _tangent_basis(cloud.normals)
    proj = np.stack([np.einsum("mki,mi->mk", d, u), np.einsum("mki,mi->mk", d, v)], axis=-1)
    radius = np.max(np.linalg.norm(proj, axis=-1), axis=1)
    radius = np.maximum(radius, 1e-12 * max(1.0, float(np.max(dist))))
    areas = _voronoi_areas(np.ascontiguousarray(proj), radius)

    spacing = float(np.median(dist[:, 0]))
    isolated = dist[:, 0] > 10.0 * spacing
    bad = ~np.isfinite(areas) | (areas <= 0)
    fix = isolated | bad
    if fix.any():
        good = areas[~fix]
        fill = float(np.median(good)) if good.size else math.pi * (0.5 * spacing) ** 2
        if fill <= 0 or not np.isfinite(fill):
            fill = 1.0
        log.warning("%d isolated or degenerate points given the median area %.3g", int(fix.sum()), fill)
        areas = np.where(fix, fill, areas)
    new.areas = areas
    return new


def with_moments(cloud: OrientedPointCloud, moments) -> OrientedPointCloud:
    return replace(cloud.copy(), moments=np.asarray(moments, dtype=float).reshape(len(cloud), -1))
