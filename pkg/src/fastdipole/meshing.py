"""Zero-level-set extraction and mesh I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

GRID_MAGIC = b"FDGR"
GRID_VERSION = 1
DEGENERATE_AREA = 1e-12


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self):
        return len(self.triangles) == 0

    def triangle_areas(self):
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def euler_characteristic(self):
        edges = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        return len(self.vertices) - n_edges + len(self.triangles)

    def sample(self, n, rng):
        """Area-uniform random surface points."""
        if self.is_empty:
            raise ValueError("cannot sample an empty mesh")
        a = self.triangle_areas()
        tri = rng.choice(len(a), size=n, p=a / a.sum())
        u = rng.random((n, 2))
        flip = u.sum(axis=1) > 1
        u[flip] = 1 - u[flip]
        v = self.vertices[self.triangles[tri]]
        return v[:, 0] + u[:, :1] * (v[:, 1] - v[:, 0]) + u[:, 1:] * (v[:, 2] - v[:, 0])


def cleanup(mesh: TriangleMesh) -> TriangleMesh:
    """Drop triangles with area at most 1e-12 and unreferenced vertices."""
    keep = mesh.triangle_areas() > DEGENERATE_AREA
    tri = mesh.triangles[keep]
    used = np.unique(tri)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    nrm = None if mesh.normals is None else mesh.normals[used]
    return TriangleMesh(mesh.vertices[used], remap[tri], nrm)


@dataclass
class Grid:
    """Scalar samples on a regular lattice spanning [lo, hi] (node-centered)."""

    values: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @property
    def shape(self):
        return self.values.shape

    @property
    def spacing(self):
        return (self.hi - self.lo) / (np.array(self.values.shape) - 1)

    def points(self):
        axes = [np.linspace(self.lo[i], self.hi[i], self.values.shape[i]) for i in range(3)]
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)


def grid_points(resolution, bbox):
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
    if np.any(res < 2):
        raise ValueError("grid resolution must be at least 2 per axis")
    lo, hi = (np.asarray(b, dtype=float) for b in bbox)
    g = Grid(np.zeros(tuple(res)), lo, hi)
    return g, g.points()


def sample_grid(model, resolution, bbox=None, chunk=65536) -> Grid:
    """Geometry field f = 1/2 - D on a regular grid (default: cloud bbox + 5%)."""
    if bbox is None:
        bbox = model.cloud.bbox(0.05)
    g, pts = grid_points(resolution, bbox)
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        out[s:s + chunk] = model.tree.geometry(pts[s:s + chunk], model.kernel)
    g.values = (0.5 - out).reshape(g.shape)
    return g


def grid_from_function(fn, resolution, bbox) -> Grid:
    g, pts = grid_points(resolution, bbox)
    g.values = np.asarray(fn(pts), dtype=float).reshape(g.shape)
    return g


def marching_cubes(grid: Grid, iso=0.0) -> TriangleMesh:
    """Triangulate the iso level set with the 256-case lookup table and
    linear edge interpolation. Constant-sign grids give an empty mesh."""
    from skimage import measure

    v = grid.values
    if not np.all(np.isfinite(v)):
        raise ValueError("grid contains non-finite values")
    if v.min() > iso or v.max() < iso or v.min() == v.max():
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, normals, _ = measure.marching_cubes(v, level=iso, spacing=tuple(grid.spacing),
                                                      method="lewiner")
    # faces wind counterclockwise seen from the side where f increases;
    # the returned normals point the other way
    mesh = TriangleMesh(verts + grid.lo, faces, -normals)
    return cleanup(mesh)


def extract_mesh(model, resolution=128, bbox=None) -> TriangleMesh:
    return marching_cubes(sample_grid(model, resolution, bbox), 0.0)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def export_obj(mesh: TriangleMesh, path):
    """Write v / vn / f records with 9 significant digits."""
    path = Path(path)
    lines = [f"# vertices {len(mesh.vertices)} faces {len(mesh.triangles)}"]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    if mesh.normals is not None:
        lines += [f"vn {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.normals]
        lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in mesh.triangles + 1]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in mesh.triangles + 1]
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write mesh to {path}: {exc}") from exc


def read_obj(path) -> TriangleMesh:
    verts, norms, faces = [], [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(p) for p in parts[1:4]])
                elif parts[0] == "vn":
                    norms.append([float(p) for p in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
            except ValueError as exc:
                raise ValueError(f"{path}:{ln}: {exc}") from exc
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3),
                        np.array(norms).reshape(-1, 3) if norms else None)


def dump_grid(grid: Grid, path):
    """Flat binary: magic 'FDGR', u32 version, u32 nx ny nz, f64 lo[3] hi[3],
    u8 dtype code (1 = float32), then x-major float32 values."""
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<4I", GRID_VERSION, *grid.shape))
        fh.write(struct.pack("<6d", *grid.lo, *grid.hi))
        fh.write(struct.pack("<B", 1))
        fh.write(np.ascontiguousarray(grid.values, dtype="<f4").tobytes())


def load_grid(path) -> Grid:
    data = Path(path).read_bytes()
    if data[:4] != GRID_MAGIC:
        raise ValueError(f"{path}: not a grid dump")
    ver, nx, ny, nz = struct.unpack_from("<4I", data, 4)
    if ver != GRID_VERSION:
        raise ValueError(f"{path}: grid version {ver}, expected {GRID_VERSION}")
    b = struct.unpack_from("<6d", data, 20)
    off = 20 + 48 + 1
    vals = np.frombuffer(data, dtype="<f4", count=nx * ny * nz, offset=off).reshape(nx, ny, nz)
    return Grid(vals.astype(float), np.array(b[:3]), np.array(b[3:]))
