"""Marching-cubes meshing, PLY I/O and surface-error evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .geometry import RigidTransform
from .tsdf import Submap


@dataclass(eq=False)
class TriMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.empty((0, 3), dtype=np.int64))
    colors: np.ndarray = field(default_factory=lambda: np.empty((0, 3), dtype=np.uint8))

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.colors) != len(self.vertices):
            self.colors = np.full((len(self.vertices), 3), 200, dtype=np.uint8)
        self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        if len(self.triangles) and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError("triangle index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh has non-finite vertices")

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0

    def transformed(self, T: RigidTransform) -> TriMesh:
        return TriMesh(T.apply(self.vertices) if len(self) else self.vertices,
                       self.triangles, self.colors)

    @staticmethod
    def concatenate(meshes) -> TriMesh:
        meshes = [m for m in meshes if not m.is_empty]
        if not meshes:
            return TriMesh()
        offsets = np.cumsum([0] + [len(m) for m in meshes[:-1]])
        return TriMesh(
            np.concatenate([m.vertices for m in meshes]),
            np.concatenate([m.triangles + o for m, o in zip(meshes, offsets)]),
            np.concatenate([m.colors for m in meshes]),
        )


def _padded_block(submap: Submap, index):
    """(B+1)^3 distance/weight/color arrays: the block plus its +x/+y/+z shell."""
    B = submap.block_size
    d = np.zeros((B + 1,) * 3, dtype=np.float64)
    w = np.zeros((B + 1,) * 3, dtype=np.float64)
    c = np.zeros((B + 1,) * 3 + (3,), dtype=np.uint8)
    bd, bw, bc = submap.block_data(index)
    d[:B, :B, :B] = bd
    w[:B, :B, :B] = bw
    c[:B, :B, :B] = bc
    shell = np.zeros((B + 1,) * 3, dtype=bool)
    shell[B, :, :] = shell[:, B, :] = shell[:, :, B] = True
    local = np.argwhere(shell)
    vidx = np.asarray(index, dtype=np.int64) * B + local
    sd, sw, sc, _ = submap.sample_voxels(vidx)
    d[shell] = sd  # argwhere and boolean indexing share C order
    w[shell] = sw
    c[shell] = sc
    return d, w, c


def extract_mesh(submap: Submap, global_frame: bool = True) -> TriMesh:
    """Marching cubes at the zero level over every allocated block.

    A cube is meshed only when all eight corners are observed; vertices sit
    on cube edges by linear interpolation of the distance and are returned
    in the global frame (``submap.frame`` applied) unless told otherwise.
    """
    B = submap.block_size
    vs = submap.voxel_size
    parts = []
    for index in submap.block_indices():
        d, w, c = _padded_block(submap, index)
        obs = w > 0
        cube_ok = np.ones((B, B, B), dtype=bool)
        for dx, dy, dz in np.ndindex(2, 2, 2):
            cube_ok &= obs[dx : dx + B, dy : dy + B, dz : dz + B]
        if not cube_ok.any():
            continue
        corner_vals = np.stack([d[dx : dx + B, dy : dy + B, dz : dz + B][cube_ok]
                                for dx, dy, dz in np.ndindex(2, 2, 2)])
        if not ((corner_vals.min(axis=0) < 0) & (corner_vals.max(axis=0) > 0)).any():
            continue
        mask = np.zeros((B + 1,) * 3, dtype=bool)
        mask[1:, 1:, 1:] = cube_ok  # skimage tests a cube's mask at its upper corner
        try:
            verts, faces, _, _ = marching_cubes(d, 0.0, method="lorensen", mask=mask)
        except (RuntimeError, ValueError):
            continue
        if len(faces) == 0:
            continue
        near = np.clip(np.rint(verts).astype(int), 0, B)
        colors = c[near[:, 0], near[:, 1], near[:, 2]]
        pts = (verts + np.asarray(index) * B + 0.5) * vs
        parts.append(TriMesh(pts, faces, colors))
    mesh = TriMesh.concatenate(parts)
    if global_frame and not mesh.is_empty:
        mesh = mesh.transformed(submap.frame)
    return mesh


# -- evaluation ------------------------------------------------------------------


@dataclass
class SurfaceError:
    rmse: float
    median: float
    distances: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.distances))


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Row-wise closest points (Ericson, Real-Time Collision Detection 5.1.5)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def assign(mask, value):
        m = mask & ~done
        out[m] = value[m] if value.ndim == 2 else value
        done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0) & (d2 <= 0), a)
        assign((d3 >= 0) & (d4 <= d3), b)
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        assign((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = 1.0 / (va + vb + vc)
        v, w = vb * denom, vc * denom
        assign(np.ones(len(p), dtype=bool), a + v[:, None] * ab + w[:, None] * ac)
    bad = ~np.all(np.isfinite(out), axis=1)
    if bad.any():
        # zero-area triangles: the nearest point lies on one of the edges
        out[bad] = _closest_on_edges(p[bad], a[bad], b[bad], c[bad])
    return out


def _closest_on_segment(p, u, v):
    uv = v - u
    len2 = np.einsum("ij,ij->i", uv, uv)
    t = np.einsum("ij,ij->i", p - u, uv) / np.where(len2 > 0, len2, 1.0)
    return u + np.clip(t, 0.0, 1.0)[:, None] * uv


def _closest_on_edges(p, a, b, c):
    cands = np.stack([_closest_on_segment(p, a, b), _closest_on_segment(p, b, c),
                      _closest_on_segment(p, c, a)])
    best = np.argmin(np.linalg.norm(cands - p[None], axis=2), axis=0)
    return cands[best, np.arange(len(p))]


def mesh_distance(points: np.ndarray, reference: TriMesh) -> np.ndarray:
    """Exact unsigned distance from points to a reference triangle mesh."""
    tri = reference.vertices[reference.triangles]
    centroids = tri.mean(axis=1)
    radius = np.max(np.linalg.norm(tri - centroids[:, None, :], axis=2), axis=1).max()
    tree = cKDTree(centroids)
    _, nearest = tree.query(points)
    cp = closest_point_on_triangles(points, tri[nearest, 0], tri[nearest, 1], tri[nearest, 2])
    best = np.linalg.norm(points - cp, axis=1)
    # any closer triangle has its centroid within best + radius
    for i, cands in enumerate(tree.query_ball_point(points, best + radius + 1e-12)):
        if len(cands) <= 1:
            continue
        cands = np.asarray(cands)
        q = np.repeat(points[i][None], len(cands), axis=0)
        cpi = closest_point_on_triangles(q, tri[cands, 0], tri[cands, 1], tri[cands, 2])
        best[i] = min(best[i], np.linalg.norm(q - cpi, axis=1).min())
    return best


def surface_error(mesh: TriMesh, truth) -> SurfaceError:
    """Per-vertex distance to the truth surface, with RMSE and median.

    ``truth`` is either an analytic scene exposing ``distance(points)`` or a
    reference :class:`TriMesh`.
    """
    if mesh.is_empty:
        raise ValueError("cannot evaluate an empty mesh")
    if isinstance(truth, TriMesh):
        dist = mesh_distance(mesh.vertices, truth)
    else:
        dist = np.abs(truth.distance(mesh.vertices))
    return SurfaceError(float(np.sqrt(np.mean(dist**2))), float(np.median(dist)), dist)


# -- PLY -----------------------------------------------------------------------------


def write_ply(path: str | Path, mesh: TriMesh, binary: bool = True) -> None:
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            vdt = np.dtype([("p", "<f4", (3,)), ("c", "u1", (3,))])
            v = np.empty(len(mesh.vertices), dtype=vdt)
            v["p"] = mesh.vertices
            v["c"] = mesh.colors
            fh.write(v.tobytes())
            fdt = np.dtype([("n", "u1"), ("i", "<i4", (3,))])
            f = np.empty(len(mesh.triangles), dtype=fdt)
            f["n"] = 3
            f["i"] = mesh.triangles
            fh.write(f.tobytes())
        else:
            lines = [
                f"{x:.7g} {y:.7g} {z:.7g} {r} {g} {b}"
                for (x, y, z), (r, g, b) in zip(mesh.vertices.astype(np.float32), mesh.colors)
            ]
            lines += [f"3 {i} {j} {k}" for i, j, k in mesh.triangles]
            fh.write(("\n".join(lines) + "\n").encode("ascii") if lines else b"")


def read_ply(path: str | Path) -> TriMesh:
    """Read meshes written by :func:`write_ply` (ascii or binary little endian)."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError(f"{path} is not a PLY file")
        fmt, n_vert, n_face, props = None, 0, 0, []
        element = None
        while True:
            line = fh.readline()
            if not line:
                raise ValueError("unterminated PLY header")
            tok = line.decode("ascii").split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                element = tok[1]
                if element == "vertex":
                    n_vert = int(tok[2])
                elif element == "face":
                    n_face = int(tok[2])
            elif tok[0] == "property" and element == "vertex":
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if props[:6] != ["x", "y", "z", "red", "green", "blue"] or len(props) != 6:
            raise ValueError(f"unsupported vertex layout {props}")
        if fmt == "binary_little_endian":
            vdt = np.dtype([("p", "<f4", (3,)), ("c", "u1", (3,))])
            v = np.frombuffer(fh.read(n_vert * vdt.itemsize), dtype=vdt)
            fdt = np.dtype([("n", "u1"), ("i", "<i4", (3,))])
            f = np.frombuffer(fh.read(n_face * fdt.itemsize), dtype=fdt)
            if n_face and np.any(f["n"] != 3):
                raise ValueError("only triangle faces are supported")
            return TriMesh(v["p"].astype(np.float64), f["i"].astype(np.int64), v["c"].copy())
        if fmt == "ascii":
            rows = fh.read().decode("ascii").split("\n")
            verts = np.array([r.split() for r in rows[:n_vert]], dtype=np.float64).reshape(-1, 6)
            faces = np.array([r.split() for r in rows[n_vert : n_vert + n_face]],
                             dtype=np.int64).reshape(-1, 4)
            return TriMesh(verts[:, :3], faces[:, 1:], verts[:, 3:].astype(np.uint8))
        raise ValueError(f"unsupported PLY format {fmt}")
