"""Orthographic top-view z-buffer rasterizer, mesh voxelizer and mesh I/O.

Triangles are rasterized in fixed point (1/256 pixel) with a top-left fill
rule, so pixels on an edge shared by two triangles are covered exactly once.
The voxelizer relies on that to count surface crossings per column.
"""

from __future__ import annotations

import logging
import re
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .depthmap import DepthMap, OrthoCamera
from .errors import EmptyMesh, IoError

logger = logging.getLogger(__name__)

_SUB = 256
_MAX_CANDIDATES = 1 << 21


def rasterize(uv: np.ndarray, shape):
    """Cover pixel centers with triangles given in continuous pixel coordinates.

    ``uv`` is (F, 3, 2) with pixel (r, c) centered at integer coordinates.
    Returns ``(rows, cols, face, bary, orientation)`` per covered pixel, where
    ``bary`` weights the three original vertices and ``orientation`` is the sign
    of the triangle's signed area in (row, col) space.
    """
    H, W = shape
    fixed = np.rint(np.asarray(uv, dtype=np.float64) * _SUB).astype(np.int64)
    p0, p1, p2 = fixed[:, 0], fixed[:, 1], fixed[:, 2]
    area = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
    orient = np.sign(area)
    keep = area != 0
    # make every triangle counter-clockwise; remember the vertex permutation
    perm = np.tile(np.arange(3), (len(fixed), 1))
    neg = area < 0
    perm[neg] = [0, 2, 1]
    ccw = np.take_along_axis(fixed, perm[:, :, None], axis=1)
    lo = np.ceil(ccw.min(axis=1) / _SUB).astype(np.int64)
    hi = np.floor(ccw.max(axis=1) / _SUB).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi[:, 0] = np.minimum(hi[:, 0], H - 1)
    hi[:, 1] = np.minimum(hi[:, 1], W - 1)
    ext = hi - lo + 1
    keep &= (ext > 0).all(axis=1)
    faces = np.where(keep)[0]

    out_r, out_c, out_f, out_b = [], [], [], []
    if faces.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty, np.zeros((0, 3)), np.zeros(0)
    size = ext[faces].max(axis=1)
    bucket = np.ceil(np.log2(np.maximum(size, 1))).astype(np.int64)
    for b in np.unique(bucket):
        fb = faces[bucket == b]
        s = 1 << int(b)
        chunk = max(1, _MAX_CANDIDATES // (s * s))
        off = np.stack(np.meshgrid(np.arange(s), np.arange(s), indexing="ij"), -1).reshape(-1, 2)
        for start in range(0, len(fb), chunk):
            f = fb[start:start + chunk]
            pix = lo[f][:, None, :] + off[None]  # (n, s*s, 2)
            inside = (pix <= hi[f][:, None, :]).all(axis=2)
            P = pix * _SUB
            V = ccw[f]
            E = np.empty(pix.shape[:2] + (3,), dtype=np.int64)
            ok = inside
            for k in range(3):
                a = V[:, (k + 1) % 3]
                bb = V[:, (k + 2) % 3]
                d = bb - a
                e = d[:, None, 0] * (P[..., 1] - a[:, None, 1]) - d[:, None, 1] * (P[..., 0] - a[:, None, 0])
                top_left = (d[:, 1] > 0) | ((d[:, 1] == 0) & (d[:, 0] < 0))
                ok = ok & ((e > 0) | ((e == 0) & top_left[:, None]))
                E[..., k] = e
            n_idx, c_idx = np.nonzero(ok)
            if n_idx.size == 0:
                continue
            fi = f[n_idx]
            lam = E[n_idx, c_idx].astype(np.float64) / area[fi, None] * orient[fi, None]
            # undo the permutation so weights refer to the original vertex order
            bary = np.empty_like(lam)
            np.put_along_axis(bary, perm[fi], lam, axis=1)
            out_r.append(pix[n_idx, c_idx, 0])
            out_c.append(pix[n_idx, c_idx, 1])
            out_f.append(fi)
            out_b.append(bary)
    if not out_r:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty, np.zeros((0, 3)), np.zeros(0)
    face = np.concatenate(out_f)
    return np.concatenate(out_r), np.concatenate(out_c), face, np.concatenate(out_b), orient[face]


def _mesh_arrays_mm(mesh):
    from .ct_pipeline import TriMesh

    if isinstance(mesh, TriMesh):
        verts = np.asarray(mesh.vertices, dtype=np.float64)
    else:
        verts = np.asarray(mesh.vertices, dtype=np.float64) * 1000.0
    faces = np.asarray(mesh.faces, dtype=np.int64)
    if verts.size == 0 or faces.size == 0:
        raise EmptyMesh("nothing to render")
    return verts, faces


def render_depth(mesh, cam: OrthoCamera) -> DepthMap:
    """Nearest-surface depth per pixel; uncovered pixels are invalid.

    ``mesh`` is a BodyMesh (meters) or a TriMesh (millimeters). Equal depths
    resolve to the lower face index.
    """
    verts, faces = _mesh_arrays_mm(mesh)
    tri = verts[faces]
    uv = np.stack([(tri[..., 0] - cam.origin_mm[0]) / cam.pitch_mm[0],
                   (tri[..., 1] - cam.origin_mm[1]) / cam.pitch_mm[1]], axis=-1)
    r, c, f, bary, _ = rasterize(uv, cam.shape)
    z = np.einsum("ni,ni->n", bary, tri[f, :, 2])
    depth = cam.plane_z_mm - z
    keep = (depth >= cam.near_mm) & (depth <= cam.far_mm)
    r, c, f, depth = r[keep], c[keep], f[keep], depth[keep]
    H, W = cam.shape
    out = np.zeros((H, W))
    valid = np.zeros((H, W), dtype=bool)
    if depth.size:
        pix = r * W + c
        order = np.lexsort((f, depth, pix))
        pix_sorted = pix[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix_sorted[1:] != pix_sorted[:-1]
        win = order[first]
        out.flat[pix[win]] = depth[win]
        valid.flat[pix[win]] = True
    return DepthMap(out, valid, cam)


def voxelize(vertices_mm: np.ndarray, faces: np.ndarray, dims, spacing, origin) -> np.ndarray:
    """Inside test of voxel centers against outward-oriented closed surfaces.

    Overlapping closed components are united: a voxel is inside when the
    winding number of the surface around its center is at least one.
    """
    verts = np.asarray(vertices_mm, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    nx, ny, nz = (int(d) for d in dims)
    tri = verts[faces]
    uv = np.stack([(tri[..., 0] - origin[0]) / spacing[0], (tri[..., 1] - origin[1]) / spacing[1]], axis=-1)
    r, c, f, bary, orient = rasterize(uv, (nx, ny))
    z = np.einsum("ni,ni->n", bary, tri[f, :, 2])
    count = np.clip(np.ceil((z - origin[2]) / spacing[2]), 0, nz).astype(np.int64)
    col = r * ny + c
    acc = np.zeros((nx * ny, nz + 1), dtype=np.int64)
    sign = orient.astype(np.int64)
    np.add.at(acc, (col, np.zeros_like(col)), sign)
    np.add.at(acc, (col, count), -sign)
    winding = np.cumsum(acc[:, :nz], axis=1)
    return (winding >= 1).reshape(nx, ny, nz)


# -- point to surface distance ----------------------------------------------------

def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest point on triangle (a, b, c) to p, row-wise (Ericson's region test)."""
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
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        res = a + ab * v[:, None] + ac * w[:, None]
        # edge regions
        t_ab = d1 / (d1 - d3)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        res[m] = a[m] + t_ab[m, None] * ab[m]
        t_ac = d2 / (d2 - d6)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        res[m] = a[m] + t_ac[m, None] * ac[m]
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        res[m] = b[m] + t_bc[m, None] * (c[m] - b[m])
    # vertex regions
    m = (d1 <= 0) & (d2 <= 0)
    res[m] = a[m]
    m = (d3 >= 0) & (d4 <= d3)
    res[m] = b[m]
    m = (d6 >= 0) & (d5 <= d6)
    res[m] = c[m]
    return res


def point_mesh_distance(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from each point to the triangle surface."""
    points = np.asarray(points, dtype=np.float64)
    tri = np.asarray(vertices, dtype=np.float64)[np.asarray(faces)]
    if tri.size == 0:
        raise EmptyMesh("no faces")
    centroid = tri.mean(axis=1)
    radius = np.linalg.norm(tri - centroid[:, None], axis=2).max()
    tree = cKDTree(centroid)
    d0, _ = tree.query(points)
    bound = d0 + radius
    out = np.empty(len(points))
    for i, cand in enumerate(tree.query_ball_point(points, bound)):
        cand = np.asarray(cand)
        t = tri[cand]
        q = closest_point_on_triangles(np.repeat(points[i][None], len(cand), 0), t[:, 0], t[:, 1], t[:, 2])
        out[i] = np.sqrt(((q - points[i]) ** 2).sum(axis=1).min())
    return out


# -- mesh files -----------------------------------------------------------------------

def export_mesh(mesh, path, fmt=None) -> None:
    """Write ASCII OBJ or binary little-endian PLY (vertices in the mesh's own units)."""
    verts = np.asarray(mesh.vertices, dtype=np.float64)
    faces = np.asarray(getattr(mesh, "faces", np.zeros((0, 3))), dtype=np.int64).reshape(-1, 3)
    if verts.size == 0:
        raise EmptyMesh("refusing to export an empty mesh")
    fmt = (fmt or Path(path).suffix.lstrip(".")).lower()
    try:
        if fmt == "obj":
            lines = ["# ctbody mesh"]
            lines += ["v {:.17g} {:.17g} {:.17g}".format(*v) for v in verts]
            lines += ["f {} {} {}".format(*(f + 1)) for f in faces]
            Path(path).write_text("\n".join(lines) + "\n")
        elif fmt == "ply":
            write_ply(path, verts, faces)
        else:
            raise IoError(f"unknown mesh format {fmt!r}")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_ply(path, verts, faces=None) -> None:
    verts = np.ascontiguousarray(verts, dtype="<f8")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(verts)}",
              "property double x", "property double y", "property double z"]
    if faces is not None and len(faces):
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(verts.tobytes())
        if faces is not None and len(faces):
            rec = np.zeros(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            rec["n"] = 3
            rec["idx"] = faces
            fh.write(rec.tobytes())


def load_mesh(path):
    """Read an OBJ or PLY written by :func:`export_mesh`; returns (vertices, faces)."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".obj":
            verts, faces = [], []
            for line in path.read_text().splitlines():
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
            return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii")
    if "binary_little_endian" not in header:
        raise IoError("only binary little-endian PLY is supported")
    nv = int(re.search(r"element vertex (\d+)", header).group(1))
    m = re.search(r"element face (\d+)", header)
    nf = int(m.group(1)) if m else 0
    verts = np.frombuffer(raw, dtype="<f8", count=nv * 3, offset=end).reshape(nv, 3).copy()
    rec = np.frombuffer(raw, dtype=[("n", "u1"), ("idx", "<i4", (3,))], count=nf, offset=end + nv * 24)
    return verts, rec["idx"].astype(np.int64)
