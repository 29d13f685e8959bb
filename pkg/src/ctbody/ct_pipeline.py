"""CT volume to body-surface point cloud.

threshold -> morphology -> bed removal -> marching cubes -> area-weighted
surface sampling. Volumes and meshes are in millimeters; the sampled cloud is
converted to meters.

Volume files are a JSON sidecar (``dims``, ``spacing``, ``origin``,
``dtype``, ``data``) next to a raw little-endian voxel blob. The blob holds
``intensities[i, j, k]`` of shape ``dims`` in C order (``k`` fastest).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage as ndi
from skimage import measure

from .errors import ConfigError, EmptyMask, EmptyMesh, InvalidRange, IoError

logger = logging.getLogger(__name__)


@dataclass
class Volume:
    intensities: np.ndarray  # (nx, ny, nz) HU
    spacing: tuple = (1.0, 1.0, 1.0)  # mm per voxel
    origin: tuple = (0.0, 0.0, 0.0)  # world mm of voxel (0, 0, 0) center

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities)
        if self.intensities.ndim != 3 or min(self.intensities.shape) < 1:
            raise ConfigError("volume must be a non-empty 3D grid")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if min(self.spacing) <= 0:
            raise ConfigError("voxel spacing must be positive")

    @property
    def dims(self):
        return self.intensities.shape


@dataclass
class BinaryMask:
    data: np.ndarray  # (nx, ny, nz) bool
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)

    @property
    def dims(self):
        return self.data.shape

    def like(self, data) -> "BinaryMask":
        return BinaryMask(data, self.spacing, self.origin)


@dataclass
class TriMesh:
    vertices: np.ndarray  # (N, 3) mm
    faces: np.ndarray  # (F, 3)


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) meters
    source: str = ""
    face_index: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.points)


@dataclass
class CtConfig:
    hu_lo: float = -300.0
    hu_hi: float = 2000.0
    open_radius: int = 1
    close_radius: int = 1
    smooth_sigma: float = 0.7  # voxels; 0 runs marching cubes on the raw {0, 1} field
    bed_cut_mm: Optional[float] = None  # drop voxels below this world height before component selection
    bed_cut_axis: int = 2
    n_points: int = 5000
    torso_box_mm: Optional[list] = None  # [[xmin, ymin, zmin], [xmax, ymax, zmax]]


def threshold(vol: Volume, lo: float, hi: float) -> BinaryMask:
    if lo > hi:
        raise InvalidRange(f"lower threshold {lo} exceeds upper threshold {hi}")
    I = vol.intensities
    return BinaryMask((I >= lo) & (I <= hi), vol.spacing, vol.origin)


def ball(radius: int) -> np.ndarray:
    r = int(radius)
    g = np.arange(-r, r + 1)
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    return x * x + y * y + z * z <= r * r


def morph(mask: BinaryMask, op: str, radius: int) -> BinaryMask:
    """Binary opening or closing with a discrete ball.

    The grid is zero-padded by the radius first, so closing never erodes
    structure touching the volume boundary.
    """
    if radius < 0:
        raise ConfigError("morphology radius must be >= 0")
    if op not in ("open", "close"):
        raise ConfigError(f"unknown morphology op {op!r}")
    if radius == 0:
        return mask.like(mask.data.copy())
    se = ball(radius)
    padded = np.pad(mask.data, radius)
    if op == "open":
        out = ndi.binary_dilation(ndi.binary_erosion(padded, se), se)
    else:
        out = ndi.binary_erosion(ndi.binary_dilation(padded, se), se)
    sl = tuple(slice(radius, radius + n) for n in mask.dims)
    return mask.like(out[sl])


def remove_bed(mask: BinaryMask, cut_mm: Optional[float] = None, axis: int = 2) -> BinaryMask:
    """Keep the largest 6-connected component.

    Ties go to the component whose first voxel has the smallest linear index.
    ``cut_mm`` optionally clears everything below a world-height plane first,
    for beds fused to the body.
    """
    data = mask.data.copy()
    if cut_mm is not None:
        coord = mask.origin[axis] + np.arange(mask.dims[axis]) * mask.spacing[axis]
        shape = [1, 1, 1]
        shape[axis] = -1
        data &= (coord >= cut_mm).reshape(shape)
    if not data.any():
        raise EmptyMask("no foreground voxels")
    labels, n = ndi.label(data, structure=ndi.generate_binary_structure(3, 1))
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=n + 1)
    ids, first = np.unique(flat, return_index=True)
    first_index = np.full(n + 1, np.iinfo(np.int64).max)
    first_index[ids] = first
    best = min(range(1, n + 1), key=lambda i: (-counts[i], first_index[i]))
    return mask.like(labels == best)


def marching_cubes(mask: BinaryMask, iso: float = 0.5, smooth_sigma: float = 0.7) -> TriMesh:
    """Isosurface of the mask in world millimeters.

    The {0, 1} field is zero-padded (so the surface closes) and, unless
    ``smooth_sigma`` is 0, Gaussian-smoothed in voxel units before extraction.
    Faces are oriented outward.
    """
    if not mask.data.any():
        raise EmptyMask("no foreground voxels")
    pad = 2 + int(np.ceil(3 * smooth_sigma))
    field_ = np.pad(mask.data.astype(np.float64), pad)
    if smooth_sigma > 0:
        field_ = ndi.gaussian_filter(field_, smooth_sigma, mode="constant")
    if field_.max() <= iso:
        raise EmptyMask("mask too thin to survive smoothing at this iso level")
    verts, faces, _, _ = measure.marching_cubes(field_, iso, allow_degenerate=False)
    spacing = np.asarray(mask.spacing)
    verts = (verts - pad) * spacing + np.asarray(mask.origin)
    faces = faces.astype(np.int64)
    tri = verts[faces]
    area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    faces = faces[area2 > 0]
    used, inverse = np.unique(faces, return_inverse=True)
    verts, faces = verts[used], inverse.reshape(-1, 3)
    if signed_volume(verts, faces) < 0:
        faces = faces[:, [0, 2, 1]]
    return TriMesh(verts, faces)


def signed_volume(verts, faces) -> float:
    tri = np.asarray(verts)[np.asarray(faces)]
    return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)


def surface_area(verts, faces) -> float:
    tri = np.asarray(verts)[np.asarray(faces)]
    return float(0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1).sum())


def sample_surface(mesh: TriMesh, n: int, seed: int, to_meters: bool = True) -> PointCloud:
    """Area-weighted uniform surface sampling, deterministic per seed."""
    if n < 1:
        raise ConfigError("need at least one sample")
    verts = np.asarray(mesh.vertices, dtype=np.float64)
    faces = np.asarray(mesh.faces, dtype=np.int64)
    if faces.size == 0:
        raise EmptyMesh("cannot sample an empty mesh")
    tri = verts[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    cum = np.cumsum(area)
    if cum[-1] <= 0:
        raise EmptyMesh("mesh has zero area")
    rng = np.random.default_rng(seed)
    pick = np.searchsorted(cum, rng.random(n) * cum[-1], side="right")
    pick = np.minimum(pick, len(faces) - 1)
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    t = tri[pick]
    pts = t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])
    if to_meters:
        pts = pts / 1000.0
    return PointCloud(pts, "ct", pick)


def crop_cloud(cloud: PointCloud, box_mm: Sequence) -> PointCloud:
    lo = np.asarray(box_mm[0], dtype=float) / 1000.0
    hi = np.asarray(box_mm[1], dtype=float) / 1000.0
    keep = np.all((cloud.points >= lo) & (cloud.points <= hi), axis=1)
    fi = cloud.face_index[keep] if cloud.face_index is not None else None
    return PointCloud(cloud.points[keep], cloud.source, fi)


def ct_to_cloud(vol: Volume, cfg: Optional[CtConfig] = None, seed: int = 0):
    """Full chain; returns (cloud, surface mesh)."""
    cfg = cfg or CtConfig()
    mask = threshold(vol, cfg.hu_lo, cfg.hu_hi)
    mask = morph(mask, "open", cfg.open_radius)
    mask = morph(mask, "close", cfg.close_radius)
    mask = remove_bed(mask, cfg.bed_cut_mm, cfg.bed_cut_axis)
    mesh = marching_cubes(mask, 0.5, cfg.smooth_sigma)
    cloud = sample_surface(mesh, cfg.n_points, seed)
    if cfg.torso_box_mm is not None:
        cloud = crop_cloud(cloud, cfg.torso_box_mm)
    logger.info("ct cloud: %d points from %d faces", len(cloud), len(mesh.faces))
    return cloud, mesh


# -- files ----------------------------------------------------------------------------

def write_volume(vol: Volume, path, dtype: str = "<i2") -> None:
    """Write ``<stem>.json`` + ``<stem>.raw``."""
    stem = Path(path).with_suffix("")
    data = np.ascontiguousarray(vol.intensities, dtype=dtype)
    meta = {"dims": list(vol.dims), "spacing": list(vol.spacing), "origin": list(vol.origin),
            "dtype": np.dtype(dtype).str, "order": "C", "data": stem.name + ".raw"}
    try:
        stem.with_suffix(".raw").write_bytes(data.tobytes())
        stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write volume {stem}: {exc}") from exc


def read_volume(path) -> Volume:
    p = Path(path)
    if p.suffix.lower() in (".nii", ".gz"):
        return read_nifti(p)
    side = p.with_suffix(".json")
    try:
        meta = json.loads(side.read_text())
        raw = (side.parent / meta["data"]).read_bytes()
    except (OSError, KeyError, ValueError) as exc:
        raise IoError(f"cannot read volume {p}: {exc}") from exc
    dims = tuple(int(d) for d in meta["dims"])
    arr = np.frombuffer(raw, dtype=np.dtype(meta["dtype"]))
    if arr.size != int(np.prod(dims)):
        raise IoError(f"volume blob has {arr.size} voxels, header says {dims}")
    return Volume(arr.reshape(dims).astype(np.float64), meta["spacing"], meta["origin"])


def read_nifti(path) -> Volume:
    """NIfTI-1 input; needs the optional ``nibabel`` dependency."""
    try:
        import nibabel
    except ImportError as exc:
        raise IoError("reading NIfTI needs nibabel (pip install ctbody[nifti])") from exc
    img = nibabel.load(str(path))
    zooms = img.header.get_zooms()[:3]
    origin = img.affine[:3, 3]
    return Volume(np.asarray(img.dataobj, dtype=np.float64), zooms, origin)
