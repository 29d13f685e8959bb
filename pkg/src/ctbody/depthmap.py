"""Top-view depth maps, the orthographic camera, and their file format.

The camera looks straight down world -z from the plane ``z = plane_z_mm``.
Pixel ``(i, j)`` (row, column) has its center at world
``x = origin_mm[0] + i * pitch_mm[0]``, ``y = origin_mm[1] + j * pitch_mm[1]``.
A pixel's depth is ``plane_z_mm - z`` of the surface seen through it.

On disk a depth map is two files: ``<stem>.depth`` holds the 8-byte magic
``DEPTHU16``, u32 width, u32 height and then ``height * width`` little-endian
u16 depths in millimeters, row-major, with 0 meaning invalid;
``<stem>.json`` holds the camera.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import IoError

DEPTH_MAGIC = b"DEPTHU16"


@dataclass
class OrthoCamera:
    shape: Tuple[int, int]  # (rows, cols)
    pitch_mm: Tuple[float, float]  # (row pitch, col pitch)
    origin_mm: Tuple[float, float]  # world (x, y) of pixel (0, 0) center
    plane_z_mm: float
    near_mm: float = 0.0
    far_mm: float = 1e6

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        pitch = np.broadcast_to(np.asarray(self.pitch_mm, dtype=float), (2,))
        self.pitch_mm = (float(pitch[0]), float(pitch[1]))
        self.origin_mm = (float(self.origin_mm[0]), float(self.origin_mm[1]))
        self.plane_z_mm = float(self.plane_z_mm)
        if min(self.pitch_mm) <= 0:
            raise ValueError("pixel pitch must be positive")
        if not self.near_mm < self.far_mm:
            raise ValueError("near clip must be below far clip")

    def to_dict(self) -> dict:
        return {"shape": list(self.shape), "pitch_mm": list(self.pitch_mm), "origin_mm": list(self.origin_mm),
                "plane_z_mm": self.plane_z_mm, "near_mm": self.near_mm, "far_mm": self.far_mm, "view_axis": "-z"}

    @classmethod
    def from_dict(cls, d: dict) -> "OrthoCamera":
        return cls(d["shape"], d["pitch_mm"], d["origin_mm"], d["plane_z_mm"], d.get("near_mm", 0.0), d.get("far_mm", 1e6))

    def pixel_centers_mm(self):
        i = np.arange(self.shape[0])
        j = np.arange(self.shape[1])
        return self.origin_mm[0] + i * self.pitch_mm[0], self.origin_mm[1] + j * self.pitch_mm[1]


@dataclass
class DepthMap:
    depth: np.ndarray  # (rows, cols) mm, or normalized values when ``norm`` is set
    valid: np.ndarray  # (rows, cols) bool
    camera: Optional[OrthoCamera] = None
    norm: Optional[Tuple[float, float]] = None  # (min_mm, max_mm) of a normalized map

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def depth_mm(self) -> np.ndarray:
        if self.norm is None:
            return self.depth
        lo, hi = self.norm
        return self.depth * (hi - lo) + lo

    def copy(self) -> "DepthMap":
        return DepthMap(self.depth.copy(), self.valid.copy(), self.camera, self.norm)


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".depth", ".json") else p


def write_depth(dmap: DepthMap, path) -> None:
    stem = _stem(path)
    mm = np.where(dmap.valid, np.rint(dmap.depth_mm()), 0.0)
    if mm.max(initial=0) > 65535:
        raise IoError("depth exceeds the u16 millimeter range")
    mm = np.clip(mm, 0, 65535).astype("<u2")
    mm[dmap.valid & (mm == 0)] = 1
    try:
        with open(stem.with_suffix(".depth"), "wb") as fh:
            fh.write(DEPTH_MAGIC)
            fh.write(struct.pack("<II", dmap.width, dmap.height))
            fh.write(mm.tobytes())
        with open(stem.with_suffix(".json"), "w") as fh:
            json.dump({"camera": dmap.camera.to_dict() if dmap.camera else None}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write depth map {stem}: {exc}") from exc


def read_depth(path) -> DepthMap:
    stem = _stem(path)
    try:
        raw = stem.with_suffix(".depth").read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read depth map {stem}: {exc}") from exc
    if raw[:8] != DEPTH_MAGIC:
        raise IoError(f"{stem}.depth is not a depth map")
    w, h = struct.unpack("<II", raw[8:16])
    mm = np.frombuffer(raw, dtype="<u2", count=w * h, offset=16).reshape(h, w).astype(np.float64)
    camera = None
    side = stem.with_suffix(".json")
    if side.exists():
        cam = json.loads(side.read_text()).get("camera")
        camera = OrthoCamera.from_dict(cam) if cam else None
    return DepthMap(mm, mm > 0, camera)
