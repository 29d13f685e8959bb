"""Evaluation metrics: MPJPE, PVE, region V2V and tape-measure circumferences.

Inputs are meters. Joint and vertex errors are reported in millimeters,
circumferences in centimeters.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .body_model import BodyModelSpec, BodyParams, forward, _axis_vector
from .errors import BadMask, DimensionMismatch, NoIntersection

LANDMARKS = ("chest", "waist", "hip")


@dataclass
class SliceSpec:
    name: str
    fraction: float  # of body height, measured from the lowest vertex along the up axis

    def __post_init__(self):
        if not 0.0 < self.fraction < 1.0:
            raise ValueError("slice fraction must lie in (0, 1)")


DEFAULT_SLICES = (SliceSpec("chest", 0.72), SliceSpec("waist", 0.62), SliceSpec("hip", 0.52))


def mpjpe(pred_joints, gt_joints) -> float:
    pred, gt = np.asarray(pred_joints, float), np.asarray(gt_joints, float)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"joint arrays differ: {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * 1000.0)


def pve(pred_vertices, gt_vertices, mask=None) -> float:
    pred, gt = np.asarray(pred_vertices, float), np.asarray(gt_vertices, float)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"vertex arrays differ: {pred.shape} vs {gt.shape}")
    if mask is not None:
        idx = np.asarray(mask)
        if idx.dtype == bool:
            if idx.shape[0] != pred.shape[0]:
                raise BadMask("boolean mask length differs from vertex count")
            idx = np.where(idx)[0]
        if idx.size == 0 or idx.min() < 0 or idx.max() >= pred.shape[0]:
            raise BadMask("mask is empty or indexes missing vertices")
        pred, gt = pred[idx], gt[idx]
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * 1000.0)


def _plane_basis(up):
    helper = np.array([1.0, 0.0, 0.0]) if abs(up[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(up, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(up, e1)


def slice_points(vertices, faces, up, level):
    """Points where the plane ``x . up = level`` crosses the triangle edges."""
    h = vertices @ up - level
    pts = []
    for a, b in ((0, 1), (1, 2), (2, 0)):
        ha, hb = h[faces[:, a]], h[faces[:, b]]
        cross = (ha < 0) != (hb < 0)
        if cross.any():
            t = ha[cross] / (ha[cross] - hb[cross])
            va, vb = vertices[faces[cross, a]], vertices[faces[cross, b]]
            pts.append(va + t[:, None] * (vb - va))
    on = np.abs(h) == 0
    if on.any():
        used = np.zeros(len(vertices), dtype=bool)
        used[faces.ravel()] = True
        pts.append(vertices[on & used])
    return np.concatenate(pts) if pts else np.zeros((0, 3))


def hull_perimeter(points2d) -> float:
    pts = np.asarray(points2d, float)
    try:
        hull = ConvexHull(pts)
    except (QhullError, ValueError):
        # collinear or too few points: the hull degenerates to a doubled segment
        if len(pts) < 2:
            return 0.0
        d = pts - pts.mean(axis=0)
        _, _, vt = np.linalg.svd(d, full_matrices=False)
        proj = d @ vt[0]
        return float(2.0 * (proj.max() - proj.min()))
    ring = pts[hull.vertices]
    return float(np.linalg.norm(ring - np.roll(ring, -1, axis=0), axis=1).sum())


def circumference(mesh, slice_spec: SliceSpec, up_axis=0, faces=None, height_vertices=None) -> float:
    """Convex-hull perimeter (cm) of the mesh cross-section at a body-height fraction.

    ``faces`` restricts which triangles are cut (e.g. torso only); the body
    height still comes from all vertices, or from ``height_vertices``.
    """
    verts = np.asarray(mesh.vertices, float)
    faces = np.asarray(mesh.faces if faces is None else faces, dtype=np.int64)
    up = _axis_vector(up_axis)
    hv = verts if height_vertices is None else np.asarray(height_vertices, float)
    h = hv @ up
    level = h.min() + slice_spec.fraction * (h.max() - h.min())
    pts = slice_points(verts, faces, up, level)
    if len(pts) == 0:
        raise NoIntersection(f"{slice_spec.name} plane misses the mesh")
    e1, e2 = _plane_basis(up)
    return hull_perimeter(np.stack([pts @ e1, pts @ e2], axis=1)) * 100.0


@dataclass
class EvalConfig:
    up_axis: int = 0
    slices: list = field(default_factory=lambda: [asdict(s) for s in DEFAULT_SLICES])
    torso_region: str = "torso"
    circumference_pose: str = "rest"  # "rest": shaped mesh at theta=0, t=0; "posed": the evaluated mesh
    circumference_region: Optional[str] = "torso"

    def slice_specs(self):
        return [SliceSpec(**s) if isinstance(s, dict) else s for s in self.slices]


@dataclass
class MetricsReport:
    mpjpe_mm: float
    pve_mm: float
    torso_v2v_mm: Optional[float]
    circumference_cm: dict  # name -> {"pred", "gt", "abs_error"}

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def csv_row(self) -> dict:
        row = {"MPJPE_mm": self.mpjpe_mm, "PVE_mm": self.pve_mm, "torso_V2V_mm": self.torso_v2v_mm}
        for name, c in self.circumference_cm.items():
            row[f"{name}_err_cm"] = c["abs_error"]
        return row


def reports_to_csv(reports: dict) -> str:
    """One row per entry; columns mirror the pose/shape error tables."""
    buf = io.StringIO()
    rows = [{"entry": k, **r.csv_row()} for k, r in reports.items()]
    if not rows:
        return ""
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _region_faces(spec: BodyModelSpec, name):
    if name is None or name not in spec.regions:
        return None
    inside = np.zeros(spec.n_vertices, dtype=bool)
    inside[spec.regions[name]] = True
    return spec.faces[inside[spec.faces].all(axis=1)]


def evaluate(pred: BodyParams, gt: BodyParams, spec: BodyModelSpec, config: Optional[EvalConfig] = None) -> MetricsReport:
    config = config or EvalConfig()
    mp, mg = forward(spec, pred), forward(spec, gt)
    torso = spec.regions.get(config.torso_region)
    v2v = pve(mp.vertices, mg.vertices, torso) if torso is not None else None
    if config.circumference_pose == "rest":
        cp = forward(spec, BodyParams(pred.beta, np.zeros_like(pred.theta), np.zeros(3)))
        cg = forward(spec, BodyParams(gt.beta, np.zeros_like(gt.theta), np.zeros(3)))
    else:
        cp, cg = mp, mg
    faces = _region_faces(spec, config.circumference_region)
    circ = {}
    for s in config.slice_specs():
        a = circumference(cp, s, config.up_axis, faces)
        b = circumference(cg, s, config.up_axis, faces)
        circ[s.name] = {"pred": a, "gt": b, "abs_error": abs(a - b)}
    return MetricsReport(mpjpe(mp.joints, mg.joints), pve(mp.vertices, mg.vertices), v2v, circ)
