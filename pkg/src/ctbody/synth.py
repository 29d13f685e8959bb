"""Synthetic toy body model and paired dataset entries.

The toy model is a set of closed tubes (torso, head, four limbs) lying supine
in its own frame: +x runs from the feet to the head, +y points to the body's
left and +z is anterior, facing a camera that looks down -z. Its four shape
components are, in order: overall scale, torso girth, limb length and torso
length.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
from scipy import ndimage as ndi

from .body_model import BodyModelSpec, BodyParams, BodyMesh, forward, body_height, save_model, save_params
from .ct_pipeline import Volume, write_volume
from .render import OrthoCamera, render_depth, voxelize, export_mesh
from .depthmap import DepthMap, write_depth

logger = logging.getLogger(__name__)

LIMB_PROPORTIONS = {1: [1.0], 2: [0.52, 0.48], 3: [0.52, 0.36, 0.12]}
TORSO_JOINTS = ("pelvis", "spine1", "spine2", "neck")
LIMBS = ("l_arm", "r_arm", "l_leg", "r_leg")


@dataclass
class ToySpec:
    limb_segments: int = 2
    n_betas: int = 4
    n_joints: int = 12
    ring_spacing: float = 0.06  # meters between tube rings
    n_around_torso: int = 12
    n_around_limb: int = 8
    arm_abduction_deg: float = 25.0
    leg_abduction_deg: float = 4.0
    jitter: float = 0.0  # relative random perturbation of lengths and radii
    seed: int = 0

    def validate(self):
        if self.limb_segments not in LIMB_PROPORTIONS:
            raise ValueError("limb_segments must be 1, 2 or 3")
        if self.n_joints != 4 + 4 * self.limb_segments:
            raise ValueError(f"n_joints must be {4 + 4 * self.limb_segments} for {self.limb_segments} limb segments")
        if not 1 <= self.n_betas <= 4:
            raise ValueError("the toy model has at most 4 shape components")
        if self.ring_spacing <= 0 or self.n_around_torso < 3 or self.n_around_limb < 3:
            raise ValueError("bad tessellation settings")


class _TubeBuilder:
    """Accumulates closed tubes with per-vertex bookkeeping."""

    def __init__(self):
        self.verts, self.faces = [], []
        self.part, self.axial, self.radial = [], [], []
        self.rings = {}  # (part, knot index) -> vertex indices
        self.n = 0

    def add(self, part, origin, direction, knots, profile, n_around, spacing, cap_lengths):
        d = np.asarray(direction, float)
        d /= np.linalg.norm(d)
        w = np.array([0.0, 0.0, 1.0])
        u = np.cross(w, d)
        u /= np.linalg.norm(u)
        a_prof = np.array([p[0] for p in profile])
        ru_prof = np.array([p[1] for p in profile])
        rw_prof = np.array([p[2] for p in profile])

        axial, knot_ring = [], {}
        for i in range(len(knots) - 1):
            steps = max(1, int(np.ceil((knots[i + 1] - knots[i]) / spacing - 1e-9)))
            for s in range(steps):
                if s == 0:
                    knot_ring[i] = len(axial)
                axial.append(knots[i] + (knots[i + 1] - knots[i]) * s / steps)
        knot_ring[len(knots) - 1] = len(axial)
        axial.append(knots[-1])
        axial = np.array(axial)
        ru = np.interp(axial, a_prof, ru_prof)
        rw = np.interp(axial, a_prof, rw_prof)

        # elliptical end caps: extra rings shrinking towards an apex
        n_cap = 4
        phis = np.linspace(0, np.pi / 2, n_cap + 1)[1:-1]
        lo = [(axial[0] - cap_lengths[0] * np.sin(p), ru[0] * np.cos(p), rw[0] * np.cos(p)) for p in phis[::-1]]
        hi = [(axial[-1] + cap_lengths[1] * np.sin(p), ru[-1] * np.cos(p), rw[-1] * np.cos(p)) for p in phis]
        ring_defs = lo + list(zip(axial, ru, rw)) + hi
        offset_knot = len(lo)

        ang = 2 * np.pi * np.arange(n_around) / n_around
        cos, sin = np.cos(ang), np.sin(ang)
        origin = np.asarray(origin, float)
        ring_idx = []
        for a, r1, r2 in ring_defs:
            rad = (r1 * cos)[:, None] * u + (r2 * sin)[:, None] * w
            pts = origin + a * d + rad
            ring_idx.append(self._push(pts, part, a, rad))
        bottom = self._push((origin + (axial[0] - cap_lengths[0]) * d)[None], part, axial[0] - cap_lengths[0], np.zeros((1, 3)))[0]
        top = self._push((origin + (axial[-1] + cap_lengths[1]) * d)[None], part, axial[-1] + cap_lengths[1], np.zeros((1, 3)))[0]

        nxt = np.roll(np.arange(n_around), -1)
        for r0, r1 in zip(ring_idx[:-1], ring_idx[1:]):
            for k in range(n_around):
                a0, a1, b0, b1 = r0[k], r0[nxt[k]], r1[k], r1[nxt[k]]
                self.faces.append((a0, a1, b1))
                self.faces.append((a0, b1, b0))
        first, last = ring_idx[0], ring_idx[-1]
        for k in range(n_around):
            self.faces.append((bottom, first[nxt[k]], first[k]))
            self.faces.append((top, last[k], last[nxt[k]]))
        for i, ri in knot_ring.items():
            self.rings[(part, i)] = ring_idx[offset_knot + ri]
        return d

    def _push(self, pts, part, a, rad):
        idx = np.arange(self.n, self.n + len(pts))
        self.verts.append(pts)
        self.part.extend([part] * len(pts))
        self.axial.extend([a] * len(pts))
        self.radial.append(rad)
        self.n += len(pts)
        return idx


def _orient_outward(verts, faces, part):
    faces = faces.copy()
    for p in np.unique(part):
        sel = part[faces[:, 0]] == p
        tri = verts[faces[sel]]
        vol = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum()
        if vol < 0:
            f = faces[sel]
            faces[sel] = f[:, [0, 2, 1]]
    return faces


def make_toy_model(toy: Optional[ToySpec] = None) -> BodyModelSpec:
    """Capsule-limbed articulated body with a linear four-component shape space."""
    toy = toy or ToySpec()
    toy.validate()
    rng = np.random.default_rng(toy.seed)

    def jit(x):
        return x * (1.0 + toy.jitter * rng.uniform(-1.0, 1.0)) if toy.jitter else x

    S = toy.limb_segments
    tb = _TubeBuilder()

    torso_knots = [-0.10, 0.0, jit(0.18), jit(0.36), jit(0.55), jit(0.58)]
    torso_profile = [(-0.10, jit(0.16), jit(0.10)), (0.0, jit(0.17), jit(0.11)), (torso_knots[2], jit(0.145), jit(0.095)),
                     (torso_knots[3], jit(0.165), jit(0.105)), (torso_knots[4], jit(0.17), jit(0.10)),
                     (torso_knots[5], jit(0.13), jit(0.085))]
    tb.add("torso", (0, 0, 0), (1, 0, 0), torso_knots, torso_profile, toy.n_around_torso, toy.ring_spacing, (0.06, 0.04))
    neck_x = torso_knots[4]
    head_profile = [(0.0, 0.05, 0.05), (0.06, 0.06, 0.06), (0.11, jit(0.085), jit(0.095)), (0.20, jit(0.085), jit(0.095))]
    tb.add("head", (neck_x, 0, 0), (1, 0, 0), [0.0, 0.06, 0.11, 0.20], head_profile, toy.n_around_limb, toy.ring_spacing,
           (0.03, 0.08))

    shoulder_x, shoulder_y = jit(0.50), jit(0.19)
    hip_x, hip_y = -0.03, jit(0.09)
    alpha, gamma = np.radians(toy.arm_abduction_deg), np.radians(toy.leg_abduction_deg)
    arm_len, leg_len = jit(0.58), jit(0.84)
    limb_defs = {
        "l_arm": ((shoulder_x, shoulder_y, 0), (-np.cos(alpha), np.sin(alpha), 0), arm_len, (0.05, 0.04, 0.033)),
        "r_arm": ((shoulder_x, -shoulder_y, 0), (-np.cos(alpha), -np.sin(alpha), 0), arm_len, (0.05, 0.04, 0.033)),
        "l_leg": ((hip_x, hip_y, 0), (-np.cos(gamma), np.sin(gamma), 0), leg_len, (0.075, 0.05, 0.04)),
        "r_leg": ((hip_x, -hip_y, 0), (-np.cos(gamma), -np.sin(gamma), 0), leg_len, (0.075, 0.05, 0.04)),
    }
    limb_dirs, limb_knots = {}, {}
    for name, (origin, direction, length, (r0, r1, r2)) in limb_defs.items():
        knots = [0.0]
        for p in LIMB_PROPORTIONS[S]:
            knots.append(knots[-1] + p * length)
        mid = LIMB_PROPORTIONS[2][0] * length
        profile = [(0.0, r0, r0), (mid, r1, r1), (length, r2, r2)]
        limb_dirs[name] = tb.add(name, origin, direction, knots, profile, toy.n_around_limb, toy.ring_spacing, (r0, r2))
        limb_knots[name] = knots

    verts = np.concatenate(tb.verts)
    part = np.array(tb.part)
    axial = np.array(tb.axial)
    radial = np.concatenate(tb.radial)
    faces = _orient_outward(verts, np.array(tb.faces, dtype=np.int64), part)
    M = len(verts)

    # joints: 0 pelvis, 1 spine1, 2 spine2, 3 neck, then S per limb in LIMBS order
    K = toy.n_joints
    parent = [-1, 0, 1, 2]
    limb_joint = {}
    for name in LIMBS:
        first = len(parent)
        limb_joint[name] = list(range(first, first + S))
        parent.append(2 if "arm" in name else 0)
        parent.extend(range(first, first + S - 1))
    parent = np.array(parent)

    Jreg = np.zeros((K, M))
    for j, knot in enumerate((1, 2, 3, 4)):
        ring = tb.rings[("torso", knot)]
        Jreg[j, ring] = 1.0 / len(ring)
    for name in LIMBS:
        for s, j in enumerate(limb_joint[name]):
            ring = tb.rings[(name, s)]
            Jreg[j, ring] = 1.0 / len(ring)

    W = np.zeros((M, K))
    tor = part == "torso"
    centers = np.array(torso_knots[1:4])
    a = np.clip(axial[tor], centers[0], centers[-1])
    tw = np.zeros((tor.sum(), 3))
    for j in range(3):
        left = centers[j - 1] if j > 0 else None
        right = centers[j + 1] if j < 2 else None
        wj = np.zeros_like(a)
        if left is not None:
            m = (a >= left) & (a <= centers[j])
            wj[m] = (a[m] - left) / (centers[j] - left)
        if right is not None:
            m = (a >= centers[j]) & (a <= right)
            wj[m] = (right - a[m]) / (right - centers[j])
        wj[a == centers[j]] = 1.0
        tw[:, j] = wj
    W[np.where(tor)[0][:, None], np.arange(3)[None]] = tw
    W[part == "head", 3] = 1.0
    blend = 0.03
    for name in LIMBS:
        sel = np.where(part == name)[0]
        joints = limb_joint[name]
        knots = limb_knots[name]
        for v in sel:
            av = axial[v]
            s = int(np.clip(np.searchsorted(knots, av, side="right") - 1, 0, S - 1))
            W[v, joints[s]] = 1.0
            for t in range(1, S):
                if abs(av - knots[t]) < blend:
                    wt = 0.5 + (av - knots[t]) / (2 * blend)
                    W[v, :] = 0.0
                    W[v, joints[t]] = wt
                    W[v, joints[t - 1]] = 1.0 - wt
    W /= W.sum(axis=1, keepdims=True)

    basis = np.zeros((M, 3, 4))
    basis[:, :, 0] = 0.05 * verts
    basis[tor, :, 1] = 0.08 * radial[tor]
    ex = np.array([1.0, 0.0, 0.0])
    for name in LIMBS:
        sel = part == name
        basis[sel, :, 2] = 0.06 * np.clip(axial[sel], 0.0, None)[:, None] * limb_dirs[name]
    basis[tor, :, 3] = 0.08 * np.clip(axial[tor], 0.0, None)[:, None] * ex
    basis[part == "head", :, 3] = 0.08 * neck_x * ex
    for name in ("l_arm", "r_arm"):
        basis[part == name, :, 3] = 0.08 * shoulder_x * ex

    regions = {"torso": np.where(tor)[0]}
    for name in ("head",) + LIMBS:
        regions[name] = np.where(part == name)[0]
    spec = BodyModelSpec(verts, faces, basis[:, :, :toy.n_betas], Jreg, parent, W, regions=regions)
    spec.validate()
    return spec


def toy_joint_names(toy: Optional[ToySpec] = None) -> list:
    toy = toy or ToySpec()
    names = list(TORSO_JOINTS)
    for limb in LIMBS:
        names.extend(f"{limb}{s}" for s in range(toy.limb_segments))
    return names


def toy_landmarks(spec: BodyModelSpec) -> np.ndarray:
    """Vertex indices of the head top and the four limb tips (rest pose extremes)."""
    T = spec.template_vertices
    J = spec.joint_regressor @ T
    out = [int(spec.regions["head"][np.argmax(T[spec.regions["head"], 0])])]
    roots = [k for k in range(spec.n_joints) if spec.parent[k] in (0, 2) and k > 3]
    for name, root in zip(LIMBS, roots):
        idx = spec.regions[name]
        out.append(int(idx[np.argmax(np.linalg.norm(T[idx] - J[root], axis=1))]))
    return np.array(out, dtype=np.int64)


def random_params(spec: BodyModelSpec, rng, beta_scale=1.0, root_sigma=0.05, spine_sigma=0.08,
                  limb_sigma=0.2, trans_sigma=0.02) -> BodyParams:
    """Mild supine poses: small root and spine motion, larger limb motion."""
    beta = rng.normal(0.0, beta_scale, spec.n_betas)
    theta = np.zeros((spec.n_joints, 3))
    theta[0] = rng.normal(0.0, root_sigma, 3)
    theta[1:4] = rng.normal(0.0, spine_sigma, (3, 3))
    theta[4:] = rng.normal(0.0, limb_sigma, (spec.n_joints - 4, 3))
    return BodyParams(beta, theta, rng.normal(0.0, trans_sigma, 3))


def default_camera() -> OrthoCamera:
    # covers x in [-1.06, 0.98] m and y in [-0.535, 0.535] m from 1 m above the bed
    return OrthoCamera((256, 108), (8.0, 10.0), (-1060.0, -535.0), 1000.0)


@dataclass
class GenOptions:
    voxel_spacing_mm: float = 6.0
    margin_voxels: int = 3
    noise_sigma_mm: float = 0.0
    drape: bool = False
    drape_region: str = "torso"
    drape_margin_mm: float = 60.0
    drape_thickness_mm: float = 20.0
    drape_smooth_mm: float = 40.0
    drape_fraction: float = 0.9  # share of visible torso pixels the cover must change
    bed: bool = True
    bed_gap_mm: float = 18.0
    bed_thickness_mm: float = 12.0
    bed_half_width_mm: float = 350.0
    bed_hu: float = 100.0
    body_hu: float = 40.0
    air_hu: float = -1000.0
    ct_pose: str = "posed"  # "posed": the CT shows the depth pose; "rest": neutral pose at the same translation
    camera: Optional[dict] = None
    seed: int = 0

    def validate(self):
        if self.voxel_spacing_mm <= 0 or self.noise_sigma_mm < 0:
            raise ValueError("voxel spacing must be positive and noise non-negative")
        if self.ct_pose not in ("posed", "rest"):
            raise ValueError("ct_pose must be 'posed' or 'rest'")
        if not -200.0 <= self.bed_hu <= 300.0:
            raise ValueError("bed intensity must lie in [-200, 300] HU")
        if not 0.0 <= self.drape_fraction <= 1.0:
            raise ValueError("drape_fraction must lie in [0, 1]")

    def get_camera(self) -> OrthoCamera:
        return OrthoCamera.from_dict(self.camera) if self.camera else default_camera()


@dataclass
class DatasetEntry:
    params: BodyParams
    volume: Volume
    body_mask: np.ndarray  # voxelized body before the bed is added
    mesh: BodyMesh  # posed ground-truth mesh (meters)
    depth: DepthMap
    clean_depth: DepthMap  # depth render before drape and noise
    landmarks: tuple  # (vertex indices, targets in meters)
    height: float  # meters, of the posed ground-truth mesh
    occlusion: dict = field(default_factory=dict)


def _ct_volume(mesh_mm, faces, opts: GenOptions):
    sp = opts.voxel_spacing_mm
    lo = mesh_mm.min(axis=0) - opts.margin_voxels * sp
    hi = mesh_mm.max(axis=0) + opts.margin_voxels * sp
    bed_top = mesh_mm[:, 2].min() - opts.bed_gap_mm
    if opts.bed:
        lo[2] = min(lo[2], bed_top - opts.bed_thickness_mm - opts.margin_voxels * sp)
    origin = np.floor(lo / sp) * sp
    dims = tuple(int(n) for n in np.ceil((hi - origin) / sp).astype(int) + 1)
    body = voxelize(mesh_mm, faces, dims, (sp, sp, sp), origin)
    vol = np.full(dims, opts.air_hu, dtype=np.int16)
    if opts.bed:
        z = origin[2] + np.arange(dims[2]) * sp
        y = origin[1] + np.arange(dims[1]) * sp
        yc = 0.5 * (mesh_mm[:, 1].min() + mesh_mm[:, 1].max())
        zsel = (z <= bed_top) & (z >= bed_top - opts.bed_thickness_mm)
        ysel = np.abs(y - yc) <= opts.bed_half_width_mm
        vol[:, ysel[:, None] & zsel[None, :]] = int(opts.bed_hu)
    vol[body] = int(opts.body_hu)
    return Volume(vol, (sp, sp, sp), tuple(origin)), body


def drape_depth(depth: DepthMap, box_mm, opts: GenOptions, floor_z_mm: float) -> DepthMap:
    """Replace depth inside an (x, y) box by a smoothed cover lying above the body."""
    cam = depth.camera
    xs, ys = cam.pixel_centers_mm()
    rows = (xs >= box_mm[0][0]) & (xs <= box_mm[1][0])
    cols = (ys >= box_mm[0][1]) & (ys <= box_mm[1][1])
    inside = rows[:, None] & cols[None, :]
    z = np.where(depth.valid, cam.plane_z_mm - depth.depth, floor_z_mm)
    pitch = min(cam.pitch_mm)
    size = max(1, int(round(opts.drape_smooth_mm / pitch))) * 2 + 1
    cover = ndi.gaussian_filter(ndi.maximum_filter(z, size=size, mode="nearest"),
                                opts.drape_smooth_mm / (2.0 * pitch), mode="nearest")
    cover = np.maximum(cover, z) + opts.drape_thickness_mm
    out = depth.depth.copy()
    out[inside] = cam.plane_z_mm - cover[inside]
    valid = depth.valid | inside
    return DepthMap(out, valid, cam)


def gen_entry(spec: BodyModelSpec, params: BodyParams, opts: Optional[GenOptions] = None) -> DatasetEntry:
    """Posed mesh, CT-like volume, top-view depth, landmarks and height for one subject."""
    opts = opts or GenOptions()
    opts.validate()
    rng = np.random.default_rng(opts.seed)
    mesh = forward(spec, params)
    if opts.ct_pose == "rest":
        ct_mesh = forward(spec, BodyParams(params.beta, np.zeros_like(params.theta), params.trans))
    else:
        ct_mesh = mesh
    volume, body = _ct_volume(ct_mesh.vertices * 1000.0, spec.faces, opts)

    cam = opts.get_camera()
    clean = render_depth(mesh, cam)
    depth = clean.copy()
    occlusion = {"drape": bool(opts.drape)}
    if opts.drape:
        region = spec.regions[opts.drape_region]
        rv = mesh.vertices[region] * 1000.0
        box = [(rv[:, :2].min(axis=0) - opts.drape_margin_mm).tolist(), (rv[:, :2].max(axis=0) + opts.drape_margin_mm).tolist()]
        floor = float(mesh.vertices[:, 2].min() * 1000.0)
        depth = drape_depth(depth, box, opts, floor)
        # torso pixels: rendered through a torso face
        torso_only = BodyMesh(mesh.vertices, mesh.joints, spec.faces[np.isin(spec.faces, region).all(axis=1)])
        tor = render_depth(torso_only, cam)
        seen = tor.valid & clean.valid & (np.abs(tor.depth - clean.depth) < 1e-9)
        changed = seen & (np.abs(depth.depth - clean.depth) > 0)
        frac = float(changed.sum() / max(seen.sum(), 1))
        occlusion.update({"drape_box_mm": box, "changed_fraction": frac})
        if frac < opts.drape_fraction:
            logger.warning("drape changed only %.2f of torso pixels", frac)
    if opts.noise_sigma_mm > 0:
        noise = rng.normal(0.0, opts.noise_sigma_mm, depth.depth.shape)
        depth = DepthMap(np.where(depth.valid, depth.depth + noise, 0.0), depth.valid, cam)
    lm = toy_landmarks(spec) if "head" in spec.regions else np.zeros(0, np.int64)
    return DatasetEntry(params.copy(), volume, body, mesh, depth, clean, (lm, mesh.vertices[lm]),
                        body_height(mesh, 0), occlusion)


# -- dataset folders -----------------------------------------------------------------

ENTRY_FILES = ("params.json", "volume.json", "volume.raw", "depth.depth", "depth.json", "mesh.obj",
               "landmarks.json", "meta.json")


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_entry(entry: DatasetEntry, folder, opts: Optional[GenOptions] = None) -> None:
    os.makedirs(folder, exist_ok=True)
    save_params(entry.params, os.path.join(folder, "params.json"))
    write_volume(entry.volume, os.path.join(folder, "volume"))
    write_depth(entry.depth, os.path.join(folder, "depth"))
    export_mesh(entry.mesh, os.path.join(folder, "mesh.obj"))
    _dump({"vertex_indices": entry.landmarks[0].tolist(), "targets_m": entry.landmarks[1].tolist()},
          os.path.join(folder, "landmarks.json"))
    meta = {"height_m": entry.height, "occlusion": entry.occlusion}
    if opts is not None:
        meta["options"] = asdict(opts)
    _dump(meta, os.path.join(folder, "meta.json"))


def gen_dataset(out_dir, n_entries: int, seed: int = 0, toy: Optional[ToySpec] = None,
                opts: Optional[GenOptions] = None) -> list:
    """``model.ctbm`` plus ``entry_000`` ... folders; returns the entry folders."""
    toy = toy or ToySpec()
    opts = opts or GenOptions()
    spec = make_toy_model(toy)
    os.makedirs(out_dir, exist_ok=True)
    save_model(spec, os.path.join(out_dir, "model.ctbm"))
    rng = np.random.default_rng(seed)
    folders = []
    for i in range(n_entries):
        params = random_params(spec, rng)
        eopts = GenOptions(**{**asdict(opts), "seed": int(rng.integers(0, 2 ** 31))})
        folder = os.path.join(out_dir, f"entry_{i:03d}")
        write_entry(gen_entry(spec, params, eopts), folder, eopts)
        folders.append(folder)
    _dump({"entries": [os.path.basename(f) for f in folders], "seed": seed, "toy": asdict(toy)},
          os.path.join(out_dir, "dataset.json"))
    return folders
