"""Pose (and optionally shape) from a top-view depth map by direct optimisation.

Depth preprocessing normalises, median-filters and resizes the map; the
backprojected cloud then drives a chamfer data term. The full objective is

    chamfer_weight * chamfer + landmark_weight * landmarks
    + pose_prior_weight * gmm_nll(theta[1:]) + lambda2 * |height - gt_height|
    (+ shape_prior_weight * |beta|^2 when beta is free)

minimised with L-BFGS-B on analytic gradients, root and translation first.
The supervised loss used to train or score a regressor lives in ``loss_eq2``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.spatial import cKDTree

from .body_model import (BodyModelSpec, BodyParams, body_height, forward, forward_jacobian, vertex_normals,
                         _axis_vector)
from .ct_pipeline import PointCloud
from .depthmap import DepthMap, OrthoCamera
from .errors import ConfigError, DimensionMismatch, EmptyDepthMap, IoError, MissingCamera, NoValidPixels

logger = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)


# -- pose prior -----------------------------------------------------------------------

@dataclass
class GmmPrior:
    """Diagonal Gaussian mixture over the non-root joint rotations, flattened."""
    weights: np.ndarray  # (C,)
    means: np.ndarray  # (C, D)
    variances: np.ndarray  # (C, D) or (D,) shared

    def __post_init__(self):
        self.weights = np.asarray(self.weights, float).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, float))
        self.variances = np.broadcast_to(np.asarray(self.variances, float), self.means.shape).copy()
        if len(self.weights) != len(self.means):
            raise DimensionMismatch("one weight per mixture component")
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights <= 0):
            raise ConfigError("prior weights must be positive and sum to 1")
        if np.any(self.variances <= 0):
            raise ConfigError("prior variances must be positive")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def default(cls, n_joints: int, variance: float = 0.25) -> "GmmPrior":
        D = 3 * (n_joints - 1)
        return cls(np.ones(1), np.zeros((1, D)), np.full((1, D), variance))

    def to_dict(self):
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "variances": self.variances.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["weights"], d["means"], d["variances"])

    @classmethod
    def load(cls, path) -> "GmmPrior":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, ValueError, KeyError) as exc:
            raise IoError(f"cannot read pose prior {path}: {exc}") from exc


def _component_logs(prior: GmmPrior, x):
    d = x[None, :] - prior.means
    return (np.log(prior.weights) - 0.5 * (d * d / prior.variances).sum(axis=1)
            - 0.5 * (prior.dim * _LOG_2PI + np.log(prior.variances).sum(axis=1))), d


def gmm_prior_responsibilities(prior: GmmPrior, theta_flat) -> np.ndarray:
    x = np.asarray(theta_flat, float).reshape(-1)
    if x.shape[0] != prior.dim:
        raise DimensionMismatch(f"pose vector has {x.shape[0]} entries, prior expects {prior.dim}")
    logs, _ = _component_logs(prior, x)
    r = np.exp(logs - logs.max())
    return r / r.sum()


def gmm_prior_nll(prior: GmmPrior, theta_flat, return_grad: bool = False):
    """Negative log mixture density (log-sum-exp stabilised)."""
    x = np.asarray(theta_flat, float).reshape(-1)
    if x.shape[0] != prior.dim:
        raise DimensionMismatch(f"pose vector has {x.shape[0]} entries, prior expects {prior.dim}")
    logs, d = _component_logs(prior, x)
    top = logs.max()
    r = np.exp(logs - top)
    total = r.sum()
    nll = float(-(top + np.log(total)))
    if not return_grad:
        return nll
    r /= total
    grad = (r[:, None] * d / prior.variances).sum(axis=0)
    return nll, grad


# -- depth preprocessing ---------------------------------------------------------------

def normalize_depth(d: DepthMap) -> DepthMap:
    mm = d.depth_mm()
    if not d.valid.any():
        raise EmptyDepthMap("depth map has no valid pixels")
    lo, hi = float(mm[d.valid].min()), float(mm[d.valid].max())
    out = np.zeros_like(mm, dtype=np.float64)
    if hi > lo:
        out[d.valid] = (mm[d.valid] - lo) / (hi - lo)
    return DepthMap(out, d.valid.copy(), d.camera, (lo, hi))


def median_filter_valid(depth, valid, radius: int = 1):
    """Median over the valid pixels of each (2r+1)^2 window; invalid pixels stay invalid."""
    if radius <= 0:
        return np.asarray(depth, float).copy()
    padded = np.pad(np.where(valid, depth, np.nan), radius, constant_values=np.nan)
    win = np.lib.stride_tricks.sliding_window_view(padded, (2 * radius + 1, 2 * radius + 1))
    out = np.asarray(depth, float).copy()
    rows, cols = np.nonzero(valid)
    out[rows, cols] = np.nanmedian(win[rows, cols].reshape(len(rows), -1), axis=1)
    return out


def _axis_weights(n_src: int, n_dst: int):
    # pixel centers align at edges: src = (dst + 0.5) * n_src / n_dst - 0.5
    s = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    s = np.clip(s, 0.0, n_src - 1)
    i0 = np.floor(s).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_src - 1)
    f = s - i0
    return i0, i1, f


def resize_bilinear(depth, valid, size):
    """Bilinear resize that renormalises over valid sources.

    An output pixel is invalid only if every source with nonzero weight is.
    """
    H, W = depth.shape
    h, w = size
    r0, r1, fr = _axis_weights(H, h)
    c0, c1, fc = _axis_weights(W, w)
    val = np.where(valid, depth, 0.0)
    m = valid.astype(np.float64)
    num = np.zeros((h, w))
    den = np.zeros((h, w))
    for ri, wr in ((r0, 1.0 - fr), (r1, fr)):
        for ci, wc in ((c0, 1.0 - fc), (c1, fc)):
            wgt = wr[:, None] * wc[None, :]
            num += wgt * val[np.ix_(ri, ci)]
            den += wgt * m[np.ix_(ri, ci)]
    ok = den > 0
    out = np.zeros((h, w))
    out[ok] = num[ok] / den[ok]
    return out, ok


def _resized_camera(cam: Optional[OrthoCamera], size) -> Optional[OrthoCamera]:
    if cam is None:
        return None
    H, W = cam.shape
    h, w = size
    sr, sc = H / h, W / w
    pitch = (cam.pitch_mm[0] * sr, cam.pitch_mm[1] * sc)
    origin = (cam.origin_mm[0] + (0.5 * sr - 0.5) * cam.pitch_mm[0],
              cam.origin_mm[1] + (0.5 * sc - 0.5) * cam.pitch_mm[1])
    return OrthoCamera((h, w), pitch, origin, cam.plane_z_mm, cam.near_mm, cam.far_mm)


def preprocess_depth(d: DepthMap, cfg: Optional["PoseFitConfig"] = None) -> DepthMap:
    """normalise -> median filter -> bilinear resize; the camera follows the resize."""
    cfg = cfg or PoseFitConfig()
    if d.depth.size == 0:
        raise EmptyDepthMap("depth map is empty")
    n = normalize_depth(d)
    filt = median_filter_valid(n.depth, n.valid, cfg.median_filter_radius)
    size = tuple(int(s) for s in cfg.target_size)
    out, ok = resize_bilinear(filt, n.valid, size)
    return DepthMap(out, ok, _resized_camera(d.camera, size), n.norm)


def backproject(d: DepthMap) -> PointCloud:
    """One point (meters) per valid pixel through the orthographic camera."""
    if d.camera is None:
        raise MissingCamera("depth map carries no camera")
    cam = d.camera
    if cam.shape != d.depth.shape:
        raise DimensionMismatch(f"camera {cam.shape} does not match depth {d.depth.shape}")
    rows, cols = np.nonzero(d.valid)
    mm = d.depth_mm()[rows, cols]
    x = cam.origin_mm[0] + rows * cam.pitch_mm[0]
    y = cam.origin_mm[1] + cols * cam.pitch_mm[1]
    z = cam.plane_z_mm - mm
    return PointCloud(np.stack([x, y, z], axis=1) / 1000.0, "depth")


# -- supervised loss ---------------------------------------------------------------------

def loss_eq2(pred: BodyParams, gt: BodyParams, spec: BodyModelSpec, lambda1: float = 1.0, lambda2: float = 0.1,
             gt_height: Optional[float] = None, up_axis=0):
    """Parameter MSE + lambda1 * mean vertex distance + lambda2 * height error.

    Returns ``(total, {"smpl", "v2v", "height"})``; ``gt_height`` defaults to
    the height of the ground-truth mesh.
    """
    for a, b, name in ((pred.beta, gt.beta, "beta"), (pred.theta, gt.theta, "theta"), (pred.trans, gt.trans, "trans")):
        if a.shape != b.shape:
            raise DimensionMismatch(f"{name} shapes differ: {a.shape} vs {b.shape}")
    p = np.concatenate([pred.beta, pred.theta.ravel(), pred.trans])
    g = np.concatenate([gt.beta, gt.theta.ravel(), gt.trans])
    l_smpl = float(np.mean((p - g) ** 2))
    mp, mg = forward(spec, pred), forward(spec, gt)
    l_v2v = float(np.linalg.norm(mp.vertices - mg.vertices, axis=1).mean())
    if gt_height is None:
        gt_height = body_height(mg, up_axis)
    l_height = abs(body_height(mp, up_axis) - gt_height)
    total = l_smpl + lambda1 * l_v2v + lambda2 * l_height
    return total, {"smpl": l_smpl, "v2v": l_v2v, "height": l_height}


# -- fitting --------------------------------------------------------------------------

@dataclass
class PoseFitConfig:
    lambda1: float = 1.0
    lambda2: float = 0.1
    landmark_weight: float = 1.0
    chamfer_weight: float = 1e4  # per m^2 of mean squared distance
    chamfer_robust_m: Optional[float] = 0.02  # Geman-McClure scale; None = plain squared distance
    pose_prior_weight: float = 0.01
    pose_prior_variance: float = 0.25  # rad^2, used when no prior file is given
    pose_prior_path: Optional[str] = None
    shape_prior_weight: float = 0.01
    optimize_beta: bool = False
    bidirectional: bool = False
    face_samples: bool = True  # face centroids join the vertices as chamfer targets
    iterations: int = 100  # L-BFGS iterations per stage
    tol: float = 1e-10  # relative objective change
    gtol: float = 1e-8
    stages: tuple = ("global", "full")
    up_axis: int = 0
    median_filter_radius: int = 1
    target_size: tuple = (128, 54)
    preprocess: bool = True

    def validate(self):
        for name in ("lambda1", "lambda2", "landmark_weight", "chamfer_weight", "pose_prior_weight",
                     "shape_prior_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if len(self.target_size) != 2 or min(self.target_size) < 1:
            raise ConfigError("target_size must be two positive integers")
        if self.iterations < 0 or self.median_filter_radius < 0:
            raise ConfigError("iterations and median_filter_radius must be >= 0")
        if self.pose_prior_variance <= 0:
            raise ConfigError("pose_prior_variance must be positive")
        for s in self.stages:
            if s not in ("global", "full"):
                raise ConfigError(f"unknown stage {s!r}")

    def prior(self, n_joints: int) -> GmmPrior:
        if self.pose_prior_path:
            return GmmPrior.load(self.pose_prior_path)
        return GmmPrior.default(n_joints, self.pose_prior_variance)


@dataclass
class PoseFitResult:
    theta: np.ndarray
    trans: np.ndarray
    beta: np.ndarray
    objective_trace: list
    terms: dict
    converged: bool
    iterations: int = 0

    def params(self) -> BodyParams:
        return BodyParams(self.beta, self.theta, self.trans)

    def to_dict(self):
        return {"theta": self.theta.tolist(), "trans": self.trans.tolist(), "beta": self.beta.tolist(),
                "objective_trace": list(self.objective_trace), "terms": dict(self.terms),
                "converged": self.converged, "iterations": self.iterations}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["theta"], float), np.asarray(d["trans"], float), np.asarray(d["beta"], float),
                   d["objective_trace"], d["terms"], d["converged"], d.get("iterations", 0))


def _sample_operator(spec: BodyModelSpec, with_faces: bool):
    """Rows of barycentric weights mapping vertices to chamfer sample points."""
    M = spec.n_vertices
    rows = [np.eye(M)]
    if with_faces:
        Fm = np.zeros((len(spec.faces), M))
        np.add.at(Fm, (np.repeat(np.arange(len(spec.faces)), 3), spec.faces.ravel()), 1.0 / 3.0)
        rows.append(Fm)
    return np.concatenate(rows)


def _sample_normals(spec, verts, A):
    vn = vertex_normals(verts, spec.faces)
    tri = verts[spec.faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    fn /= np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-300)
    return vn if A.shape[0] == len(verts) else np.concatenate([vn, fn])


class PoseObjective:
    """Objective and analytic gradient over (beta, theta, trans)."""

    def __init__(self, spec: BodyModelSpec, cloud, cfg: PoseFitConfig, landmarks=None, gt_height=None,
                 visible_from: Optional[BodyParams] = None):
        self.spec = spec
        self.cfg = cfg
        pts = np.asarray(cloud.points if isinstance(cloud, PointCloud) else cloud, float).reshape(-1, 3)
        # canonical order: the chamfer sums are then independent of pixel order
        self.cloud = pts[np.lexsort(pts.T[::-1])] if len(pts) else pts
        self.cloud_tree = cKDTree(self.cloud) if len(self.cloud) else None
        self.prior = cfg.prior(spec.n_joints)
        if self.prior.dim != 3 * (spec.n_joints - 1):
            raise DimensionMismatch(f"pose prior has dim {self.prior.dim}, model needs {3 * (spec.n_joints - 1)}")
        self.gt_height = gt_height
        self.up = _axis_vector(cfg.up_axis)
        if landmarks is not None:
            idx, tgt = landmarks
            self.lm_idx = np.asarray(idx, dtype=np.int64)
            self.lm_tgt = np.asarray(tgt, float).reshape(-1, 3)
            if len(self.lm_idx) != len(self.lm_tgt):
                raise DimensionMismatch("one target per landmark")
            if self.lm_idx.size and (self.lm_idx.min() < 0 or self.lm_idx.max() >= spec.n_vertices):
                raise DimensionMismatch("landmark indexes a missing vertex")
        else:
            self.lm_idx, self.lm_tgt = np.zeros(0, np.int64), np.zeros((0, 3))
        self.A = _sample_operator(spec, cfg.face_samples)
        ref = visible_from or BodyParams.zeros(spec)
        mesh = forward(spec, ref)
        n = _sample_normals(spec, mesh.vertices, self.A)
        # the camera looks down -z: a sample is visible when its normal has +z
        self.visible = np.where(n[:, 2] > 0.0)[0]
        self.A_vis = self.A[self.visible]

    def _robust(self, d2):
        """Kernel value and its derivative with respect to the squared distance."""
        c = self.cfg.chamfer_robust_m
        if c is None:
            return d2, np.ones_like(d2)
        c2 = c * c
        den = d2 + c2
        # c^2 d^2 / (d^2 + c^2): quadratic near zero, saturating at c^2
        return c2 * d2 / den, (c2 / den) ** 2

    def __call__(self, params: BodyParams, need_grad: bool = True):
        spec, cfg = self.spec, self.cfg
        if need_grad:
            jac = forward_jacobian(spec, params)
            V = jac.mesh.vertices
        else:
            V = forward(spec, params).vertices
        gV = np.zeros_like(V)
        terms = {}

        if cfg.chamfer_weight > 0 and len(self.cloud):
            S = self.A_vis @ V
            _, a = cKDTree(S).query(self.cloud)
            diff = S[a] - self.cloud
            rho, w = self._robust((diff * diff).sum(axis=1))
            cham = float(np.mean(rho))
            gS = np.zeros_like(S)
            np.add.at(gS, a, 2.0 * w[:, None] * diff / len(self.cloud))
            if cfg.bidirectional:
                _, b = self.cloud_tree.query(S)
                diff2 = S - self.cloud[b]
                rho2, w2 = self._robust((diff2 * diff2).sum(axis=1))
                cham += float(np.mean(rho2))
                gS += 2.0 * w2[:, None] * diff2 / len(S)
            terms["chamfer"] = cham
            gV += cfg.chamfer_weight * (self.A_vis.T @ gS)
        else:
            terms["chamfer"] = 0.0

        if len(self.lm_idx):
            r = V[self.lm_idx] - self.lm_tgt
            terms["landmark"] = float((r * r).sum())
            np.add.at(gV, self.lm_idx, cfg.landmark_weight * 2.0 * r)
        else:
            terms["landmark"] = 0.0

        if self.gt_height is not None and cfg.lambda2 > 0:
            h = V @ self.up
            hi, lo = int(np.argmax(h)), int(np.argmin(h))
            dh = float(h[hi] - h[lo]) - self.gt_height
            terms["height"] = abs(dh)
            s = cfg.lambda2 * np.sign(dh)
            gV[hi] += s * self.up
            gV[lo] -= s * self.up
        else:
            terms["height"] = 0.0

        if cfg.pose_prior_weight > 0:
            nll, g_prior = gmm_prior_nll(self.prior, params.theta[1:].ravel(), return_grad=True)
        else:
            nll, g_prior = 0.0, np.zeros(self.prior.dim)
        terms["pose_prior"] = nll

        terms["shape_prior"] = float(params.beta @ params.beta) if cfg.optimize_beta else 0.0

        total = (cfg.chamfer_weight * terms["chamfer"] + cfg.landmark_weight * terms["landmark"]
                 + cfg.lambda2 * terms["height"] + cfg.pose_prior_weight * terms["pose_prior"]
                 + cfg.shape_prior_weight * terms["shape_prior"])
        if not need_grad:
            return total, terms, None
        g_theta = np.tensordot(gV, jac.d_vertices_d_theta, axes=([0, 1], [0, 1]))
        g_theta[1:] += cfg.pose_prior_weight * g_prior.reshape(-1, 3)
        g_trans = gV.sum(axis=0)
        g_beta = np.tensordot(gV, jac.d_vertices_d_beta, axes=([0, 1], [0, 1]))
        if cfg.optimize_beta:
            g_beta += 2.0 * cfg.shape_prior_weight * params.beta
        return total, terms, (g_beta, g_theta, g_trans)


class _Layout:
    """Maps the free optimisation vector onto BodyParams."""

    def __init__(self, base: BodyParams, joints, with_beta: bool, scale=None):
        self.base = base
        self.joints = np.asarray(joints, dtype=np.int64)
        self.with_beta = with_beta
        self.B = len(base.beta)
        n = 3 * len(self.joints) + 3 + (self.B if with_beta else 0)
        self.scale = np.ones(n) if scale is None else np.asarray(scale, float)

    def pack(self, p: BodyParams):
        parts = [p.theta[self.joints].ravel(), p.trans]
        if self.with_beta:
            parts.append(p.beta)
        return np.concatenate(parts) / self.scale

    def unpack(self, x):
        x = np.asarray(x) * self.scale
        n = 3 * len(self.joints)
        theta = self.base.theta.copy()
        theta[self.joints] = x[:n].reshape(-1, 3)
        trans = x[n:n + 3].copy()
        beta = x[n + 3:n + 3 + self.B].copy() if self.with_beta else self.base.beta.copy()
        return BodyParams(beta, theta, trans)

    def grad(self, g):
        g_beta, g_theta, g_trans = g
        parts = [g_theta[self.joints].ravel(), g_trans]
        if self.with_beta:
            parts.append(g_beta)
        return np.concatenate(parts) * self.scale


def _variable_scale(spec, obj: "PoseObjective", params: BodyParams, joints, with_beta, floor=1e-3):
    """Diagonal preconditioner: one unit of every scaled variable moves the visible samples ~1 m rms."""
    jac = forward_jacobian(spec, params)
    M = spec.n_vertices
    dth = obj.A_vis @ jac.d_vertices_d_theta.reshape(M, -1)
    rms_th = np.sqrt((dth.reshape(len(obj.visible), 3, spec.n_joints, 3) ** 2).sum(axis=1).mean(axis=0))
    parts = [rms_th[joints].ravel(), np.ones(3)]
    if with_beta:
        db = obj.A_vis @ jac.d_vertices_d_beta.reshape(M, -1)
        parts.append(np.sqrt((db.reshape(len(obj.visible), 3, -1) ** 2).sum(axis=1).mean(axis=0)))
    return 1.0 / np.maximum(np.concatenate(parts), floor)


def _initial_trans(spec, beta, cloud, obj: PoseObjective):
    rest = forward(spec, BodyParams(beta, np.zeros((spec.n_joints, 3)), np.zeros(3)))
    S = obj.A_vis @ rest.vertices
    return cloud.mean(axis=0) - S.mean(axis=0) if len(cloud) else np.zeros(3)


def fit_pose(spec: BodyModelSpec, depth: Optional[DepthMap], beta_fixed, landmarks=None,
             gt_height: Optional[float] = None, cfg: Optional[PoseFitConfig] = None,
             init: Optional[BodyParams] = None) -> PoseFitResult:
    """Fit (theta, trans) to a depth map with beta frozen, or (beta, theta, trans) when ``cfg.optimize_beta``.

    ``landmarks`` is ``(vertex_indices, targets_m)``. Without ``init`` the
    pose starts at rest and the translation aligns visible-surface centroids.
    Visibility is decided once, at the initial pose.
    """
    cfg = cfg or PoseFitConfig()
    cfg.validate()
    beta_fixed = np.asarray(beta_fixed, float).reshape(-1)
    if beta_fixed.shape[0] != spec.n_betas:
        raise DimensionMismatch(f"beta has {beta_fixed.shape[0]} entries, model expects {spec.n_betas}")

    if depth is not None:
        d = preprocess_depth(depth, cfg) if cfg.preprocess else depth
        cloud = backproject(d).points
    else:
        cloud = np.zeros((0, 3))
    if cfg.chamfer_weight > 0 and len(cloud) == 0:
        raise NoValidPixels("depth map has no valid pixels to fit")

    if init is None:
        start = BodyParams(beta_fixed, np.zeros((spec.n_joints, 3)), np.zeros(3))
    else:
        start = BodyParams(beta_fixed if not cfg.optimize_beta else init.beta, init.theta, init.trans)
    obj = PoseObjective(spec, cloud, cfg, landmarks, gt_height, visible_from=start)
    if init is None:
        start.trans = _initial_trans(spec, beta_fixed, cloud, obj)
    current = start.copy()
    f0, terms, _ = obj(current, need_grad=False)
    trace = [f0]
    if cfg.iterations == 0:
        return PoseFitResult(current.theta, current.trans, current.beta, trace, terms, False, 0)

    converged = True
    n_iter = 0
    for stage in cfg.stages:
        joints = [0] if stage == "global" else list(range(spec.n_joints))
        free_beta = cfg.optimize_beta and stage == "full"
        layout = _Layout(current, joints, free_beta, _variable_scale(spec, obj, current, joints, free_beta))
        cache = {}

        def fun(x, layout=layout, cache=cache):
            f, _, g = obj(layout.unpack(x))
            cache[x.tobytes()] = f
            return f, layout.grad(g)

        def callback(xk, cache=cache):
            f = cache.get(xk.tobytes())
            if f is None:
                f = obj(layout.unpack(xk), need_grad=False)[0]
            trace.append(float(f))

        res = optimize.minimize(fun, layout.pack(current), jac=True, method="L-BFGS-B", callback=callback,
                                options={"maxiter": cfg.iterations, "ftol": cfg.tol, "gtol": cfg.gtol,
                                         "maxcor": 20})
        cand = layout.unpack(res.x)
        fc = obj(cand, need_grad=False)[0]
        # keep the best point seen: the returned iterate never scores worse than the stage start
        if fc <= trace[-1] or len(trace) == 1:
            current = cand
            if fc < trace[-1]:
                trace.append(float(fc))
        n_iter += int(res.nit)
        converged = converged and bool(res.success)
        logger.debug("stage %s: %d iterations, f=%.6g (%s)", stage, res.nit, fc, res.message)

    f, terms, _ = obj(current, need_grad=False)
    logger.info("pose fit: %d iterations, objective %.6g", n_iter, f)
    return PoseFitResult(current.theta, current.trans, current.beta, trace, terms, converged, n_iter)
