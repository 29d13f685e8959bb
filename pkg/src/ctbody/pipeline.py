"""End-to-end chain: CT shape, depth pose, parameter mixing, metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .body_model import BodyModelSpec, BodyParams, BodyMesh, forward
from .config import PipelineConfig
from .ct_pipeline import PointCloud, Volume, ct_to_cloud
from .depthmap import DepthMap
from .metrics import MetricsReport, evaluate
from .mixing import MODES, MixPolicy, mix
from .pose_fit import PoseFitResult, fit_pose
from .shape_fit import ShapeFitResult, debias_shape, fit_shape

logger = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    shape: ShapeFitResult
    pose: PoseFitResult
    depth_shape: Optional[PoseFitResult]
    params: BodyParams  # final, per the configured mix policy
    mesh: BodyMesh
    cloud: PointCloud
    variants: dict = field(default_factory=dict)  # mode -> BodyParams
    reports: dict = field(default_factory=dict)  # mode -> MetricsReport, when ground truth is known

    @property
    def report(self) -> Optional[MetricsReport]:
        return self.reports.get("final")


def run_pipeline(spec: BodyModelSpec, volume: Volume, depth: DepthMap, cfg: Optional[PipelineConfig] = None,
                 gt: Optional[BodyParams] = None, landmarks=None, all_variants: bool = False) -> PipelineResult:
    """CT volume + depth map -> mixed body parameters.

    ``all_variants`` also evaluates every mix mode (the shape ablation); the
    depth-derived shape is only estimated when some requested mode needs it.
    """
    cfg = cfg or PipelineConfig()
    cfg.validate()
    cloud, _ = ct_to_cloud(volume, cfg.ct, cfg.seed)
    vertex_mask = spec.regions.get("torso") if cfg.ct.torso_box_mm is not None else None
    shape = fit_shape(spec, cloud, cfg.gmm, vertex_mask)
    if cfg.shape_debias_rounds:
        shape = debias_shape(spec, cloud, shape, cfg.gmm, vertex_mask, cfg.seed, cfg.shape_debias_rounds)
    lm = landmarks if cfg.use_landmarks else None
    pose = fit_pose(spec, depth, shape.beta, lm, cfg.height_m, cfg.pose)
    for _ in range(cfg.shape_refits):
        shape = fit_shape(spec, cloud, cfg.gmm, vertex_mask, theta=pose.theta, init=shape)
        pose = fit_pose(spec, depth, shape.beta, lm, cfg.height_m, cfg.pose, init=pose.params())

    modes = list(MODES) if all_variants else [cfg.mix.mode]
    depth_shape = None
    if any(m in ("depth_only", "average") for m in modes):
        init = BodyParams(np.zeros(spec.n_betas), pose.theta, pose.trans)
        depth_shape = fit_pose(spec, depth, np.zeros(spec.n_betas), lm, cfg.height_m, cfg.depth_shape, init=init)
    beta_depth = depth_shape.beta if depth_shape is not None else None

    variants = {m: mix(shape.beta, beta_depth, pose.theta, pose.trans, MixPolicy(m)) for m in modes}
    final = variants[cfg.mix.mode]
    reports = {}
    if gt is not None:
        for m, params in variants.items():
            reports[m] = evaluate(params, gt, spec, cfg.evaluation)
        reports["final"] = reports[cfg.mix.mode]
    return PipelineResult(shape, pose, depth_shape, final, forward(spec, final), cloud, variants, reports)
