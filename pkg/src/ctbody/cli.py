"""Command line entry points.

Every subcommand validates its inputs before computing, stages its outputs
in a scratch folder next to ``--output`` and moves them in only on success,
then writes ``manifest.json``. Exit status: 0 ok, 2 config, 3 io,
4 numeric, 5 not converged (with ``--require-convergence``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .body_model import BodyParams, forward, load_model, load_params, save_params
from .config import PipelineConfig, build_manifest, from_dict, load_config
from .ct_pipeline import PointCloud, TriMesh, ct_to_cloud, read_volume
from .depthmap import OrthoCamera, read_depth, write_depth
from .errors import CTBodyError, ConfigError, IoError, NotConverged
from .metrics import MetricsReport, evaluate, reports_to_csv
from .mixing import MODES, MixPolicy, mix
from .pose_fit import PoseFitResult, fit_pose
from .render import export_mesh, load_mesh, render_depth, write_ply
from .shape_fit import ShapeFitResult, fit_shape
from .synth import GenOptions, ToySpec, default_camera, gen_dataset

logger = logging.getLogger("ctbody")

EXIT = {"config": 2, "io": 3, "numeric": 4, "not-converged": 5}


class _Staging:
    """Collect outputs in a sibling scratch folder; publish them only on success."""

    def __init__(self, out_dir):
        self.out = Path(out_dir).resolve()
        self._tmp = None

    @property
    def tmp(self) -> Path:
        # created on first use, i.e. after input validation
        if self._tmp is None:
            self.out.parent.mkdir(parents=True, exist_ok=True)
            self._tmp = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.", dir=self.out.parent))
        return self._tmp

    def path(self, name) -> Path:
        p = self.tmp / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def publish(self, manifest_fn):
        self.out.mkdir(parents=True, exist_ok=True)
        outputs = []
        for p in sorted(self.tmp.rglob("*")):
            if p.is_file():
                dst = self.out / p.relative_to(self.tmp)
                dst.parent.mkdir(parents=True, exist_ok=True)
                os.replace(p, dst)
                outputs.append(dst)
        manifest = manifest_fn(outputs)
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        shutil.rmtree(self.tmp, ignore_errors=True)

    def discard(self):
        if self._tmp is not None:
            shutil.rmtree(self._tmp, ignore_errors=True)


def _dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require(path, what):
    if path is None:
        raise ConfigError(f"missing {what} path")
    if not Path(path).exists():
        raise ConfigError(f"{what} path does not exist: {path}")
    return path


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise IoError(f"{path} is not valid JSON: {exc}") from exc


def _beta_from(path):
    """beta from a shape-fit report, a pose-fit report or a params file."""
    d = _read_json(path)
    if "beta" not in d:
        raise ConfigError(f"{path} holds no beta")
    return np.asarray(d["beta"], dtype=np.float64)


def _landmarks_from(path):
    if path is None:
        return None
    d = _read_json(path)
    return np.asarray(d["vertex_indices"], dtype=np.int64), np.asarray(d["targets_m"], dtype=np.float64)


def _read_cloud(path) -> PointCloud:
    verts, _ = load_mesh(path)
    return PointCloud(verts, "file")


# -- subcommands ------------------------------------------------------------------------

def cmd_ct2cloud(args, cfg, stage):
    vol_path = _require(args.volume or cfg.paths.volume, "volume")
    inputs = {"volume": vol_path}
    yield inputs
    cloud, surface = ct_to_cloud(read_volume(vol_path), cfg.ct, cfg.seed)
    write_ply(stage.path("cloud.ply"), cloud.points)
    if args.surface:
        export_mesh(surface, stage.path("surface.ply"))


def cmd_fit_shape(args, cfg, stage):
    model = _require(args.model or cfg.paths.model, "model")
    src = args.cloud or args.volume or cfg.paths.volume
    _require(src, "cloud or volume")
    inputs = {"model": model, "cloud" if args.cloud else "volume": src}
    yield inputs
    spec = load_model(model)
    if args.cloud:
        cloud = _read_cloud(args.cloud)
    else:
        cloud, _ = ct_to_cloud(read_volume(src), cfg.ct, cfg.seed)
    mask = spec.regions.get("torso") if args.torso else None
    res = fit_shape(spec, cloud, cfg.gmm, mask)
    stage.path("shape.json").write_text(res.to_json())
    args._converged = res.converged


def cmd_fit_pose(args, cfg, stage):
    model = _require(args.model or cfg.paths.model, "model")
    depth = _require(args.depth or cfg.paths.depth, "depth")
    inputs = {"model": model, "depth": str(Path(depth).with_suffix(".depth"))}
    if args.beta_from:
        inputs["beta"] = _require(args.beta_from, "beta")
    lm_path = args.landmarks or cfg.paths.landmarks
    if lm_path:
        inputs["landmarks"] = _require(lm_path, "landmarks")
    yield inputs
    spec = load_model(model)
    beta = _beta_from(args.beta_from) if args.beta_from else np.zeros(spec.n_betas)
    pose_cfg = cfg.depth_shape if args.optimize_beta else cfg.pose
    height = args.height if args.height is not None else cfg.height_m
    res = fit_pose(spec, read_depth(depth), beta, _landmarks_from(lm_path), height, pose_cfg)
    stage.path("pose.json").write_text(res.to_json())
    save_params(res.params(), stage.path("params.json"))
    args._converged = res.converged


def cmd_mix(args, cfg, stage):
    pose_path = _require(args.pose, "pose")
    inputs = {"pose": pose_path}
    if args.shape_ct:
        inputs["shape_ct"] = _require(args.shape_ct, "CT shape")
    if args.shape_depth:
        inputs["shape_depth"] = _require(args.shape_depth, "depth shape")
    yield inputs
    pose = PoseFitResult.from_dict(_read_json(pose_path))
    b_ct = _beta_from(args.shape_ct) if args.shape_ct else None
    b_depth = _beta_from(args.shape_depth) if args.shape_depth else None
    policy = MixPolicy(args.mode) if args.mode else cfg.mix
    save_params(mix(b_ct, b_depth, pose.theta, pose.trans, policy), stage.path("params.json"))


def cmd_render_depth(args, cfg, stage):
    model = _require(args.model or cfg.paths.model, "model")
    params = _require(args.params, "params")
    inputs = {"model": model, "params": params}
    if args.camera:
        inputs["camera"] = _require(args.camera, "camera")
    yield inputs
    spec = load_model(model)
    cam = OrthoCamera.from_dict(_read_json(args.camera)) if args.camera else default_camera()
    mesh = forward(spec, load_params(params))
    write_depth(render_depth(mesh, cam), stage.path("depth"))
    if args.mesh:
        export_mesh(mesh, stage.path("mesh.obj"))


def cmd_evaluate(args, cfg, stage):
    model = _require(args.model or cfg.paths.model, "model")
    pred = _require(args.pred, "prediction")
    gt = _require(args.gt or cfg.paths.gt_params, "ground truth")
    yield {"model": model, "pred": pred, "gt": gt}
    spec = load_model(model)
    report = evaluate(load_params(pred), load_params(gt), spec, cfg.evaluation)
    text = reports_to_csv({Path(pred).stem: report}) if args.format == "csv" else report.to_json()
    sys.stdout.write(text)
    if stage is not None:
        stage.path("report." + args.format).write_text(text)


def cmd_synth_gen(args, cfg, stage):
    yield {}
    opts = GenOptions(drape=args.drape, bed=not args.no_bed, noise_sigma_mm=args.noise, ct_pose=args.ct_pose,
                      voxel_spacing_mm=args.spacing)
    gen_dataset(stage.tmp, args.n, cfg.seed, ToySpec(), opts)


def cmd_pipeline(args, cfg, stage):
    from .pipeline import run_pipeline

    paths = cfg.paths
    if args.entry:
        entry = Path(_require(args.entry, "entry"))
        model = args.model or paths.model or str(entry.parent / "model.ctbm")
        volume = str(entry / "volume.json")
        depth = str(entry / "depth.depth")
        gt = args.gt or str(entry / "params.json")
        lm = args.landmarks or str(entry / "landmarks.json")
    else:
        model = args.model or paths.model
        volume = args.volume or paths.volume
        depth = args.depth or paths.depth
        gt = args.gt or paths.gt_params
        lm = args.landmarks or paths.landmarks
    inputs = {"model": _require(model, "model"), "volume": _require(volume, "volume"),
              "depth": _require(str(Path(depth).with_suffix(".depth")) if depth else None, "depth")}
    if gt:
        inputs["gt"] = _require(gt, "ground truth")
    if lm and cfg.use_landmarks:
        inputs["landmarks"] = _require(lm, "landmarks")
    yield inputs
    spec = load_model(model)
    res = run_pipeline(spec, read_volume(volume), read_depth(depth), cfg, load_params(gt) if gt else None,
                       _landmarks_from(lm) if (lm and cfg.use_landmarks) else None, all_variants=args.all_variants)
    export_mesh(res.mesh, stage.path("mesh.obj"))
    save_params(res.params, stage.path("params.json"))
    stage.path("shape.json").write_text(res.shape.to_json())
    stage.path("pose.json").write_text(res.pose.to_json())
    if res.depth_shape is not None:
        stage.path("depth_shape.json").write_text(res.depth_shape.to_json())
    for mode, params in res.variants.items():
        if mode != cfg.mix.mode:
            save_params(params, stage.path(f"variants/{mode}.json"))
    if res.reports:
        stage.path("report.json").write_text(res.report.to_json())
        rows = {m: r for m, r in res.reports.items() if m != "final"}
        stage.path("report.csv").write_text(reports_to_csv(rows))
        if args.format == "csv":
            sys.stdout.write(reports_to_csv(rows))
        else:
            sys.stdout.write(res.report.to_json())
    args._converged = res.shape.converged and res.pose.converged


COMMANDS = {
    "ct2cloud": cmd_ct2cloud, "fit-shape": cmd_fit_shape, "fit-pose": cmd_fit_pose, "mix": cmd_mix,
    "render-depth": cmd_render_depth, "evaluate": cmd_evaluate, "synth-gen": cmd_synth_gen, "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (see --dump-config)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--output", "-o", help="output folder")
    common.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    common.add_argument("--format", choices=("json", "csv"), default="json", help="report format")
    common.add_argument("--require-convergence", action="store_true", help="exit 5 if a fit did not converge")

    p = argparse.ArgumentParser(prog="ctbody", description="Body model reconstruction from CT and depth")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ct2cloud", parents=[common], help="CT volume -> surface point cloud (PLY, meters)")
    s.add_argument("--volume")
    s.add_argument("--surface", action="store_true", help="also write the isosurface")

    s = sub.add_parser("fit-shape", parents=[common], help="shape coefficients from a cloud or volume")
    s.add_argument("--model")
    s.add_argument("--cloud")
    s.add_argument("--volume")
    s.add_argument("--torso", action="store_true", help="restrict centroids to the torso region")

    s = sub.add_parser("fit-pose", parents=[common], help="pose from a depth map")
    s.add_argument("--model")
    s.add_argument("--depth")
    s.add_argument("--beta-from", help="shape.json or params.json supplying beta")
    s.add_argument("--landmarks")
    s.add_argument("--height", type=float, help="known body height in meters")
    s.add_argument("--optimize-beta", action="store_true", help="also fit beta (depth-derived shape)")

    s = sub.add_parser("mix", parents=[common], help="combine shape and pose estimates")
    s.add_argument("--shape-ct")
    s.add_argument("--shape-depth")
    s.add_argument("--pose")
    s.add_argument("--mode", choices=MODES)

    s = sub.add_parser("render-depth", parents=[common], help="render a top-view depth map")
    s.add_argument("--model")
    s.add_argument("--params")
    s.add_argument("--camera", help="camera JSON; default covers the toy body")
    s.add_argument("--mesh", action="store_true", help="also export the posed mesh")

    s = sub.add_parser("evaluate", parents=[common], help="metrics between two parameter files")
    s.add_argument("--model")
    s.add_argument("--pred")
    s.add_argument("--gt")

    s = sub.add_parser("synth-gen", parents=[common], help="write a synthetic dataset")
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--drape", action="store_true")
    s.add_argument("--no-bed", action="store_true")
    s.add_argument("--noise", type=float, default=0.0, help="depth noise sigma, mm")
    s.add_argument("--ct-pose", choices=("posed", "rest"), default="posed")
    s.add_argument("--spacing", type=float, default=6.0, help="voxel spacing, mm")

    s = sub.add_parser("pipeline", parents=[common], help="CT + depth -> final mesh and metrics")
    s.add_argument("--entry", help="dataset entry folder (model taken from its parent)")
    s.add_argument("--model")
    s.add_argument("--volume")
    s.add_argument("--depth")
    s.add_argument("--gt")
    s.add_argument("--landmarks")
    s.add_argument("--all-variants", action="store_true", help="also evaluate every mix mode")
    return p


def _effective_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.output:
        cfg.paths.output = args.output
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CTBODY_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    stage = None
    try:
        cfg = _effective_config(args)
        if args.dump_config:
            sys.stdout.write(cfg.to_json())
            return 0
        out = args.output or cfg.paths.output
        if out is None and args.command != "evaluate":
            raise ConfigError("--output is required")
        args._converged = True
        stage = _Staging(out) if out else None
        # each command validates its inputs up to the first yield, before any output exists
        steps = COMMANDS[args.command](args, cfg, stage)
        inputs = next(steps)
        for _ in steps:
            pass
        if stage is not None:
            stage.publish(lambda outputs: build_manifest(args.command, cfg, inputs, outputs, stage.out))
            stage = None
        if args.require_convergence and not args._converged:
            raise NotConverged("a fit stopped before meeting its tolerance")
        return 0
    except CTBodyError as exc:
        if stage is not None:
            stage.discard()
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return EXIT.get(exc.category, 4)
    except BaseException:
        if stage is not None:
            stage.discard()
        raise


if __name__ == "__main__":
    sys.exit(main())
