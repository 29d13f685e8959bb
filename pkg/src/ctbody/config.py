"""Pipeline configuration tree, its JSON text form and the run manifest."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import platform
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

from . import __version__
from .ct_pipeline import CtConfig
from .errors import ConfigError, IoError
from .metrics import EvalConfig
from .mixing import MixPolicy
from .pose_fit import PoseFitConfig
from .shape_fit import GmmConfig


def _depth_shape_default() -> PoseFitConfig:
    return PoseFitConfig(optimize_beta=True, bidirectional=True)


@dataclass
class PathsConfig:
    model: Optional[str] = None
    volume: Optional[str] = None
    depth: Optional[str] = None
    output: Optional[str] = None
    gt_params: Optional[str] = None
    landmarks: Optional[str] = None


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    ct: CtConfig = field(default_factory=CtConfig)
    gmm: GmmConfig = field(default_factory=GmmConfig)
    pose: PoseFitConfig = field(default_factory=PoseFitConfig)
    depth_shape: PoseFitConfig = field(default_factory=_depth_shape_default)
    mix: MixPolicy = field(default_factory=MixPolicy)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    shape_debias_rounds: int = 1  # bootstrap bias corrections of the CT shape; 0 = raw EM estimate
    shape_refits: int = 0  # shape refits at the depth-estimated pose, each followed by a pose refit
    use_landmarks: bool = False
    height_m: Optional[float] = None  # known patient height; None = not used
    seed: int = 0

    def validate(self):
        self.gmm.validate()
        self.pose.validate()
        self.depth_shape.validate()
        if self.shape_refits < 0 or self.shape_debias_rounds < 0:
            raise ConfigError("shape_refits and shape_debias_rounds must be >= 0")
        if self.height_m is not None and self.height_m <= 0:
            raise ConfigError("height_m must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def semantic_hash(self) -> str:
        """sha256 of everything except file paths."""
        d = self.to_dict()
        d.pop("paths")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def from_dict(cls, data, where="config"):
    """Strict dataclass construction: unknown keys are errors, nested tables recurse."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a table")
    proto = cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    extra = sorted(set(data) - set(known))
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(proto, name)
        key = f"{where}.{name}"
        if value is None:
            if default is not None and "Optional" not in str(known[name].type):
                raise ConfigError(f"{key} may not be null")
            kwargs[name] = None
        elif dataclasses.is_dataclass(default):
            kwargs[name] = from_dict(type(default), value, key)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{key} must be a list")
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{key} must be true or false")
            kwargs[name] = value
        elif isinstance(default, (int, float)):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{key} must be a number")
            if isinstance(default, int) and not float(value).is_integer():
                raise ConfigError(f"{key} must be an integer")
            kwargs[name] = type(default)(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def load_config(path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    cfg = from_dict(PipelineConfig, data)
    cfg.validate()
    return cfg


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict:
    import numpy
    import scipy
    import skimage

    return {"ctbody": __version__, "numpy": numpy.__version__, "scipy": scipy.__version__,
            "scikit-image": skimage.__version__, "python": platform.python_version()}


def build_manifest(command: str, cfg: PipelineConfig, inputs: dict, outputs: list, out_dir) -> dict:
    """Run record: input and output digests, config hash, seed and library versions. No timestamps."""
    out_dir = Path(out_dir)
    return {
        "command": command,
        "inputs": {k: {"path": str(v), "sha256": sha256_file(v)} for k, v in sorted(inputs.items())},
        "outputs": {str(Path(p).relative_to(out_dir)): sha256_file(p) for p in sorted(outputs)},
        "config_hash": cfg.semantic_hash(),
        "seed": cfg.seed,
        "versions": versions(),
    }
