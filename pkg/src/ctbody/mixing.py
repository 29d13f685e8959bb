"""Combine the CT shape estimate with the depth pose estimate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .body_model import BodyParams
from .errors import ConfigError, DimensionMismatch, MissingBeta

MODES = ("ct_only", "depth_only", "average")


@dataclass
class MixPolicy:
    mode: str = "ct_only"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mix mode must be one of {MODES}, got {self.mode!r}")


def mix(beta_ct, beta_depth, theta, trans, policy: Optional[MixPolicy] = None) -> BodyParams:
    """Final parameters: beta chosen by policy, theta and trans passed through untouched."""
    policy = policy or MixPolicy()
    if policy.mode in ("ct_only", "average") and beta_ct is None:
        raise MissingBeta(f"{policy.mode} needs the CT shape")
    if policy.mode in ("depth_only", "average") and beta_depth is None:
        raise MissingBeta(f"{policy.mode} needs the depth shape")
    if policy.mode == "ct_only":
        beta = np.array(beta_ct, dtype=np.float64)
    elif policy.mode == "depth_only":
        beta = np.array(beta_depth, dtype=np.float64)
    else:
        a, b = np.asarray(beta_ct, dtype=np.float64), np.asarray(beta_depth, dtype=np.float64)
        if a.shape != b.shape:
            raise DimensionMismatch(f"betas differ in length: {a.shape} vs {b.shape}")
        beta = (a + b) / 2.0
    return BodyParams(beta, theta, trans)
