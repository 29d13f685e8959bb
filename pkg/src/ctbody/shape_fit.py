"""Shape coefficients from a CT surface cloud by EM over a vertex-centred GMM.

Every model vertex is an isotropic Gaussian centroid with variance sigma2; a
constant term ``mu / N`` absorbs outliers:

    p(v_n) = (1 - mu) * sum_m pi_mn N(v_n | T(M_m(beta)), sigma2 I) + mu / N

The pose is held at rest, so M(beta) = template + basis @ beta is linear in
beta. T is a rigid or similarity transform from the model frame into the
cloud frame. The M-step alternates weighted Procrustes and closed-form beta,
then re-estimates sigma2. Each block is an exact minimiser, so the penalised
negative log-likelihood never increases.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .body_model import BodyModelSpec, BodyParams, forward_jacobian
from .ct_pipeline import PointCloud
from .errors import ConfigError, DimensionMismatch, NonPositiveVariance, SingularNormalEquations

logger = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GmmConfig:
    outlier_weight: float = 0.05  # mu
    sigma2_init: Optional[float] = None  # m^2; None = auto
    max_em_iters: int = 100
    em_tol: float = 1e-6  # relative NLL change
    beta_prior_weight: float = 0.0
    estimate_scale: bool = False
    scale_bounds: tuple = (0.5, 2.0)
    inner_rounds: int = 10
    sigma2_min: float = 1e-10
    component_priors: str = "uniform"  # or "area": pi_m proportional to the template area around vertex m
    truncate_sigmas: Optional[float] = 10.0  # sparse E-step beyond this many sigma once sigma is small; None = dense
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.outlier_weight < 1.0:
            raise ConfigError("outlier_weight must lie in [0, 1)")
        if self.em_tol <= 0 or (self.sigma2_init is not None and self.sigma2_init <= 0):
            raise ConfigError("tolerances and sigma2_init must be positive")
        if self.beta_prior_weight < 0 or self.max_em_iters < 0:
            raise ConfigError("beta_prior_weight and max_em_iters must be >= 0")
        if self.component_priors not in ("uniform", "area"):
            raise ConfigError("component_priors must be 'uniform' or 'area'")
        if self.truncate_sigmas is not None and self.truncate_sigmas < 6.0:
            raise ConfigError("truncate_sigmas below 6 drops non-negligible mass")


@dataclass
class Similarity:
    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def apply(self, x):
        return self.scale * np.asarray(x) @ self.rotation.T + self.translation

    def inverse_apply(self, y):
        return (np.asarray(y) - self.translation) @ self.rotation / self.scale

    def to_dict(self):
        return {"scale": self.scale, "rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["scale"]), np.asarray(d["rotation"], float), np.asarray(d["translation"], float))


@dataclass
class Correspondences:
    posterior: np.ndarray  # (M, N), dense or scipy.sparse
    outlier: np.ndarray  # (N,)
    priors: np.ndarray  # (M,) or (M, N)
    nll: float = 0.0


@dataclass
class ShapeFitResult:
    beta: np.ndarray
    similarity: Similarity
    sigma2: float
    nll_trace: list
    objective_trace: list
    iterations: int
    converged: bool

    def to_dict(self):
        return {"beta": self.beta.tolist(), "similarity": self.similarity.to_dict(), "sigma2": self.sigma2,
                "nll_trace": list(self.nll_trace), "objective_trace": list(self.objective_trace),
                "iterations": self.iterations, "converged": self.converged}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["beta"], float), Similarity.from_dict(d["similarity"]), d["sigma2"],
                   d["nll_trace"], d.get("objective_trace", d["nll_trace"]), d["iterations"], d["converged"])


def e_step(model_vertices, cloud_points, sigma2: float, mu: float, priors=None) -> Correspondences:
    """Posterior responsibilities of each centroid (and the outlier term) for each point."""
    if not sigma2 > 0:
        raise NonPositiveVariance(f"sigma2 must be positive, got {sigma2}")
    X = np.asarray(model_vertices, float)
    V = np.asarray(cloud_points.points if isinstance(cloud_points, PointCloud) else cloud_points, float)
    M, N = len(X), len(V)
    if priors is None:
        priors = np.full(M, 1.0 / M)
    priors = np.asarray(priors, float)
    log_pi = np.log(priors)
    if log_pi.ndim == 1:
        log_pi = log_pi[:, None]
    # in-place log-domain evaluation; (M, N) is the dominant cost
    L = cdist(X, V, "sqeuclidean")
    L *= -1.0 / (2.0 * sigma2)
    L += log_pi - 1.5 * (_LOG_2PI + np.log(sigma2)) + (np.log1p(-mu) if mu > 0 else 0.0)
    peak = L.max(axis=0)
    log_out = np.log(mu / N) if mu > 0 else -np.inf
    top = np.maximum(peak, log_out)
    bad = ~np.isfinite(top)
    top = np.where(bad, 0.0, top)
    L -= top
    np.exp(L, out=L)
    outlier = np.exp(log_out - top) if mu > 0 else np.zeros(N)
    total = L.sum(axis=0) + outlier
    log_p = np.log(total) + top
    bad |= ~(total > 0)
    total[bad] = 1.0
    L /= total
    outlier = outlier / total
    P = L
    if bad.any():
        P[:, bad] = 0.0
        outlier[bad] = 1.0
    nll = float(-log_p[~bad].sum()) if (~bad).any() else float("inf")
    return Correspondences(P, outlier, priors, nll)


def e_step_sparse(model_vertices, cloud_points, sigma2: float, mu: float, priors=None,
                  cutoff: float = 10.0) -> Correspondences:
    """E-step ignoring centroid/point pairs further apart than ``cutoff`` sigma.

    A dropped pair weighs at most exp(-cutoff^2 / 2) of the Gaussian peak, so
    at the default cutoff the result equals the dense one to ~1e-21 relative.
    The posterior comes back as a CSR matrix.
    """
    if not sigma2 > 0:
        raise NonPositiveVariance(f"sigma2 must be positive, got {sigma2}")
    X = np.asarray(model_vertices, float)
    V = np.asarray(cloud_points.points if isinstance(cloud_points, PointCloud) else cloud_points, float)
    M, N = len(X), len(V)
    priors = np.full(M, 1.0 / M) if priors is None else np.asarray(priors, float)
    if priors.ndim != 1:
        raise DimensionMismatch("the sparse E-step takes one prior per centroid")
    pairs = cKDTree(X).sparse_distance_matrix(cKDTree(V), cutoff * np.sqrt(sigma2), output_type="ndarray")
    i, j = pairs["i"].astype(np.int64), pairs["j"].astype(np.int64)
    L = pairs["v"] ** 2 * (-1.0 / (2.0 * sigma2))
    L += np.log(priors)[i] - 1.5 * (_LOG_2PI + np.log(sigma2)) + (np.log1p(-mu) if mu > 0 else 0.0)
    log_out = np.log(mu / N) if mu > 0 else -np.inf
    top = np.full(N, log_out)
    np.maximum.at(top, j, L)
    bad = ~np.isfinite(top)
    top[bad] = 0.0
    e = np.exp(L - top[j])
    outlier = np.exp(log_out - top) if mu > 0 else np.zeros(N)
    total = np.bincount(j, e, minlength=N) + outlier
    log_p = np.log(total) + top
    bad |= ~(total > 0)
    total[bad] = 1.0
    data = e / total[j]
    keep = ~bad[j]
    outlier = outlier / total
    outlier[bad] = 1.0
    P = sparse.csr_matrix((data[keep], (i[keep], j[keep])), shape=(M, N))
    nll = float(-log_p[~bad].sum()) if (~bad).any() else float("inf")
    return Correspondences(P, outlier, priors, nll)


def _procrustes(X, PV, Pm, Np, my, estimate_scale, bounds):
    # PV = P @ V and my = Pn @ V / Np, so every sum over the cloud is precomputed
    mx = Pm @ X / Np
    Xc = X - mx
    A = (PV - Pm[:, None] * my).T @ Xc  # sum_mn P_mn (v_n - my)(x_m - mx)^T
    U, s, Wt = np.linalg.svd(A)
    D = np.ones(3)
    D[2] = np.sign(np.linalg.det(U @ Wt)) or 1.0
    R = (U * D) @ Wt
    if estimate_scale:
        denom = Pm @ (Xc * Xc).sum(axis=1)
        scale = float(np.clip((s * D).sum() / denom, *bounds)) if denom > 0 else 1.0
    else:
        scale = 1.0
    t = my - scale * R @ mx
    return Similarity(scale, R, t)


def _weighted_sse(X, PV, Pm, vv):
    # sum_mn P_mn |v_n - x_m|^2 with vv = sum_n Pn_n |v_n|^2
    return float(vv + Pm @ (X * X).sum(axis=1) - 2.0 * np.einsum("mc,mc->", X, PV))


def pose_basis(spec: BodyModelSpec, theta=None):
    """Vertices at beta=0 and d vertices / d beta for a fixed pose.

    With theta fixed, skinning is affine in beta (the joints are linear in the
    shaped template), so the shape update stays closed form at any pose.
    """
    if theta is None or not np.any(theta):
        return spec.template_vertices, spec.shape_basis
    jac = forward_jacobian(spec, BodyParams(np.zeros(spec.n_betas), theta, np.zeros(3)))
    return jac.mesh.vertices, jac.d_vertices_d_beta


def m_step(spec: BodyModelSpec, cloud, corr: Correspondences, cfg: GmmConfig,
           beta=None, similarity: Optional[Similarity] = None, sigma2: Optional[float] = None,
           vertex_idx=None, theta=None, basis=None):
    """Update (beta, similarity, sigma2) from fixed responsibilities.

    Minimises ``sum P_mn |v_n - T(M_m(beta))|^2 / (2 sigma2) + w |beta|^2`` by
    alternating exact block updates, then sets sigma2 to the weighted mean
    squared residual over 3 dimensions.
    """
    V = np.asarray(cloud.points if isinstance(cloud, PointCloud) else cloud, float)
    idx = np.arange(spec.n_vertices) if vertex_idx is None else np.asarray(vertex_idx)
    base, dbeta = basis if basis is not None else pose_basis(spec, theta)
    T0 = base[idx]
    S = dbeta[idx]  # (M, 3, B)
    P = corr.posterior
    if P.shape != (len(idx), len(V)):
        raise DimensionMismatch(f"posterior {P.shape} does not match {(len(idx), len(V))}")
    B = S.shape[2]
    beta = np.zeros(B) if beta is None else np.asarray(beta, float).copy()
    sim = similarity or Similarity()
    Pm, Pn = np.asarray(P.sum(axis=1)).ravel(), np.asarray(P.sum(axis=0)).ravel()
    Np = float(Pm.sum())
    if not Np > 1e-12:
        raise SingularNormalEquations("no effective correspondences")
    s2 = sigma2 if sigma2 is not None else 1.0
    w = cfg.beta_prior_weight

    # normal matrix pieces that do not depend on the transform
    G = np.einsum("m,mcb,mcd->bd", Pm, S, S)
    PV = np.asarray(P @ V)
    my = Pn @ V / Np
    vv = float(Pn @ (V * V).sum(axis=1))
    prev = np.inf
    for _ in range(max(1, cfg.inner_rounds)):
        X = T0 + S @ beta
        sim = _procrustes(X, PV, Pm, Np, my, cfg.estimate_scale, cfg.scale_bounds)
        # model-frame targets: R^T (PV - Pm t) / s
        Y = (PV - Pm[:, None] * sim.translation) @ sim.rotation / sim.scale
        k = sim.scale ** 2 / (2.0 * s2)
        A = k * G + w * np.eye(B)
        rhs = k * np.einsum("mcb,mc->b", S, Y - Pm[:, None] * T0)
        if B:
            # a positive prior keeps A positive definite whatever the data term scale
            if w == 0 and np.linalg.cond(A) > 1e12:
                raise SingularNormalEquations("shape normal equations are singular")
            beta = np.linalg.solve(A, rhs)
        X = sim.apply(T0 + S @ beta)
        obj = _weighted_sse(X, PV, Pm, vv) / (2.0 * s2) + w * float(beta @ beta)
        if prev - obj <= 1e-12 * max(1.0, abs(obj)):
            break
        prev = obj
    sse = max(_weighted_sse(sim.apply(T0 + S @ beta), PV, Pm, vv), 0.0)
    new_sigma2 = max(sse / (3.0 * Np), cfg.sigma2_min)
    return beta, sim, new_sigma2


def vertex_area_priors(vertices, faces, idx=None) -> np.ndarray:
    """pi_m proportional to one third of the area of the faces around vertex m."""
    tri = vertices[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    va = np.zeros(len(vertices))
    np.add.at(va, faces.ravel(), np.repeat(area / 3.0, 3))
    if idx is not None:
        va = va[idx]
    if not np.all(va > 0):
        va = np.maximum(va, va[va > 0].min() if np.any(va > 0) else 1.0)
    return va / va.sum()


def _choose_e_step(cfg: GmmConfig, extent: float):
    def run(X, V, sigma2, mu, priors):
        # sparse pays off once the cutoff ball is small against the cloud
        if cfg.truncate_sigmas is not None and cfg.truncate_sigmas * np.sqrt(sigma2) < 0.2 * extent:
            return e_step_sparse(X, V, sigma2, mu, priors, cfg.truncate_sigmas)
        return e_step(X, V, sigma2, mu, priors)
    return run


def _auto_sigma2(X, V):
    return float(cdist(X, V, "sqeuclidean").mean() / 3.0)


def fit_shape(spec: BodyModelSpec, cloud, cfg: Optional[GmmConfig] = None, vertex_mask=None,
              theta=None, init: Optional[ShapeFitResult] = None) -> ShapeFitResult:
    """EM shape fit.

    ``vertex_mask`` restricts the centroids to a vertex subset (e.g. torso).
    The pose is frozen at ``theta`` (rest when None). ``init`` warm-starts
    beta and the similarity from an earlier fit.
    """
    cfg = cfg or GmmConfig()
    cfg.validate()
    V = np.asarray(cloud.points if isinstance(cloud, PointCloud) else cloud, float)
    if len(V) < 10:
        raise ConfigError("shape fitting needs at least 10 cloud points")
    # canonical point order makes the result independent of input order
    V = V[np.lexsort(V.T[::-1])]
    if vertex_mask is None:
        idx = np.arange(spec.n_vertices)
    else:
        idx = np.asarray(vertex_mask)
        idx = np.where(idx)[0] if idx.dtype == bool else np.unique(idx)
        c = spec.template_vertices[idx]
        if len(idx) < 4 or np.linalg.matrix_rank(c[1:] - c[0], tol=1e-9) < 3:
            raise ConfigError("vertex mask must select at least 4 non-coplanar vertices")
    basis = pose_basis(spec, theta)
    T0 = basis[0][idx]
    S = basis[1][idx]
    B = spec.n_betas
    mu = cfg.outlier_weight
    beta, sim = np.zeros(B), Similarity()
    if cfg.max_em_iters == 0:
        return ShapeFitResult(beta, sim, float(cfg.sigma2_init or _auto_sigma2(T0, V)), [], [], 0, False)

    if init is not None:
        beta = np.asarray(init.beta, float).copy()
        sim = Similarity(init.similarity.scale, init.similarity.rotation.copy(), init.similarity.translation.copy())
        X0 = sim.apply(T0 + S @ beta)
        # residual scale of the warm start rather than the whole-cloud spread
        sigma2 = float(cfg.sigma2_init) if cfg.sigma2_init else float(np.mean(cKDTree(X0).query(V)[0] ** 2))
    else:
        # start from the centroid offset so the first E-step sees comparable clouds
        sim = Similarity(1.0, np.eye(3), V.mean(axis=0) - T0.mean(axis=0))
        X0 = sim.apply(T0)
        sigma2 = float(cfg.sigma2_init) if cfg.sigma2_init else _auto_sigma2(X0, V)
    sigma2 = max(sigma2, cfg.sigma2_min)
    w = cfg.beta_prior_weight
    # fixed for the whole run, so EM stays monotone
    priors = vertex_area_priors(spec.template_vertices, spec.faces, idx) if cfg.component_priors == "area" else None

    estep = _choose_e_step(cfg, float(np.linalg.norm(V.max(axis=0) - V.min(axis=0))))
    corr = estep(X0, V, sigma2, mu, priors)
    nll_trace = [corr.nll]
    obj_trace = [corr.nll + w * float(beta @ beta)]
    converged = False
    it = 0
    for it in range(1, cfg.max_em_iters + 1):
        beta, sim, sigma2 = m_step(spec, V, corr, cfg, beta, sim, sigma2, idx, basis=basis)
        corr = estep(sim.apply(T0 + S @ beta), V, sigma2, mu, priors)
        nll_trace.append(corr.nll)
        obj_trace.append(corr.nll + w * float(beta @ beta))
        if abs(obj_trace[-2] - obj_trace[-1]) <= cfg.em_tol * max(1.0, abs(obj_trace[-1])):
            converged = True
            break
        if sigma2 <= cfg.sigma2_min:
            converged = True
            break
    logger.info("shape fit: %d EM iterations, sigma=%.4g m, beta=%s", it, np.sqrt(sigma2), np.round(beta, 4))
    return ShapeFitResult(beta, sim, float(sigma2), nll_trace, obj_trace, it, converged)


def debias_shape(spec: BodyModelSpec, cloud, result: ShapeFitResult, cfg: Optional[GmmConfig] = None,
                 vertex_mask=None, seed: int = 0, rounds: int = 1) -> ShapeFitResult:
    """Parametric bootstrap correction of the surface-sampling bias in beta.

    Centroids on a curved surface explain a surface cloud best when pulled
    slightly inward, so limbs and girth come out small. The bias is measured
    by refitting a cloud sampled from the fitted model itself, then removed:
    beta <- beta + (beta_fit - beta_refit). The reported traces are those of
    the original fit.
    """
    from .body_model import forward
    from .ct_pipeline import TriMesh, sample_surface

    cfg = cfg or GmmConfig()
    n = len(cloud.points if isinstance(cloud, PointCloud) else cloud)
    faces = spec.faces
    if vertex_mask is not None:
        m = np.asarray(vertex_mask)
        keep = np.zeros(spec.n_vertices, bool)
        keep[np.where(m)[0] if m.dtype == bool else m] = True
        faces = faces[keep[faces].all(axis=1)]
    beta_fit = np.asarray(result.beta, float)
    beta = beta_fit.copy()
    for r in range(rounds):
        verts = forward(spec, BodyParams(beta, np.zeros((spec.n_joints, 3)), np.zeros(3))).vertices
        sim_cloud = sample_surface(TriMesh(result.similarity.apply(verts), faces), n, seed + 1 + r, to_meters=False)
        refit = fit_shape(spec, sim_cloud, cfg, vertex_mask)
        beta = beta + (beta_fit - refit.beta)
    return ShapeFitResult(beta, result.similarity, result.sigma2, result.nll_trace, result.objective_trace,
                          result.iterations, result.converged)
