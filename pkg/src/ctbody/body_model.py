"""Parametric body mesh M(beta, theta, trans).

Shape blendshapes, joint regression, forward kinematics along the joint tree
and linear blend skinning, plus analytic Jacobians of the posed vertices and
joints with respect to every parameter.

Pose-dependent corrective blendshapes are not applied. A model file may carry
them (``pose_basis``) so converted SMPL assets still load.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, EmptyMesh, IoError

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"CTBODYM1"
_SMALL_ANGLE = 1e-8


@dataclass
class BodyModelSpec:
    template_vertices: np.ndarray  # (M, 3) meters
    faces: np.ndarray  # (F, 3) int
    shape_basis: np.ndarray  # (M, 3, B) meters per unit beta
    joint_regressor: np.ndarray  # (K, M)
    parent: np.ndarray  # (K,) root = -1
    skin_weights: np.ndarray  # (M, K)
    pose_basis: Optional[np.ndarray] = None  # reserved, ignored by forward()
    regions: dict = field(default_factory=dict)  # name -> vertex indices

    def __post_init__(self):
        self.template_vertices = np.asarray(self.template_vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        self.joint_regressor = np.asarray(self.joint_regressor, dtype=np.float64)
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        self.regions = {k: np.asarray(v, dtype=np.int64) for k, v in self.regions.items()}
        self._order = None
        self._descendants = None

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.parent.shape[0]

    @property
    def n_betas(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def order(self) -> np.ndarray:
        """Joint indices sorted so every parent precedes its children."""
        if self._order is None:
            self._order = _topological_order(self.parent)
        return self._order

    @property
    def descendants(self) -> np.ndarray:
        """(K, K) bool, ``D[j, k]`` is True when k is j or lies below j."""
        if self._descendants is None:
            K = self.n_joints
            D = np.eye(K, dtype=bool)
            for k in self.order[::-1]:
                p = self.parent[k]
                if p >= 0:
                    D[p] |= D[k]
            self._descendants = D
        return self._descendants

    def validate(self, tol: float = 1e-6) -> None:
        M, K, B = self.n_vertices, self.n_joints, self.n_betas
        if self.template_vertices.shape != (M, 3):
            raise DimensionMismatch("template_vertices must be (M, 3)")
        if self.shape_basis.shape != (M, 3, B):
            raise DimensionMismatch(f"shape_basis {self.shape_basis.shape} != {(M, 3, B)}")
        if self.joint_regressor.shape != (K, M):
            raise DimensionMismatch(f"joint_regressor {self.joint_regressor.shape} != {(K, M)}")
        if self.skin_weights.shape != (M, K):
            raise DimensionMismatch(f"skin_weights {self.skin_weights.shape} != {(M, K)}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= M):
            raise DimensionMismatch("face index out of range")
        for name, arr in (("skin_weights", self.skin_weights), ("joint_regressor", self.joint_regressor)):
            if arr.min() < 0:
                raise ValueError(f"{name} has negative entries")
            if not np.allclose(arr.sum(axis=1), 1.0, atol=tol, rtol=0):
                raise ValueError(f"{name} rows must sum to 1")
        _topological_order(self.parent)
        for name, idx in self.regions.items():
            if idx.size and (idx.min() < 0 or idx.max() >= M):
                raise DimensionMismatch(f"region {name!r} indexes missing vertices")


@dataclass
class BodyParams:
    beta: np.ndarray  # (B,)
    theta: np.ndarray  # (K, 3) axis-angle, radians
    trans: np.ndarray  # (3,) meters

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1, 3)
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(3)

    @classmethod
    def zeros(cls, spec: BodyModelSpec) -> "BodyParams":
        return cls(np.zeros(spec.n_betas), np.zeros((spec.n_joints, 3)), np.zeros(3))

    def copy(self) -> "BodyParams":
        return BodyParams(self.beta.copy(), self.theta.copy(), self.trans.copy())

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "theta": self.theta.tolist(), "trans": self.trans.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BodyParams":
        return cls(d["beta"], d["theta"], d["trans"])


@dataclass
class BodyMesh:
    vertices: np.ndarray  # (M, 3)
    joints: np.ndarray  # (K, 3)
    faces: np.ndarray  # (F, 3)


def _topological_order(parent: np.ndarray) -> np.ndarray:
    parent = np.asarray(parent)
    K = parent.shape[0]
    if K == 0 or parent[0] != -1:
        raise ValueError("joint 0 must be the root (parent -1)")
    if np.any(parent[1:] < 0) or np.any(parent >= K):
        raise ValueError("parent array does not encode a tree rooted at joint 0")
    children = [[] for _ in range(K)]
    for k in range(1, K):
        children[parent[k]].append(k)
    order, stack = [], [0]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    if len(order) != K:
        raise ValueError("parent array contains a cycle")
    return np.array(order, dtype=np.int64)


def skew(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def rodrigues(axis_angle) -> np.ndarray:
    """Rotation matrix of an axis-angle vector.

    Below an angle of 1e-8 the second-order series ``I + K + K^2/2`` is used.
    """
    w = np.asarray(axis_angle, dtype=np.float64).reshape(3)
    theta = np.sqrt(w @ w)
    K = skew(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    k = K / theta
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def left_jacobian(axis_angle) -> np.ndarray:
    """SO(3) left Jacobian: ``d rodrigues(w) / dw_i = skew(J e_i) @ rodrigues(w)``."""
    w = np.asarray(axis_angle, dtype=np.float64).reshape(3)
    theta = np.sqrt(w @ w)
    K = skew(w)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    return (np.eye(3) + (1.0 - np.cos(theta)) / theta**2 * K
            + (theta - np.sin(theta)) / theta**3 * (K @ K))


def canonical_axis_angle(axis_angle) -> np.ndarray:
    """Wrap the rotation angle into [0, pi] without changing the rotation."""
    w = np.asarray(axis_angle, dtype=np.float64).reshape(3)
    theta = np.sqrt(w @ w)
    if theta < _SMALL_ANGLE:
        return w.copy()
    axis = w / theta
    theta = np.mod(theta, 2.0 * np.pi)
    if theta > np.pi:
        axis, theta = -axis, 2.0 * np.pi - theta
    return axis * theta


def _check_params(spec: BodyModelSpec, params: BodyParams) -> None:
    if params.beta.shape[0] != spec.n_betas:
        raise DimensionMismatch(f"beta has {params.beta.shape[0]} entries, model expects {spec.n_betas}")
    if params.theta.shape[0] != spec.n_joints:
        raise DimensionMismatch(f"theta has {params.theta.shape[0]} joints, model expects {spec.n_joints}")


def shaped_template(spec: BodyModelSpec, beta: np.ndarray) -> np.ndarray:
    return spec.template_vertices + spec.shape_basis @ np.asarray(beta, dtype=np.float64)


def _kinematics(spec, params):
    """Rest joints, global rotations and world joint positions (without trans)."""
    v_shaped = shaped_template(spec, params.beta)
    J = spec.joint_regressor @ v_shaped
    K = spec.n_joints
    R_local = np.stack([rodrigues(params.theta[k]) for k in range(K)])
    R_glob = np.empty((K, 3, 3))
    J_world = np.empty((K, 3))
    for k in spec.order:
        p = spec.parent[k]
        if p < 0:
            R_glob[k] = R_local[k]
            J_world[k] = J[k]
        else:
            R_glob[k] = R_glob[p] @ R_local[k]
            J_world[k] = R_glob[p] @ (J[k] - J[p]) + J_world[p]
    return v_shaped, J, R_glob, J_world


def _bone_points(v_shaped, J, R_glob, J_world):
    # x[v, k] = vertex v carried rigidly by bone k
    return np.einsum("kab,vb->vka", R_glob, v_shaped) + (J_world - np.einsum("kab,kb->ka", R_glob, J))[None]


def forward(spec: BodyModelSpec, params: BodyParams) -> BodyMesh:
    """Pose the model: blendshapes, joint regression, kinematics, skinning, translation."""
    _check_params(spec, params)
    v_shaped, J, R_glob, J_world = _kinematics(spec, params)
    x = _bone_points(v_shaped, J, R_glob, J_world)
    verts = np.einsum("vk,vka->va", spec.skin_weights, x) + params.trans
    return BodyMesh(verts, J_world + params.trans, spec.faces)


@dataclass
class BodyJacobian:
    mesh: BodyMesh
    d_vertices_d_beta: np.ndarray  # (M, 3, B)
    d_vertices_d_theta: np.ndarray  # (M, 3, K, 3)
    d_joints_d_beta: np.ndarray  # (K, 3, B)
    d_joints_d_theta: np.ndarray  # (K, 3, K, 3)
    # d/d trans is the identity for every vertex and joint


def forward_jacobian(spec: BodyModelSpec, params: BodyParams) -> BodyJacobian:
    """Posed mesh together with its analytic Jacobians."""
    _check_params(spec, params)
    v_shaped, J, R_glob, J_world = _kinematics(spec, params)
    x = _bone_points(v_shaped, J, R_glob, J_world)
    W = spec.skin_weights
    D = spec.descendants.astype(np.float64)
    K = spec.n_joints

    # world rotation axes: a[j, i] is the angular velocity of joint j's subtree per unit theta[j, i]
    a = np.empty((K, 3, 3))
    for j in range(K):
        p = spec.parent[j]
        Rp = R_glob[p] if p >= 0 else np.eye(3)
        a[j] = (Rp @ left_jacobian(params.theta[j])).T

    c = W @ D.T  # (M, K): skin weight carried by each subtree
    Wx = W[:, :, None] * x
    Y = np.tensordot(Wx, D, axes=([1], [1])).transpose(0, 2, 1)  # (M, K, 3): sum over subtree bones
    r = Y - c[:, :, None] * J_world[None]
    dV_dtheta = np.cross(a[None, :, :, :], r[:, :, None, :])  # (M, K, 3i, 3c)
    dV_dtheta = dV_dtheta.transpose(0, 3, 1, 2)

    rj = J_world[None, :, :] - J_world[:, None, :]  # rj[j, k] = Jw_k - Jw_j
    dJ_dtheta = np.cross(a[:, None, :, :], rj[:, :, None, :]) * D[:, :, None, None]  # (j, k, i, c)
    dJ_dtheta = dJ_dtheta.transpose(1, 3, 0, 2)

    S = spec.shape_basis
    dJrest = np.tensordot(spec.joint_regressor, S, axes=1)
    dJw = np.empty_like(dJrest)
    for k in spec.order:
        p = spec.parent[k]
        if p < 0:
            dJw[k] = dJrest[k]
        else:
            dJw[k] = R_glob[p] @ (dJrest[k] - dJrest[p]) + dJw[p]
    # per bone: R_k (S_v - dJ_k) + dJw_k, blended
    WR = np.tensordot(W, R_glob, axes=([1], [0]))  # (M, 3, 3) blended rotation per vertex
    dV_dbeta = (np.einsum("vac,vcb->vab", WR, S)
                - np.tensordot(W, np.einsum("kac,kcb->kab", R_glob, dJrest), axes=([1], [0]))
                + np.tensordot(W, dJw, axes=([1], [0])))

    mesh = BodyMesh(np.einsum("vk,vka->va", W, x) + params.trans, J_world + params.trans, spec.faces)
    return BodyJacobian(mesh, dV_dbeta, dV_dtheta, dJw, dJ_dtheta)


def body_height(mesh, up_axis=0) -> float:
    """Extent of the vertices along ``up_axis`` (an axis index or a direction vector)."""
    verts = np.asarray(mesh.vertices if hasattr(mesh, "vertices") else mesh, dtype=np.float64)
    if verts.size == 0:
        raise EmptyMesh("cannot measure an empty mesh")
    h = verts @ _axis_vector(up_axis)
    return float(h.max() - h.min())


def _axis_vector(up_axis) -> np.ndarray:
    if np.isscalar(up_axis):
        e = np.zeros(3)
        e[int(up_axis)] = 1.0
        return e
    u = np.asarray(up_axis, dtype=np.float64).reshape(3)
    return u / np.linalg.norm(u)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals (unit length, zero for isolated vertices)."""
    tri = vertices[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    vn = np.zeros_like(vertices)
    for i in range(3):
        np.add.at(vn, faces[:, i], fn)
    norm = np.linalg.norm(vn, axis=1, keepdims=True)
    return np.divide(vn, norm, out=np.zeros_like(vn), where=norm > 0)


# -- model file -----------------------------------------------------------------
#
# 8-byte magic, u64 little-endian header length, UTF-8 JSON header, then the
# arrays as contiguous little-endian float64 in header order. Each header entry
# gives name, shape and byte offset from the start of the data block. Integer
# arrays (faces, parent, regions) are stored as exact float64 values.

_ARRAY_FIELDS = ("template_vertices", "faces", "shape_basis", "joint_regressor", "parent", "skin_weights")


def save_model(spec: BodyModelSpec, path) -> None:
    arrays = [(name, getattr(spec, name)) for name in _ARRAY_FIELDS]
    if spec.pose_basis is not None:
        arrays.append(("pose_basis", spec.pose_basis))
    for name in sorted(spec.regions):
        arrays.append((f"region:{name}", spec.regions[name]))
    entries, blobs, offset = [], [], 0
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {
        "format": "ctbody-model",
        "version": 1,
        "dims": {"M": spec.n_vertices, "K": spec.n_joints, "B": spec.n_betas, "F": int(spec.faces.shape[0])},
        "dtype": "<f8",
        "arrays": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack("<Q", len(hbytes)))
            fh.write(hbytes)
            for b in blobs:
                fh.write(b)
    except OSError as exc:
        raise IoError(f"cannot write model file {path}: {exc}") from exc


def load_model(path) -> BodyModelSpec:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read model file {path}: {exc}") from exc
    if raw[:8] != MODEL_MAGIC:
        raise IoError(f"{path} is not a body model file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=start).reshape(entry["shape"]).copy()
    missing = [f for f in _ARRAY_FIELDS if f not in arrays]
    if missing:
        raise IoError(f"model file lacks arrays: {missing}")
    if "pose_basis" in arrays:
        logger.info("model carries pose blendshapes; they are ignored")
    regions = {k.split(":", 1)[1]: v.astype(np.int64) for k, v in arrays.items() if k.startswith("region:")}
    spec = BodyModelSpec(
        template_vertices=arrays["template_vertices"],
        faces=arrays["faces"].astype(np.int64),
        shape_basis=arrays["shape_basis"],
        joint_regressor=arrays["joint_regressor"],
        parent=arrays["parent"].astype(np.int64),
        skin_weights=arrays["skin_weights"],
        pose_basis=arrays.get("pose_basis"),
        regions=regions,
    )
    spec.validate()
    return spec


def save_params(params: BodyParams, path) -> None:
    try:
        with open(path, "w") as fh:
            json.dump(params.to_dict(), fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_params(path) -> BodyParams:
    try:
        with open(path) as fh:
            return BodyParams.from_dict(json.load(fh))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
