"""Articulated body model: kinematic tree, blend skinning, analytic jacobians.

The model is deliberately small: a kinematic tree of K+1 joints posed by
axis-angle rotations (3 per joint, root first), a triangle mesh template
deformed by a linear shape basis and linear blend skinning, and a sparse
linear regressor mapping posed vertices to 3D keypoints. All lengths are
millimeters.

Pose convention: theta is a flat vector of length 3*(K+1). theta[0:3] is the
root rotation applied about the rest root position; theta[3j:3j+3] rotates
joint j about its rest position, expressed relative to the parent. A zero
pose reproduces the rest geometry exactly.

Jacobians are accumulated in closed form along the tree (no automatic
differentiation); the Rodrigues derivative follows the standard formula for
the exponential map of SO(3).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TEMPLATE_FORMAT = "depthpose-template"
TEMPLATE_VERSION = 1

_EPS_ANGLE = 1e-8


# ---------------------------------------------------------------------------
# rotations


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix of v (..., 3) -> (..., 3, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rodrigues(aa: np.ndarray) -> np.ndarray:
    """Axis-angle vectors (..., 3) to rotation matrices (..., 3, 3).

    Uses R = I + sin(t)/t K + (1-cos(t))/t^2 K^2 with K = skew(aa), with
    series fallbacks near t = 0 so the map is smooth through the identity.
    """
    aa = np.asarray(aa, dtype=float)
    t2 = np.sum(aa * aa, axis=-1)
    t = np.sqrt(t2)
    small = t < _EPS_ANGLE
    # sin(t)/t and (1-cos t)/t^2, guarded at t = 0
    ts = np.where(small, 1.0, t)
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(ts) / ts)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(ts)) / np.where(small, 1.0, t2))
    K = skew(aa)
    K2 = K @ K
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * K2


def rodrigues_jacobian(aa: np.ndarray) -> np.ndarray:
    """Derivative of rodrigues: (..., 3) -> (..., 3, 3, 3), index i gives dR/daa_i."""
    aa = np.asarray(aa, dtype=float)
    R = rodrigues(aa)
    t2 = np.sum(aa * aa, axis=-1)
    small = t2 < _EPS_ANGLE**2
    out = np.empty(aa.shape[:-1] + (3, 3, 3))
    eye = np.eye(3)
    # (I - R) e_i, shape (..., 3, 3) with i as the second-to-last axis
    ImR = eye - R
    t2g = np.where(small, 1.0, t2)
    for i in range(3):
        e = eye[i]
        # v x ((I - R) e_i)
        cr = np.cross(aa, ImR[..., :, i])
        term = aa[..., i, None, None] * skew(aa) + skew(cr)
        full = (term / t2g[..., None, None]) @ R
        out[..., i, :, :] = np.where(small[..., None, None], skew(e), full)
    return out


def rotation_to_aa(R: np.ndarray) -> np.ndarray:
    """Log map of a single rotation matrix (stable through 0 and pi)."""
    from scipy.spatial.transform import Rotation

    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()


def compose_aa(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Axis-angle of applying `first`, then `second` (second @ first)."""
    return rotation_to_aa(rodrigues(second) @ rodrigues(first))


def canonicalize_aa(aa: np.ndarray) -> np.ndarray:
    """Reduce axis-angle magnitudes mod 2*pi into [0, 2*pi); exactly 2*pi maps to 0."""
    aa = np.asarray(aa, dtype=float)
    t = np.linalg.norm(aa, axis=-1)
    tr = np.mod(t, 2.0 * np.pi)
    scale = np.where(t > 0, tr / np.where(t > 0, t, 1.0), 1.0)
    return aa * scale[..., None]


# ---------------------------------------------------------------------------
# containers


@dataclass
class KinematicTree:
    """Joint hierarchy with rest positions (mm). parents[0] == -1, parents[i] < i."""

    parents: np.ndarray
    rest_joints: np.ndarray
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=int)
        self.rest_joints = np.asarray(self.rest_joints, dtype=float)
        J = len(self.parents)
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        if np.any(self.parents[1:] >= np.arange(1, J)) or np.any(self.parents[1:] < 0):
            raise ValueError("parents must be topologically ordered (parent index < child)")
        if self.rest_joints.shape != (J, 3) or not np.all(np.isfinite(self.rest_joints)):
            raise ValueError("rest_joints must be finite with shape (J, 3)")
        if not self.names:
            self.names = [f"joint{i}" for i in range(J)]

    @property
    def num_joints(self) -> int:
        return len(self.parents)


@dataclass
class PoseShapeParams:
    """Flat pose vector (3 per joint, root first) and shape coefficients."""

    theta: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).ravel()
        self.beta = np.asarray(self.beta, dtype=float).ravel()
        if self.theta.size % 3 != 0:
            raise ValueError("theta length must be a multiple of 3")

    def canonicalized(self) -> "PoseShapeParams":
        aa = canonicalize_aa(self.theta.reshape(-1, 3))
        return PoseShapeParams(aa.ravel(), self.beta.copy())


@dataclass
class MeshTemplate:
    """Rest mesh, shape basis, skinning weights and keypoint regressor.

    hinge_joints/axes/signs declare the bend component of elbow/knee style
    joints: sign * theta[3*joint + axis] grows positive when the joint bends
    against its anatomical direction.
    """

    vertices: np.ndarray  # (N, 3) mm
    triangles: np.ndarray  # (F, 3) int
    shape_basis: np.ndarray  # (N, 3, P) mm per unit coefficient
    skin_weights: np.ndarray  # (N, J)
    joint_regressor: np.ndarray  # (J, N)
    hinge_joints: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    hinge_axes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    hinge_signs: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=int)
        self.shape_basis = np.asarray(self.shape_basis, dtype=float)
        self.skin_weights = np.asarray(self.skin_weights, dtype=float)
        self.joint_regressor = np.asarray(self.joint_regressor, dtype=float)
        self.hinge_joints = np.asarray(self.hinge_joints, dtype=int)
        self.hinge_axes = np.asarray(self.hinge_axes, dtype=int)
        self.hinge_signs = np.asarray(self.hinge_signs, dtype=float)
        N = len(self.vertices)
        if np.any(self.skin_weights < 0) or not np.allclose(self.skin_weights.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("skin weights must be nonnegative and sum to 1 per vertex")
        if not np.allclose(self.joint_regressor.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("regressor rows must sum to 1")
        if self.triangles.min() < 0 or self.triangles.max() >= N:
            raise ValueError("triangle indices out of range")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_shape(self) -> int:
        return self.shape_basis.shape[2]


# ---------------------------------------------------------------------------
# the model


class BodyModel:
    """Binds a kinematic tree to a mesh template and precomputes contraction
    tensors so keypoint jacobians never materialize per-vertex derivatives."""

    def __init__(self, tree: KinematicTree, template: MeshTemplate):
        J = tree.num_joints
        if template.skin_weights.shape[1] != J or template.joint_regressor.shape[0] != J:
            raise ValueError("template joint count does not match tree")
        self.tree = tree
        self.template = template
        self.num_joints = J
        self.num_pose = 3 * J
        self.num_shape = template.num_shape
        # reg (J,N) x weights (N,J): per (keypoint k, bone j) aggregates
        reg = template.joint_regressor
        W = template.skin_weights
        self._rw = reg @ W  # (J, J) scalar weight per (k, j)
        self._a0 = np.einsum("kv,vj,vy->kjy", reg, W, template.vertices)  # (J, J, 3)
        self._ab = np.einsum("kv,vj,vyp->kjyp", reg, W, template.shape_basis)  # (J, J, 3, P)
        # ancestor chains (self included) drive the sparse jacobian propagation
        chains = []
        for j in range(J):
            c = [j]
            while tree.parents[c[-1]] >= 0:
                c.append(int(tree.parents[c[-1]]))
            chains.append(c[::-1])
        depth = max(len(c) for c in chains)
        self._chain = np.zeros((J, depth), dtype=np.int64)
        self._chain_len = np.array([len(c) for c in chains], dtype=np.int64)
        for j, c in enumerate(chains):
            self._chain[j, : len(c)] = c
        # skin weights in CSR form for the per-vertex kernel
        keep = W > 1e-12
        self._w_ptr = np.concatenate([[0], np.cumsum(keep.sum(axis=1))]).astype(np.int64)
        self._w_idx = np.concatenate([np.nonzero(k)[0] for k in keep]).astype(np.int64)
        self._w_val = W[keep]

    # -- forward kinematics ------------------------------------------------

    def forward_kinematics(self, theta: np.ndarray):
        """World transforms per joint for a batch of poses.

        theta: (B, 3J) or (3J,). Returns (Rw, tw, joints): world rotations
        (B, J, 3, 3), translations (B, J, 3) of the map x -> Rw x + tw applied
        to rest coordinates, and posed joint positions (B, J, 3).
        """
        theta, squeeze = _as_batch(theta)
        B = theta.shape[0]
        J = self.num_joints
        rest = self.tree.rest_joints
        R = rodrigues(theta.reshape(B, J, 3))
        Rw = np.empty((B, J, 3, 3))
        tw = np.empty((B, J, 3))
        Rw[:, 0] = R[:, 0]
        tw[:, 0] = rest[0] - R[:, 0] @ rest[0]
        for j in range(1, J):
            p = self.tree.parents[j]
            Rw[:, j] = Rw[:, p] @ R[:, j]
            tw[:, j] = np.einsum("bxy,by->bx", Rw[:, p], rest[j] - R[:, j] @ rest[j]) + tw[:, p]
        joints = np.einsum("bjxy,jy->bjx", Rw, rest) + tw
        if squeeze:
            return Rw[0], tw[0], joints[0]
        return Rw, tw, joints

    def _fk_with_jacobian(self, theta: np.ndarray):
        """FK plus derivatives of (Rw, tw) w.r.t. every pose coordinate.

        Returns Rw (B,J,3,3), tw (B,J,3), dRw (B,J,Q,3,3), dtw (B,J,Q,3).
        """
        B = theta.shape[0]
        J = self.num_joints
        Q = self.num_pose
        rest = self.tree.rest_joints
        aa = theta.reshape(B, J, 3)
        R = rodrigues(aa)
        dR = rodrigues_jacobian(aa)  # (B, J, 3, 3, 3)
        Rw = np.empty((B, J, 3, 3))
        tw = np.empty((B, J, 3))
        dRw = np.zeros((B, J, Q, 3, 3))
        dtw = np.zeros((B, J, Q, 3))
        Rw[:, 0] = R[:, 0]
        tw[:, 0] = rest[0] - R[:, 0] @ rest[0]
        for i in range(3):
            dRw[:, 0, i] = dR[:, 0, i]
            dtw[:, 0, i] = -np.einsum("bxy,y->bx", dR[:, 0, i], rest[0])
        for j in range(1, J):
            p = self.tree.parents[j]
            local_t = rest[j] - R[:, j] @ rest[j]  # (B, 3)
            Rw[:, j] = Rw[:, p] @ R[:, j]
            tw[:, j] = np.einsum("bxy,by->bx", Rw[:, p], local_t) + tw[:, p]
            # chain rule through the parent for every coordinate at once
            dRw[:, j] = np.einsum("bqxy,byz->bqxz", dRw[:, p], R[:, j])
            dtw[:, j] = np.einsum("bqxy,by->bqx", dRw[:, p], local_t) + dtw[:, p]
            # own three coordinates additionally move the local rotation
            for i in range(3):
                q = 3 * j + i
                dRw[:, j, q] += np.einsum("bxy,byz->bxz", Rw[:, p], dR[:, j, i])
                dtw[:, j, q] -= np.einsum("bxy,byz,z->bx", Rw[:, p], dR[:, j, i], rest[j])
        return Rw, tw, dRw, dtw

    # -- skinning and keypoints ---------------------------------------------

    def shaped_vertices(self, beta: np.ndarray) -> np.ndarray:
        beta = np.asarray(beta, dtype=float).ravel()
        return self.template.vertices + self.template.shape_basis @ beta

    def skin(self, theta: np.ndarray, beta: np.ndarray) -> np.ndarray:
        """Pose the shaped template: (N, 3) vertices in model space (mm)."""
        Rw, tw, _ = self.forward_kinematics(np.asarray(theta, dtype=float).ravel())
        vp = self.shaped_vertices(beta)
        W = self.template.skin_weights
        Reff = np.einsum("vj,jxy->vxy", W, Rw)
        return np.einsum("vxy,vy->vx", Reff, vp) + W @ tw

    def regress_joints(self, vertices: np.ndarray) -> np.ndarray:
        """Keypoints from posed vertices: (J, N) @ (N, 3)."""
        return self.template.joint_regressor @ np.asarray(vertices, dtype=float)

    def joints(self, theta: np.ndarray, beta: np.ndarray) -> np.ndarray:
        """Regressed keypoints, batched: theta (B,3J)/(3J,), beta (B,P)/(P,)."""
        theta, squeeze = _as_batch(theta)
        beta = np.atleast_2d(np.asarray(beta, dtype=float))
        Rw, tw, _ = self.forward_kinematics(theta)
        a = self._a0[None] + np.einsum("kjyp,bp->bkjy", self._ab, beta)
        X = np.einsum("bjxy,bkjy->bkx", Rw, a) + np.einsum("bjx,kj->bkx", tw, self._rw)
        return X[0] if squeeze else X

    def joints_with_jacobian(self, theta: np.ndarray, beta: np.ndarray):
        """Keypoints plus d(joints)/d(theta) and d(joints)/d(beta).

        Returns X (B,J,3), dX_dtheta (B,J,3,Q), dX_dbeta (B,J,3,P); batch axis
        squeezed when the inputs are single samples.
        """
        from . import kernels

        theta, squeeze = _as_batch(theta)
        beta = np.atleast_2d(np.asarray(beta, dtype=float))
        if beta.shape[0] == 1 and theta.shape[0] > 1:
            beta = np.broadcast_to(beta, (theta.shape[0], beta.shape[1]))
        X, dXt, dXb = kernels.fk_joints_jacobian(
            np.ascontiguousarray(theta), np.ascontiguousarray(beta),
            self.tree.rest_joints, self.tree.parents.astype(np.int64),
            self._chain, self._chain_len, self._a0, self._ab, self._rw,
        )
        if squeeze:
            return X[0], dXt[0], dXb[0]
        return X, dXt, dXb

    def joints_with_jacobian_reference(self, theta: np.ndarray, beta: np.ndarray):
        """Plain-numpy evaluation of joints_with_jacobian (kept as the oracle
        for the compiled kernel; same contract)."""
        theta, squeeze = _as_batch(theta)
        beta = np.atleast_2d(np.asarray(beta, dtype=float))
        Rw, tw, dRw, dtw = self._fk_with_jacobian(theta)
        a = self._a0[None] + np.einsum("kjyp,bp->bkjy", self._ab, beta)
        X = np.einsum("bjxy,bkjy->bkx", Rw, a) + np.einsum("bjx,kj->bkx", tw, self._rw)
        dXt = np.einsum("bjqxy,bkjy->bkxq", dRw, a) + np.einsum("bjqx,kj->bkxq", dtw, self._rw)
        dXb = np.einsum("bjxy,kjyp->bkxp", Rw, self._ab)
        if squeeze:
            return X[0], dXt[0], dXb[0]
        return X, dXt, dXb

    def vertex_jacobians(self, theta: np.ndarray, beta: np.ndarray):
        """Posed vertices plus dense d(vertices)/d(theta) and d(vertices)/d(beta).

        Single sample only; used by tests and probes. Returns
        v (N,3), dv_dtheta (N,3,Q), dv_dbeta (N,3,P).
        """
        theta = np.asarray(theta, dtype=float).reshape(1, -1)
        Rw, tw, dRw, dtw = self._fk_with_jacobian(theta)
        Rw, tw, dRw, dtw = Rw[0], tw[0], dRw[0], dtw[0]
        vp = self.shaped_vertices(beta)
        W = self.template.skin_weights
        v = np.einsum("vj,jxy,vy->vx", W, Rw, vp) + W @ tw
        dvt = np.einsum("vj,jqxy,vy->vxq", W, dRw, vp) + np.einsum("vj,jqx->vxq", W, dtw)
        dvb = np.einsum("vj,jxy,vyp->vxp", W, Rw, self.template.shape_basis)
        return v, dvt, dvb

    def vertex_depth_jacobians(self, theta: np.ndarray, beta: np.ndarray):
        """Posed vertices plus jacobians of the vertex z coordinate only.

        The depth loss never needs x/y derivatives, so this compiled path
        returns v (N,3), dz_dtheta (N,Q), dz_dbeta (N,P).
        """
        from . import kernels

        return kernels.vertex_z_jacobian(
            np.ascontiguousarray(np.asarray(theta, dtype=float).ravel()),
            np.ascontiguousarray(np.asarray(beta, dtype=float).ravel()),
            self.tree.rest_joints, self.tree.parents.astype(np.int64),
            self._chain, self._chain_len,
            self.template.vertices, self.template.shape_basis,
            self._w_idx, self._w_val, self._w_ptr,
        )


def _as_batch(theta):
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 1:
        return theta[None, :], True
    return theta, False


# ---------------------------------------------------------------------------
# template file I/O


def save_template(path, tree: KinematicTree, template: MeshTemplate) -> None:
    """Versioned single-file template archive (counts live in array shapes)."""
    np.savez(
        path,
        format=np.array(TEMPLATE_FORMAT),
        version=np.array(TEMPLATE_VERSION),
        names=np.array(tree.names),
        parents=tree.parents,
        rest_joints=tree.rest_joints,
        vertices=template.vertices,
        triangles=template.triangles,
        shape_basis=template.shape_basis,
        skin_weights=template.skin_weights,
        joint_regressor=template.joint_regressor,
        hinge_joints=template.hinge_joints,
        hinge_axes=template.hinge_axes,
        hinge_signs=template.hinge_signs,
    )


def load_template(path):
    """Load a template archive; returns (KinematicTree, MeshTemplate)."""
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != TEMPLATE_FORMAT:
            raise ValueError(f"{path}: not a template file")
        if int(z["version"]) != TEMPLATE_VERSION:
            raise ValueError(f"{path}: unsupported template version {z['version']}")
        tree = KinematicTree(z["parents"], z["rest_joints"], [str(n) for n in z["names"]])
        template = MeshTemplate(
            z["vertices"], z["triangles"], z["shape_basis"], z["skin_weights"],
            z["joint_regressor"], z["hinge_joints"], z["hinge_axes"], z["hinge_signs"],
        )
    return tree, template


# ---------------------------------------------------------------------------
# procedural desk-scale template

_DESK_JOINTS = [
    # name, parent, position (mm, y-up, front = +z)
    ("pelvis", -1, (0.0, 0.0, 0.0)),
    ("spine", 0, (0.0, 140.0, 0.0)),
    ("chest", 1, (0.0, 280.0, 0.0)),
    ("head", 2, (0.0, 420.0, 0.0)),
    ("l_shoulder", 2, (150.0, 280.0, 0.0)),
    ("l_elbow", 4, (150.0, 70.0, 0.0)),
    ("l_wrist", 5, (150.0, -120.0, 0.0)),
    ("r_shoulder", 2, (-150.0, 280.0, 0.0)),
    ("r_elbow", 7, (-150.0, 70.0, 0.0)),
    ("r_wrist", 8, (-150.0, -120.0, 0.0)),
    ("l_hip", 0, (75.0, -45.0, 0.0)),
    ("l_knee", 10, (75.0, -285.0, 0.0)),
    ("l_ankle", 11, (75.0, -515.0, 0.0)),
    ("r_hip", 0, (-75.0, -45.0, 0.0)),
    ("r_knee", 13, (-75.0, -285.0, 0.0)),
    ("r_ankle", 14, (-75.0, -515.0, 0.0)),
]

# child joint -> capsule radius (mm); every radius stays below the default
# visibility threshold so an unoccluded joint always passes the depth gate
_DESK_RADII = {
    1: 28.0, 2: 28.0, 3: 26.0,
    4: 20.0, 5: 20.0, 6: 17.0,
    7: 20.0, 8: 20.0, 9: 17.0,
    10: 24.0, 11: 24.0, 12: 19.0,
    13: 24.0, 14: 24.0, 15: 19.0,
}

# (joint, axis within its triple, sign): sign * theta grows positive when the
# hinge bends against anatomy. Elbows flex with negative x, knees with positive x.
_DESK_HINGES = [(5, 0, 1.0), (8, 0, 1.0), (11, 0, -1.0), (14, 0, -1.0)]

CAPSULE_SEGMENTS = 6


def capsule_mesh(a, b, radius, segments: int = CAPSULE_SEGMENTS):
    """Capsule from a to b: 2 + 6*segments vertices, poles plus six rings.

    Ring layout along the axis: cap ring, equator at a, two cylinder rings,
    equator at b, cap ring. Equator rings are centered exactly on the
    endpoints, which the joint regressor relies on.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    axis = b - a
    length = np.linalg.norm(axis)
    if length <= 0:
        raise ValueError("degenerate capsule")
    u = axis / length
    # stable orthonormal frame
    ref = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(u, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    psi = 2.0 * np.pi * np.arange(segments) / segments
    rim = np.outer(np.cos(psi), e1) + np.outer(np.sin(psi), e2)  # (S, 3)

    verts = [a - radius * u]  # bottom pole
    s45 = np.sin(np.pi / 4)
    rings = [
        a - radius * s45 * u + radius * s45 * rim,  # lower cap ring
        a + radius * rim,                            # equator at a
        a + (length / 3.0) * u + radius * rim,
        a + (2.0 * length / 3.0) * u + radius * rim,
        b + radius * rim,                            # equator at b
        b + radius * s45 * u + radius * s45 * rim,   # upper cap ring
    ]
    verts.extend(rings)
    verts.append(b + radius * u)  # top pole
    V = np.concatenate([np.asarray(v).reshape(-1, 3) for v in verts], axis=0)

    tris = []
    S = segments
    def ring_start(r):  # vertex index of ring r
        return 1 + r * S
    for k in range(S):
        kn = (k + 1) % S
        tris.append((0, ring_start(0) + kn, ring_start(0) + k))  # bottom fan
    for r in range(5):
        r0, r1 = ring_start(r), ring_start(r + 1)
        for k in range(S):
            kn = (k + 1) % S
            tris.append((r0 + k, r0 + kn, r1 + k))
            tris.append((r1 + k, r0 + kn, r1 + kn))
    top = 1 + 6 * S
    for k in range(S):
        kn = (k + 1) % S
        tris.append((top, ring_start(5) + k, ring_start(5) + kn))
    return V, np.asarray(tris, dtype=int)


def _point_segment_distance(points, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = np.clip(((points - a) @ ab) / denom, 0.0, 1.0) if denom > 0 else np.zeros(len(points))
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1), closest


def build_desk_template():
    """Procedural capsule body: returns (KinematicTree, MeshTemplate).

    One capsule per bone, bound to the bone's parent joint; smooth
    distance-based skinning blends adjacent bones near the joints. The
    regressor row of joint j averages the equator ring centered on j, so the
    zero pose regresses the rest joints exactly.
    """
    names = [j[0] for j in _DESK_JOINTS]
    parents = np.array([j[1] for j in _DESK_JOINTS])
    rest = np.array([j[2] for j in _DESK_JOINTS])
    tree = KinematicTree(parents, rest, names)
    J = tree.num_joints
    S = CAPSULE_SEGMENTS

    all_v, all_t = [], []
    bone_of = []  # child joint per capsule
    offset = 0
    ring_at_joint = {}  # joint -> slice of its defining equator ring
    for child in range(1, J):
        p = parents[child]
        V, T = capsule_mesh(rest[p], rest[child], _DESK_RADII[child])
        all_v.append(V)
        all_t.append(T + offset)
        bone_of.extend([child] * len(V))
        # equator ring at b (the child end) starts at local index 1 + 4*S
        ring_at_joint[child] = slice(offset + 1 + 4 * S, offset + 1 + 5 * S)
        if child == 1:
            # equator at a of the pelvis->spine capsule sits exactly on the root
            ring_at_joint[0] = slice(offset + 1 + S, offset + 1 + 2 * S)
        offset += len(V)
    vertices = np.concatenate(all_v, axis=0)
    triangles = np.concatenate(all_t, axis=0)
    N = len(vertices)

    # smooth skinning: gaussian falloff of distance to each bone segment,
    # accumulated on the bone's parent joint
    scores = np.zeros((N, J))
    axis_points = np.zeros((N, 3))
    best = np.full(N, np.inf)
    for child in range(1, J):
        p = parents[child]
        d, closest = _point_segment_distance(vertices, rest[p], rest[child])
        sigma = 0.9 * _DESK_RADII[child]
        scores[:, p] += np.exp(-((d / sigma) ** 2))
        nearer = d < best
        axis_points[nearer] = closest[nearer]
        best = np.minimum(best, d)
    weights = scores / scores.sum(axis=1, keepdims=True)

    regressor = np.zeros((J, N))
    for j in range(J):
        regressor[j, ring_at_joint[j]] = 1.0 / S

    # four synthetic shape directions: stature, girth, leg length, arm span
    basis = np.zeros((N, 3, 4))
    basis[:, :, 0] = 0.06 * vertices
    basis[:, :, 1] = 0.15 * (vertices - axis_points)
    basis[:, 1, 2] = 0.05 * vertices[:, 1]
    basis[:, 0, 3] = 0.05 * vertices[:, 0]

    hj = np.array([h[0] for h in _DESK_HINGES])
    ha = np.array([h[1] for h in _DESK_HINGES])
    hs = np.array([h[2] for h in _DESK_HINGES])
    template = MeshTemplate(vertices, triangles, basis, weights, regressor, hj, ha, hs)
    return tree, template


def desk_model() -> BodyModel:
    tree, template = build_desk_template()
    return BodyModel(tree, template)
