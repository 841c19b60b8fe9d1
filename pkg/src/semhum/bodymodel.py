"""Articulated capsule body: kinematic chain, pose math, surface proxy.

The subject is a set of K capsules (bones).  Bone i is the capsule from
its joint to its tip, both given in canonical (T-pose) coordinates; a
child's joint normally coincides with a point on its parent.  A pose
rotates each bone about its own joint (axis-angle, composed down the
parent chain) and places the root joint at the pose's root position.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

_SMALL_ANGLE = 1e-8


@dataclass
class Skeleton:
    parent: np.ndarray  # (K,) int, -1 for the root
    rest_joints: np.ndarray  # (K,3) joint positions, canonical space
    bone_tips: np.ndarray  # (K,3) far capsule endpoints, canonical space
    bone_radii: np.ndarray  # (K,) capsule radii

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.rest_joints = np.asarray(self.rest_joints, dtype=np.float64)
        self.bone_tips = np.asarray(self.bone_tips, dtype=np.float64)
        self.bone_radii = np.asarray(self.bone_radii, dtype=np.float64)
        k = self.parent.shape[0]
        if k < 2:
            raise ValueError(f"skeleton needs K >= 2 bones, got {k}")
        roots = np.flatnonzero(self.parent < 0)
        if len(roots) != 1:
            raise ValueError(f"skeleton must have exactly one root, got {len(roots)}")
        # acyclicity: walking up from every bone must terminate
        for i in range(k):
            seen = set()
            j = i
            while j >= 0:
                if j in seen:
                    raise ValueError(f"skeleton parent chain has a cycle at bone {i}")
                seen.add(j)
                j = int(self.parent[j])

    @property
    def k(self) -> int:
        return self.parent.shape[0]

    @property
    def root(self) -> int:
        return int(np.flatnonzero(self.parent < 0)[0])


@dataclass
class Pose:
    joints: np.ndarray  # (K,3)
    rotations: np.ndarray  # (K,3) axis-angle per bone

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        if not (np.all(np.isfinite(self.joints)) and np.all(np.isfinite(self.rotations))):
            raise ValueError("pose contains non-finite values")


@dataclass
class BoneTransformSet:
    """Per-bone rigid transforms, observation -> canonical."""

    rotations: np.ndarray  # (K,3,3)
    translations: np.ndarray  # (K,3)


@dataclass
class SurfaceVertices:
    positions: np.ndarray  # (N,3)
    space: str  # "observation" | "canonical"
    bone_ids: np.ndarray = field(default=None)  # (N,) owning bone per vertex


def skew(omega: np.ndarray) -> np.ndarray:
    x, y, z = omega
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_matrix(omega) -> np.ndarray:
    """Rodrigues rotation; first-order (I + skew) below the small-angle cutoff."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.sqrt(float(omega @ omega))
    if theta < _SMALL_ANGLE:
        return np.eye(3) + skew(omega)
    axis = omega / theta
    k = skew(axis)
    return np.eye(3) * np.cos(theta) + np.sin(theta) * k + (1.0 - np.cos(theta)) * np.outer(axis, axis)


def matrix_to_axis_angle(r: np.ndarray) -> np.ndarray:
    """Inverse of axis_angle_to_matrix, robust near 0 and pi."""
    tr = float(np.trace(r))
    c = min(1.0, max(-1.0, (tr - 1.0) / 2.0))
    theta = float(np.arccos(c))
    v = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < 1e-7:
        return v / 2.0
    if theta > np.pi - 1e-5:
        # near pi the skew part vanishes; recover axis from the symmetric part
        a = (np.diag(r) - c) / (1.0 - c)
        axis = np.sqrt(np.maximum(a, 0.0))
        # fix signs from the largest component
        i = int(np.argmax(axis))
        if axis[i] > 0:
            for j in range(3):
                if j != i:
                    axis[j] = (r[i, j] + r[j, i]) / (2.0 * (1.0 - c) * axis[i])
        axis /= np.linalg.norm(axis)
        if v @ axis < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * v


def apply_pose_correction(pose: Pose, delta_omega: np.ndarray) -> Pose:
    """Compose each bone rotation with a residual: R(w_i) @ R(dw_i)."""
    delta_omega = np.asarray(delta_omega, dtype=np.float64)
    if delta_omega.shape != pose.rotations.shape:
        raise ValueError(
            f"pose correction shape {delta_omega.shape} != rotations {pose.rotations.shape}"
        )
    out = np.empty_like(pose.rotations)
    for i in range(pose.rotations.shape[0]):
        m = axis_angle_to_matrix(pose.rotations[i]) @ axis_angle_to_matrix(delta_omega[i])
        out[i] = matrix_to_axis_angle(m)
    return Pose(joints=pose.joints.copy(), rotations=out)


def _topo_order(skel: Skeleton) -> list[int]:
    order = []
    pending = list(range(skel.k))
    done = set()
    while pending:
        nxt = []
        for i in pending:
            p = int(skel.parent[i])
            if p < 0 or p in done:
                order.append(i)
                done.add(i)
            else:
                nxt.append(i)
        pending = nxt
    return order


def forward_kinematics(skel: Skeleton, pose: Pose, delta_omega: np.ndarray | None = None):
    """Canonical -> observation rigid transform per bone: x -> R x + t.

    The root bone rotates about its rest joint and translates so that the
    joint lands at pose.joints[root]; children rotate about their own rest
    joints and inherit the parent transform.
    """
    if pose.rotations.shape[0] != skel.k or pose.joints.shape[0] != skel.k:
        raise ValueError(
            f"pose has {pose.rotations.shape[0]} bones, skeleton has {skel.k}"
        )
    rg = np.zeros((skel.k, 3, 3))
    tg = np.zeros((skel.k, 3))
    for i in _topo_order(skel):
        r_loc = axis_angle_to_matrix(pose.rotations[i])
        if delta_omega is not None:
            r_loc = r_loc @ axis_angle_to_matrix(delta_omega[i])
        j = skel.rest_joints[i]
        p = int(skel.parent[i])
        if p < 0:
            rg[i] = r_loc
            tg[i] = pose.joints[i] - r_loc @ j
        else:
            rg[i] = rg[p] @ r_loc
            tg[i] = rg[p] @ (j - r_loc @ j) + tg[p]
    return rg, tg


def bone_transforms(skel: Skeleton, pose: Pose, delta_omega: np.ndarray | None = None) -> BoneTransformSet:
    """Observation -> canonical transforms (inverse forward kinematics)."""
    rg, tg = forward_kinematics(skel, pose, delta_omega)
    rot = np.transpose(rg, (0, 2, 1))
    trans = -np.einsum("kij,kj->ki", rot, tg)
    return BoneTransformSet(rotations=rot, translations=trans)


def posed_joints(skel: Skeleton, root_pos: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Joint positions implied by root position + joint rotations (used by
    the scene generator so poses stay self-consistent)."""
    pose = Pose(joints=np.broadcast_to(root_pos, (skel.k, 3)).copy(), rotations=rotations)
    # temporarily only the root entry matters for FK
    rg, tg = forward_kinematics(skel, pose)
    return np.einsum("kij,kj->ki", rg, skel.rest_joints) + tg


# ---------------------------------------------------------------------------
# differentiable twin of the FK path (gradients w.r.t. the pose residual)


def _skew_t(omega: T.Tensor) -> T.Tensor:
    zero = T.Tensor(np.zeros(1))
    wx, wy, wz = omega[0:1], omega[1:2], omega[2:3]
    rows = T.concat([zero, -wz, wy, wz, zero, -wx, -wy, wx, zero], axis=0)
    return T.reshape(rows, (3, 3))


def axis_angle_to_matrix_t(omega: T.Tensor) -> T.Tensor:
    """Tensor version of axis_angle_to_matrix (same small-angle branch)."""
    theta2 = T.tsum(omega * omega)
    if float(theta2.data) < _SMALL_ANGLE * _SMALL_ANGLE:
        return T.Tensor(np.eye(3)) + _skew_t(omega)
    theta = T.sqrt(theta2)
    axis = omega / theta
    k = _skew_t(axis)
    outer = T.matmul(T.reshape(axis, (3, 1)), T.reshape(axis, (1, 3)))
    c = T.cos(theta)
    s = T.sin(theta)
    return T.Tensor(np.eye(3)) * c + k * s + outer * (1.0 - c)


def bone_transforms_t(skel: Skeleton, pose: Pose, delta_omega: T.Tensor | None = None):
    """Observation -> canonical transforms as tensors.

    delta_omega, when given, is a (K,3) tensor of residual joint angles;
    gradients flow through the Rodrigues map and the kinematic chain.
    Returns lists rot[i] (3,3) and trans[i] (3,).
    """
    if (
        delta_omega is None
        or T.active_tape() is None
        or not delta_omega.requires_grad
    ):
        d = None if delta_omega is None else delta_omega.data
        bt = bone_transforms(skel, pose, d)
        return (
            [T.Tensor(bt.rotations[i]) for i in range(skel.k)],
            [T.Tensor(bt.translations[i]) for i in range(skel.k)],
        )

    rg: list = [None] * skel.k
    tg: list = [None] * skel.k
    for i in _topo_order(skel):
        r_base = T.Tensor(axis_angle_to_matrix(pose.rotations[i]))
        r_loc = T.matmul(r_base, axis_angle_to_matrix_t(delta_omega[i]))
        j = T.Tensor(skel.rest_joints[i])
        p = int(skel.parent[i])
        jc = T.reshape(j, (3, 1))
        if p < 0:
            rg[i] = r_loc
            tg[i] = T.Tensor(pose.joints[i]) - T.reshape(T.matmul(r_loc, jc), (3,))
        else:
            rg[i] = T.matmul(rg[p], r_loc)
            local_t = j - T.reshape(T.matmul(r_loc, jc), (3,))
            tg[i] = T.reshape(T.matmul(rg[p], T.reshape(local_t, (3, 1))), (3,)) + tg[p]
    rot = []
    trans = []
    for i in range(skel.k):
        r_inv = T.transpose2d(rg[i])
        rot.append(r_inv)
        trans.append(-T.reshape(T.matmul(r_inv, T.reshape(tg[i], (3, 1))), (3,)))
    return rot, trans


def _skew_cols_t(v: T.Tensor, n: int) -> T.Tensor:
    """Batched skew matrices from (n,3) vectors, as one (n,3,3) tensor."""
    zero = T.Tensor(np.zeros((n, 1)))
    x, y, z = v[:, 0:1], v[:, 1:2], v[:, 2:3]
    cols = T.concat([zero, -z, y, z, zero, -x, -y, x, zero], axis=1)
    return T.reshape(cols, (n, 3, 3))


def axis_angle_to_matrix_batch_t(omega: T.Tensor) -> T.Tensor:
    """Rodrigues over a batch: (G,3) -> (G,3,3), small-angle rows use the
    first-order I + skew branch selected per row."""
    omega = T.as_tensor(omega)
    g = omega.shape[0]
    theta2 = T.tsum(omega * omega, axis=1)
    small = (theta2.data < _SMALL_ANGLE * _SMALL_ANGLE).astype(np.float64)
    # keep sqrt away from zero on small rows; those rows are masked out below
    theta = T.sqrt(theta2 + T.Tensor(small))
    axis = omega / T.reshape(theta, (g, 1))
    k = _skew_cols_t(axis, g)
    outer = T.bmm(T.reshape(axis, (g, 3, 1)), T.reshape(axis, (g, 1, 3)))
    c3 = T.reshape(T.cos(theta), (g, 1, 1))
    s3 = T.reshape(T.sin(theta), (g, 1, 1))
    eye = T.Tensor(np.eye(3)[None, :, :])
    rod = eye * c3 + k * s3 + outer * (1.0 - c3)
    lin = eye + _skew_cols_t(omega, g)
    m3 = T.Tensor(small[:, None, None])
    return lin * m3 + rod * (1.0 - m3)


def bone_transforms_stack_t(skel: Skeleton, poses: list, delta_rows: T.Tensor | None = None):
    """Observation -> canonical transforms for G poses at once.

    delta_rows, when given, is a (G, K, 3) tensor of residual joint angles
    (rows aligned with poses).  Returns tensors (rot (G,K,3,3), trans (G,K,3)).
    """
    g = len(poses)
    if (
        delta_rows is None
        or T.active_tape() is None
        or not delta_rows.requires_grad
    ):
        rots = np.zeros((g, skel.k, 3, 3))
        trans = np.zeros((g, skel.k, 3))
        for gi, pose in enumerate(poses):
            d = None if delta_rows is None else delta_rows.data[gi]
            bt = bone_transforms(skel, pose, d)
            rots[gi] = bt.rotations
            trans[gi] = bt.translations
        return T.Tensor(rots), T.Tensor(trans)

    base = np.stack([p.rotations for p in poses], axis=0)  # (G,K,3)
    roots = np.stack([p.joints[skel.root] for p in poses], axis=0)  # (G,3)
    rg: list = [None] * skel.k
    tg: list = [None] * skel.k
    for i in _topo_order(skel):
        r_base = T.Tensor(np.stack([axis_angle_to_matrix(base[gi, i]) for gi in range(g)]))
        r_loc = T.bmm(r_base, axis_angle_to_matrix_batch_t(delta_rows[:, i, :]))
        j = skel.rest_joints[i]
        jc = T.Tensor(j.reshape(1, 3, 1))
        p = int(skel.parent[i])
        if p < 0:
            rg[i] = r_loc
            tg[i] = T.Tensor(roots) - T.reshape(T.bmm(r_loc, jc), (g, 3))
        else:
            rg[i] = T.bmm(rg[p], r_loc)
            local_t = T.Tensor(j[None, :]) - T.reshape(T.bmm(r_loc, jc), (g, 3))
            tg[i] = T.reshape(T.bmm(rg[p], T.reshape(local_t, (g, 3, 1))), (g, 3)) + tg[p]
    rot_stack = T.concat([T.reshape(T.mT(rg[i]), (g, 1, 3, 3)) for i in range(skel.k)], axis=1)
    t_inv = [
        -T.reshape(T.bmm(T.mT(rg[i]), T.reshape(tg[i], (g, 3, 1))), (g, 1, 3))
        for i in range(skel.k)
    ]
    return rot_stack, T.concat(t_inv, axis=1)


# ---------------------------------------------------------------------------
# capsule surface sampling


def _perp_frame(un: np.ndarray):
    ref = np.array([1.0, 0.0, 0.0]) if abs(un[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(un, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(un, e1)
    return e1, e2


_GOLDEN = np.pi * (3.0 - np.sqrt(5.0))


def _capsule_points(a: np.ndarray, b: np.ndarray, r: float, n: int) -> np.ndarray:
    """n deterministic points on the capsule surface (spiral parametrization)."""
    u = b - a
    length = float(np.linalg.norm(u))
    un = u / length if length > 1e-12 else np.array([0.0, 0.0, 1.0])
    e1, e2 = _perp_frame(un)
    pts = np.empty((n, 3))
    for s in range(n):
        h = -r + (s + 0.5) / n * (length + 2.0 * r)
        phi = s * _GOLDEN
        if h < 0.0:
            rho = np.sqrt(max(r * r - h * h, 0.0))
            center = a + h * un
        elif h > length:
            d = h - length
            rho = np.sqrt(max(r * r - d * d, 0.0))
            center = a + h * un
        else:
            rho = r
            center = a + h * un
        pts[s] = center + rho * (np.cos(phi) * e1 + np.sin(phi) * e2)
    return pts


def generate_surface(skel: Skeleton, pose: Pose, n_per_bone: int,
                     delta_omega: np.ndarray | None = None) -> SurfaceVertices:
    """Deterministic capsule-surface vertices in the given pose.

    Vertex order is bone-major with a fixed per-bone parametrization, so
    vertex i corresponds to the same body point across poses.
    """
    if n_per_bone < 1:
        raise ValueError("n_per_bone must be >= 1")
    rg, tg = forward_kinematics(skel, pose, delta_omega)
    canonical_tpose = np.allclose(rg, np.eye(3), atol=0.0) and np.allclose(tg, 0.0, atol=0.0)
    pts = []
    bones = []
    for i in range(skel.k):
        local = _capsule_points(skel.rest_joints[i], skel.bone_tips[i], float(skel.bone_radii[i]), n_per_bone)
        if not canonical_tpose:
            local = local @ rg[i].T + tg[i]
        pts.append(local)
        bones.append(np.full(n_per_bone, i, dtype=np.int64))
    space = "canonical" if canonical_tpose else "observation"
    return SurfaceVertices(positions=np.concatenate(pts, axis=0), space=space,
                           bone_ids=np.concatenate(bones))


def tpose(skel: Skeleton) -> Pose:
    return Pose(joints=skel.rest_joints.copy(), rotations=np.zeros((skel.k, 3)))


def canonical_bounds(skel: Skeleton, dilation_radii: float = 2.0):
    """Axis-aligned box around the canonical capsules, dilated by
    dilation_radii * max(bone radius) on every side."""
    lo = np.minimum(skel.rest_joints, skel.bone_tips).min(axis=0) - skel.bone_radii.max()
    hi = np.maximum(skel.rest_joints, skel.bone_tips).max(axis=0) + skel.bone_radii.max()
    pad = dilation_radii * float(skel.bone_radii.max())
    return lo - pad, hi + pad


def scene_bounds(skel: Skeleton, pose: Pose, margin_radii: float = 1.0):
    """Axis-aligned box around the posed capsules (observation space)."""
    rg, tg = forward_kinematics(skel, pose)
    joints = np.einsum("kij,kj->ki", rg, skel.rest_joints) + tg
    tips = np.einsum("kij,kj->ki", rg, skel.bone_tips) + tg
    r = skel.bone_radii[:, None]
    lo = np.minimum(joints - r, tips - r).min(axis=0)
    hi = np.maximum(joints + r, tips + r).max(axis=0)
    pad = margin_radii * float(skel.bone_radii.max())
    return lo - pad, hi + pad


def humanoid4() -> Skeleton:
    """Default desk-scale body: torso, head, one arm, one leg."""
    return Skeleton(
        parent=np.array([-1, 0, 0, 0]),
        rest_joints=np.array(
            [
                [0.0, 0.0, 0.0],  # torso base (pelvis)
                [0.0, 0.55, 0.0],  # head base (neck)
                [0.0, 0.48, 0.0],  # shoulder
                [0.0, 0.0, 0.0],  # hip
            ]
        ),
        bone_tips=np.array(
            [
                [0.0, 0.55, 0.0],
                [0.0, 0.80, 0.0],
                [0.42, 0.48, 0.0],
                [0.0, -0.60, 0.0],
            ]
        ),
        bone_radii=np.array([0.14, 0.10, 0.055, 0.075]),
    )


def subdivided_humanoid(k: int) -> Skeleton:
    """Humanoid with each capsule split into segments until K bones (K <= 24)."""
    base = humanoid4()
    if k == 4:
        return base
    if not 4 <= k <= 24:
        raise ValueError("supported bone counts: 4..24")
    per = [1, 1, 1, 1]
    i = 0
    while sum(per) < k:
        per[i % 4] += 1
        i += 1
    parent, joints, tips, radii = [], [], [], []
    base_index = {}
    for b in range(4):
        a = base.rest_joints[b]
        t = base.bone_tips[b]
        n = per[b]
        for s in range(n):
            lo = a + (t - a) * (s / n)
            hi = a + (t - a) * ((s + 1) / n)
            if s == 0:
                parent.append(-1 if base.parent[b] < 0 else base_index[int(base.parent[b])])
                base_index[b] = len(parent) - 1
            else:
                parent.append(len(parent) - 1)
            joints.append(lo)
            tips.append(hi)
            radii.append(base.bone_radii[b])
    return Skeleton(
        parent=np.array(parent),
        rest_joints=np.array(joints),
        bone_tips=np.array(tips),
        bone_radii=np.array(radii),
    )
