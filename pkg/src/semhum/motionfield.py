"""Observation -> canonical motion field.

Decomposition: a skeletal rigid warp blending per-bone candidate positions
with weights read from a canonical-space volume grid, plus an additive
non-rigid MLP offset.  The grid stores raw logits with K bone channels and
one background channel (last); per-voxel weights are the channel softmax.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .bodymodel import BoneTransformSet, Pose, Skeleton, bone_transforms_t, canonical_bounds
from .canonicalfield import PositionalEncoding, encode

EPS_W = 1e-6  # blend-denominator cutoff: below this a point is background


class WeightVolume:
    """Trainable (K+1, nx, ny, nz) logit grid over a canonical-space box."""

    def __init__(self, logits: T.Tensor, bbox_lo, bbox_hi):
        self.logits = logits if isinstance(logits, T.Tensor) else T.Tensor(logits, requires_grad=True)
        self.bbox_lo = np.asarray(bbox_lo, dtype=np.float64)
        self.bbox_hi = np.asarray(bbox_hi, dtype=np.float64)

    @property
    def num_bones(self) -> int:
        return self.logits.shape[0] - 1

    @property
    def resolution(self):
        return self.logits.shape[1:]

    @property
    def origin(self) -> np.ndarray:
        return self.bbox_lo

    @property
    def step(self) -> np.ndarray:
        dims = np.array(self.resolution, dtype=np.float64)
        return (self.bbox_hi - self.bbox_lo) / (dims - 1.0)

    def named_tensors(self) -> dict:
        return {"weightvol.logits": self.logits}

    def softmaxed(self) -> T.Tensor:
        return T.softmax(self.logits, axis=0)


def _segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    u = b - a
    length2 = float(u @ u)
    if length2 < 1e-24:
        return np.linalg.norm(points - a, axis=1)
    s = np.clip((points - a) @ u / length2, 0.0, 1.0)
    nearest = a[None, :] + s[:, None] * u[None, :]
    return np.linalg.norm(points - nearest, axis=1)


def init_weight_volume(
    skel: Skeleton,
    resolution: int = 32,
    bg_logit: float = 2.0,
    bone_floor: float = -4.0,
    bone_peak: float = 8.0,
) -> WeightVolume:
    """Geometric prior: a Gaussian bump (sigma = bone radius) around every
    canonical capsule, on a low floor, plus a constant background logit."""
    lo, hi = canonical_bounds(skel)
    n = resolution
    axes = [np.linspace(lo[d], hi[d], n) for d in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    logits = np.empty((skel.k + 1, n, n, n))
    for i in range(skel.k):
        d = _segment_distances(nodes, skel.rest_joints[i], skel.bone_tips[i])
        sigma = float(skel.bone_radii[i])
        logits[i] = (bone_floor + bone_peak * np.exp(-(d**2) / (2.0 * sigma**2))).reshape(n, n, n)
    logits[skel.k] = bg_logit
    return WeightVolume(T.Tensor(logits, requires_grad=True), lo, hi)


def _inside_box(vol: WeightVolume, pts: np.ndarray) -> np.ndarray:
    # same lattice test as the trilinear kernels
    dims = np.array(vol.resolution, dtype=np.float64)
    g = (pts - vol.origin[None, :]) / vol.step[None, :]
    return np.all((g >= 0.0) & (g <= dims[None, :] - 1.0), axis=1)


def sample_canonical_weights(vol: WeightVolume, pts, probs: T.Tensor | None = None) -> T.Tensor:
    """Softmaxed channel weights trilinearly interpolated at (M,3) points.

    Outside the grid the result is the background one-hot (bones 0,
    background 1).  Differentiable w.r.t. the logits and the points.
    """
    pts_t = T.as_tensor(np.atleast_2d(np.asarray(pts, dtype=np.float64))) if not isinstance(pts, T.Tensor) else pts
    if probs is None:
        probs = vol.softmaxed()
    interp = T.trilinear(probs, pts_t, vol.origin, vol.step)
    outside = ~_inside_box(vol, pts_t.data)
    if np.any(outside):
        onehot = np.zeros((pts_t.shape[0], vol.num_bones + 1))
        onehot[outside, vol.num_bones] = 1.0
        interp = interp + T.Tensor(onehot)
    return interp


def _blend(x: T.Tensor, ys: list, ws: list, m: int):
    """Normalized blend of candidates, in delta form.

    x + sum_i (w_i/D)(y_i - x) equals the direct weighted sum whenever the
    weights are normalized, but keeps the fixpoint exact: identity bone
    transforms give y_i == x bitwise, hence x_skel == x.  Points whose
    weight sum D is <= EPS_W are background: passed through with fg = 0.
    """
    d = ws[0]
    for i in range(1, len(ws)):
        d = d + ws[i]
    inside = (d.data > EPS_W).astype(np.float64)
    denom = d * inside + (1.0 - inside)
    if len(ws) == 1:
        # degenerate sum: the normalized weight is identically 1, so the
        # blend IS the single candidate (keeps y = R x + t bit-exact)
        ins = T.Tensor(inside[:, None])
        x_skel = ys[0] * ins + x * (1.0 - ins)
    else:
        shift = None
        for i in range(len(ws)):
            term = T.reshape(ws[i] / denom, (m, 1)) * (ys[i] - x)
            shift = term if shift is None else shift + term
        x_skel = x + shift * T.Tensor(inside[:, None])
    fg = T.clamp(d, 0.0, 1.0) * T.Tensor(inside)
    return x_skel, fg, d


def skeletal_warp_batch(
    x: T.Tensor,
    rots: list,
    trans: list,
    vol: WeightVolume,
    probs: T.Tensor | None = None,
):
    """Blend per-bone rigid candidates y_i = R_i x + t_i with canonical
    weights w_i read at y_i, normalized by their sum (see _blend).
    Returns (x_skel (M,3), fg (M,), d (M,))."""
    k = vol.num_bones
    m = x.shape[0]
    if probs is None:
        probs = vol.softmaxed()
    ys = []
    ws = []
    for i in range(k):
        y = T.matmul(x, T.transpose2d(rots[i])) + trans[i]
        wfull = T.trilinear(probs, y, vol.origin, vol.step)
        ys.append(y)
        ws.append(wfull[:, i])
    return _blend(x, ys, ws, m)


def skeletal_warp_gathered(
    x: T.Tensor,
    rot_stack: T.Tensor,
    t_stack: T.Tensor,
    gidx: np.ndarray,
    vol: WeightVolume,
    probs: T.Tensor | None = None,
):
    """Warp a batch of points whose rows belong to different poses.

    rot_stack (G,K,3,3) / t_stack (G,K,3) hold per-pose bone transforms;
    gidx (M,) maps each point to its pose row.  Single-pose batches skip
    the per-point transform gather."""
    k = vol.num_bones
    m = x.shape[0]
    single = rot_stack.shape[0] == 1
    if probs is None:
        probs = vol.softmaxed()
    x3 = None if single else T.reshape(x, (m, 3, 1))
    ys = []
    ws = []
    for i in range(k):
        if single:
            y = T.matmul(x, T.transpose2d(rot_stack[0, i])) + t_stack[0, i]
        else:
            rs = rot_stack[gidx, i]
            ts = t_stack[gidx, i]
            y = T.reshape(T.bmm(rs, x3), (m, 3)) + ts
        wfull = T.trilinear(probs, y, vol.origin, vol.step)
        ys.append(y)
        ws.append(wfull[:, i])
    return _blend(x, ys, ws, m)


def skeletal_warp(x_o, bones: BoneTransformSet, vol: WeightVolume):
    """Single-point warp: returns (x_skel (3,), fg float)."""
    x = T.Tensor(np.asarray(x_o, dtype=np.float64).reshape(1, 3))
    rots = [T.Tensor(bones.rotations[i]) for i in range(bones.rotations.shape[0])]
    trans = [T.Tensor(bones.translations[i]) for i in range(bones.translations.shape[0])]
    x_skel, fg, _ = skeletal_warp_batch(x, rots, trans, vol)
    return x_skel.data[0], float(fg.data[0])


class NonRigidNet:
    """MLP offset head: positional-encoded warped point + flattened joint
    rotations -> 3-vector correction.  The final layer starts at zero so
    the net begins as the identity refinement."""

    def __init__(
        self,
        num_bones: int,
        width: int = 64,
        depth: int = 4,
        pe: PositionalEncoding | None = None,
        rng: np.random.Generator | None = None,
    ):
        if rng is None:
            rng = np.random.default_rng(1)
        self.pe = pe if pe is not None else PositionalEncoding()
        self.pose_dim = 3 * num_bones
        dims = [self.pe.out_dim + self.pose_dim] + [width] * (depth - 1) + [3]
        self.layers = []
        for i in range(depth):
            fan_in, fan_out = dims[i], dims[i + 1]
            if i == depth - 1:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.layers.append(
                (
                    T.Tensor(w, requires_grad=True),
                    T.Tensor(np.zeros(fan_out), requires_grad=True),
                )
            )

    def named_tensors(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"nonrigid.layer{i}.w"] = w
            out[f"nonrigid.layer{i}.b"] = b
        return out

    def offsets_cond(self, x_skel: T.Tensor, cond: np.ndarray) -> T.Tensor:
        """Offsets with an explicit (M, pose_dim) conditioning matrix (rows
        may mix frames)."""
        h = T.concat([encode(x_skel, self.pe), T.Tensor(cond)], axis=1)
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = T.matmul(h, w) + b
            if i < last:
                h = T.relu(h)
        return h

    def offsets(self, x_skel: T.Tensor, rotations: np.ndarray) -> T.Tensor:
        m = x_skel.shape[0]
        cond = np.broadcast_to(
            np.asarray(rotations, dtype=np.float64).ravel(), (m, self.pose_dim)
        )
        return self.offsets_cond(x_skel, cond)


def nonrigid_offset(net: NonRigidNet, x_skel, pose: Pose) -> np.ndarray:
    """Single-point offset (contract wrapper around the batched net)."""
    x = T.Tensor(np.asarray(x_skel, dtype=np.float64).reshape(1, 3))
    return net.offsets(x, pose.rotations).data[0]


class MotionParams:
    """Everything the warp needs for one frame."""

    def __init__(
        self,
        skel: Skeleton,
        vol: WeightVolume,
        nonrigid: NonRigidNet | None = None,
        delta_omega: T.Tensor | None = None,
    ):
        self.skel = skel
        self.vol = vol
        self.nonrigid = nonrigid
        self.delta_omega = delta_omega


def warp_points(
    x: T.Tensor,
    pose: Pose,
    mp: MotionParams,
    nonrigid_enabled: bool = True,
    probs: T.Tensor | None = None,
):
    """Full observation->canonical warp for a batch of points.

    Pose correction (when mp.delta_omega is set) enters through the bone
    transforms; the non-rigid offset is added only where fg > 0.
    Returns (x_c (M,3), fg (M,)).
    """
    rots, trans = bone_transforms_t(mp.skel, pose, mp.delta_omega)
    x_skel, fg, _ = skeletal_warp_batch(x, rots, trans, mp.vol, probs=probs)
    if nonrigid_enabled and mp.nonrigid is not None:
        live = (fg.data > 0.0).astype(np.float64)
        dx = mp.nonrigid.offsets(x_skel, pose.rotations)
        x_c = x_skel + dx * T.Tensor(live[:, None])
    else:
        x_c = x_skel
    return x_c, fg


def warp_to_canonical(x_o, pose: Pose, mp: MotionParams, nonrigid_enabled: bool = True):
    """Single-point contract wrapper: returns (x_c (3,), fg float)."""
    x = T.Tensor(np.asarray(x_o, dtype=np.float64).reshape(1, 3))
    x_c, fg = warp_points(x, pose, mp, nonrigid_enabled=nonrigid_enabled)
    return x_c.data[0], float(fg.data[0])
