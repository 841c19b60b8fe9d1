"""Ray generation, stratified sampling, and volume rendering.

Color, alpha and semantic logits integrate along each ray with one shared
set of compositing weights T_i * alpha_i (front to back), so whatever the
color channel sees, the label channel sees at the same depths.  Class
probabilities are the softmax of the *integrated* logits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .bodymodel import Pose, bone_transforms_stack_t, scene_bounds
from .canonicalfield import semantic_distribution
from .errors import ValidationError
from .motionfield import skeletal_warp_gathered
from .params import FieldParams


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3,3) world -> camera
    translation: np.ndarray  # (3,)
    cam_id: str = "cam"
    heldout: bool = False

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError(f"camera {self.cam_id}: focal lengths must be positive")

    @property
    def origin(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation.T @ np.array([0.0, 0.0, 1.0])

    def pixel_rays(self, uv: np.ndarray):
        """World-space rays through pixel coordinates uv (R,2)."""
        uv = np.asarray(uv, dtype=np.float64)
        d_cam = np.stack(
            [
                (uv[:, 0] - self.cx) / self.fx,
                (uv[:, 1] - self.cy) / self.fy,
                np.ones(uv.shape[0]),
            ],
            axis=1,
        )
        d_world = d_cam @ self.rotation  # == rotation.T applied to rows
        d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
        origins = np.broadcast_to(self.origin, d_world.shape).copy()
        return origins, d_world

    def project(self, points: np.ndarray):
        """Project world points: returns (uv (N,2), depth (N,), in_front (N,))."""
        pc = points @ self.rotation.T + self.translation
        in_front = pc[:, 2] > 1e-9
        z = np.where(in_front, pc[:, 2], 1.0)
        u = self.fx * pc[:, 0] / z + self.cx
        v = self.fy * pc[:, 1] / z + self.cy
        depth = np.linalg.norm(points - self.origin, axis=1)
        return np.stack([u, v], axis=1), depth, in_front


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    hit: bool = True  # False when the ray misses the scene box


def ray_box_intersect(origins, dirs, lo, hi):
    """Slab test; returns (near, far, hit) with near clamped to 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t0 = (lo[None, :] - origins) * inv
    t1 = (hi[None, :] - origins) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # parallel rays: ignore that axis unless outside the slab
    par = np.abs(dirs) < 1e-12
    inside_slab = (origins >= lo[None, :]) & (origins <= hi[None, :])
    tmin = np.where(par, np.where(inside_slab, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside_slab, np.inf, -np.inf), tmax)
    near = np.maximum(tmin.max(axis=1), 0.0)
    far = tmax.min(axis=1)
    hit = far > near
    near = np.where(hit, near, 0.0)
    far = np.where(hit, far, 0.0)
    return near, far, hit


def generate_rays(cam: Camera, pixels, bounds) -> list[Ray]:
    """Pinhole back-projection for explicit pixel coordinates.

    near/far come from intersecting the scene box; rays that miss it are
    returned with near = far = 0 and hit = False, which renders to an
    exact zero-alpha pixel.
    """
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    bad = (
        (uv[:, 0] < 0)
        | (uv[:, 0] >= cam.width)
        | (uv[:, 1] < 0)
        | (uv[:, 1] >= cam.height)
    )
    if np.any(bad):
        u, v = uv[bad][0]
        raise ValidationError(
            f"camera {cam.cam_id}: pixel ({u:g}, {v:g}) outside {cam.width}x{cam.height}"
        )
    origins, dirs = cam.pixel_rays(uv)
    lo, hi = bounds
    near, far, hit = ray_box_intersect(origins, dirs, np.asarray(lo), np.asarray(hi))
    return [
        Ray(origins[i], dirs[i], float(near[i]), float(far[i]), bool(hit[i]))
        for i in range(uv.shape[0])
    ]


def sample_ray(ray: Ray, d_samples: int, stratified: bool = False, seed: int = 0):
    """Bin the ray span into d_samples equal bins; deterministic midpoints
    or seeded per-bin uniform jitter.  Returns (t (D,), dt (D,))."""
    if d_samples < 2:
        raise ValidationError(f"d_samples must be >= 2, got {d_samples}")
    width = (ray.far - ray.near) / d_samples
    if stratified:
        rng = np.random.default_rng(np.random.SeedSequence([seed]))
        offs = rng.random(d_samples)
    else:
        offs = np.full(d_samples, 0.5)
    t = ray.near + (np.arange(d_samples) + offs) * width
    dt = np.full(d_samples, width)
    return t, dt


def _sample_positions(origins, dirs, near, far, d_samples, jitter=None):
    r = origins.shape[0]
    width = (far - near) / d_samples  # (R,)
    offs = jitter if jitter is not None else np.full((r, d_samples), 0.5)
    t = near[:, None] + (np.arange(d_samples)[None, :] + offs) * width[:, None]
    pos = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    dt = np.broadcast_to(width[:, None], (r, d_samples)).copy()
    return pos, dt


def composite(alpha: T.Tensor, colors: T.Tensor, logits: T.Tensor):
    """Front-to-back compositing with one weight set shared by all three.

    alpha (R,D), colors (R,D,3), logits (R,D,L) ->
    (color (R,3), acc_alpha (R,), acc_logits (R,L)).
    """
    r, d = alpha.shape
    trans = T.exclusive_cumprod(1.0 - alpha, axis=1)
    w = trans * alpha
    w3 = T.reshape(w, (r, d, 1))
    color = T.tsum(w3 * colors, axis=1)
    acc = T.tsum(w, axis=1)
    sem = T.tsum(w3 * logits, axis=1)
    return color, acc, sem


def render_mixed(
    origins: np.ndarray,
    dirs: np.ndarray,
    near: np.ndarray,
    far: np.ndarray,
    groups: list,
    params: FieldParams,
    d_samples: int,
    jitter: np.ndarray | None = None,
    nonrigid_enabled: bool = True,
    transforms=None,
):
    """Differentiable render of a ray batch whose rays may come from
    different frames.

    groups is a list of (pose, frame_index, start, stop) covering the ray
    rows in order.  Bone transforms are stacked per group (pass
    `transforms` = (rot (G,K,3,3), trans (G,K,3)) tensors to share them
    with other loss terms); the warp gathers per-sample transforms, and
    the non-rigid net and canonical field run once over the concatenated
    samples, which keeps the matmuls large.  Returns tensors
    (color (R,3), alpha (R,), logits (R,L)).  Rays with near == far
    (scene-box misses) produce exact zeros: their dt is 0, so every sample
    alpha is fg * (1 - e^0) = 0.
    """
    r = origins.shape[0]
    pos, dt = _sample_positions(origins, dirs, near, far, d_samples, jitter)
    probs = params.vol.softmaxed()
    if transforms is None:
        poses = [grp[0] for grp in groups]
        delta_rows = None
        if params.pose_delta is not None and all(grp[1] is not None for grp in groups):
            delta_rows = params.pose_delta[np.array([grp[1] for grp in groups])]
        transforms = bone_transforms_stack_t(params.skel, poses, delta_rows)
    rot_stack, t_stack = transforms
    ray_gidx = np.empty(r, dtype=np.int64)
    for ordinal, (_, _, start, stop) in enumerate(groups):
        ray_gidx[start:stop] = ordinal
    gidx = np.repeat(ray_gidx, d_samples)
    flat = T.Tensor(pos.reshape(-1, 3))
    x_skel, fg, _ = skeletal_warp_gathered(flat, rot_stack, t_stack, gidx, params.vol, probs=probs)
    if nonrigid_enabled and params.nonrigid is not None:
        conds = np.concatenate(
            [
                np.broadcast_to(
                    pose.rotations.ravel(),
                    ((stop - start) * d_samples, params.nonrigid.pose_dim),
                )
                for pose, _, start, stop in groups
            ],
            axis=0,
        )
        live = (fg.data > 0.0).astype(np.float64)
        dx = params.nonrigid.offsets_cond(x_skel, conds)
        x_c = x_skel + dx * T.Tensor(live[:, None])
    else:
        x_c = x_skel
    color, density, logits = params.canon.query(x_c)
    am = fg * (1.0 - T.exp(-(density[:, 0] * T.Tensor(dt.reshape(-1)))))
    alpha = T.reshape(am, (r, d_samples))
    colors = T.reshape(color, (r, d_samples, 3))
    logits_r = T.reshape(logits, (r, d_samples, params.num_classes))
    return composite(alpha, colors, logits_r)


def render_batch(
    origins: np.ndarray,
    dirs: np.ndarray,
    near: np.ndarray,
    far: np.ndarray,
    pose: Pose,
    params: FieldParams,
    d_samples: int,
    frame_index: int | None = None,
    jitter: np.ndarray | None = None,
    nonrigid_enabled: bool = True,
):
    """Single-pose render of a ray batch; see render_mixed."""
    return render_mixed(
        origins,
        dirs,
        near,
        far,
        [(pose, frame_index, 0, origins.shape[0])],
        params,
        d_samples,
        jitter=jitter,
        nonrigid_enabled=nonrigid_enabled,
    )


@dataclass
class RenderedPixel:
    color: np.ndarray  # (3,)
    alpha: float
    logits: np.ndarray  # (L,)
    probs: np.ndarray  # (L,) softmax of integrated logits


def render_ray(
    ray: Ray,
    pose: Pose,
    params: FieldParams,
    d_samples: int = 128,
    frame_index: int | None = None,
    nonrigid_enabled: bool = True,
) -> RenderedPixel:
    with T.deterministic_rows():
        color, acc, sem = render_batch(
            ray.origin[None, :],
            ray.direction[None, :],
            np.array([ray.near]),
            np.array([ray.far]),
            pose,
            params,
            d_samples,
            frame_index=frame_index,
            nonrigid_enabled=nonrigid_enabled,
        )
    logits = sem.data[0]
    return RenderedPixel(
        color=color.data[0],
        alpha=float(acc.data[0]),
        logits=logits,
        probs=semantic_distribution(logits),
    )


def render_image(
    cam: Camera,
    pose: Pose,
    params: FieldParams,
    d_samples: int = 128,
    chunk: int = 4096,
    stratified: bool = False,
    seed: int = 0,
    frame_index: int | None = None,
    nonrigid_enabled: bool = True,
    bounds=None,
):
    """Full-frame render: (rgb (H,W,3), alpha (H,W), labels (H,W), probs (H,W,L)).

    Chunking is pure bookkeeping: per-pixel jitter is drawn for the whole
    frame up front, so any chunk size gives bit-identical images.
    """
    h, w = cam.height, cam.width
    if bounds is None:
        bounds = scene_bounds(params.skel, pose)
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
    origins, dirs = cam.pixel_rays(uv)
    near, far, _ = ray_box_intersect(origins, dirs, np.asarray(bounds[0]), np.asarray(bounds[1]))
    n = uv.shape[0]
    jitter_all = (
        np.random.default_rng(np.random.SeedSequence([seed])).random((n, d_samples))
        if stratified
        else None
    )
    rgb = np.zeros((n, 3))
    acc = np.zeros(n)
    logits = np.zeros((n, params.num_classes))
    with T.deterministic_rows():
        for start in range(0, n, chunk):
            sl = slice(start, min(start + chunk, n))
            jit = jitter_all[sl] if jitter_all is not None else None
            c, a, s = render_batch(
                origins[sl],
                dirs[sl],
                near[sl],
                far[sl],
                pose,
                params,
                d_samples,
                frame_index=frame_index,
                jitter=jit,
                nonrigid_enabled=nonrigid_enabled,
            )
            rgb[sl] = c.data
            acc[sl] = a.data
            logits[sl] = s.data
    probs = semantic_distribution(logits)
    labels = np.argmax(probs, axis=1)
    return (
        rgb.reshape(h, w, 3),
        acc.reshape(h, w),
        labels.reshape(h, w).astype(np.int64),
        probs.reshape(h, w, params.num_classes),
    )
