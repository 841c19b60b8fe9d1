"""Optimization loop.

Schedule: the parsing term is weighted zero until parsing_delay_iters so
the motion field forms under photometric supervision alone (while gated,
the parsing value is computed off-tape purely for logging, so label
content cannot perturb the parameter trajectory); the non-rigid offset
stage stays disabled until nonrigid_enable_iter.  Everything is seeded:
two runs with the same seed produce bit-identical logs and checkpoints.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .bodymodel import bone_transforms_stack_t, generate_surface, scene_bounds, tpose
from .errors import NumericalAbort, ValidationError
from .losses import (
    LossReport,
    LossWeights,
    mse_loss,
    parsing_loss,
    parsing_loss_value,
    perceptual_term,
    silhouette_loss,
    surface_loss_gathered,
    total_loss,
)
from .params import FieldParams
from .renderer import ray_box_intersect, render_mixed
from .scenedata import Dataset

MASK_BBOX_DILATION_PX = 16


@dataclass
class TrainConfig:
    iterations: int = 5000
    rays_per_batch: int = 1024
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    parsing_delay_iters: int = 1500
    nonrigid_enable_iter: int = 1000
    eval_every: int = 1000
    d_samples: int = 64
    surface_samples_per_bone: int = 16
    volume_resolution: int = 32
    use_nonrigid: bool = True

    def __post_init__(self):
        if self.iterations > 0 and not self.parsing_delay_iters < self.iterations:
            raise ValidationError(
                f"parsing_delay_iters ({self.parsing_delay_iters}) must be < "
                f"iterations ({self.iterations})"
            )

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            with open(path) as fh:
                obj = json.load(fh)
        except FileNotFoundError:
            raise ValidationError(f"{path}: train config not found") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON: {exc}") from None
        known = {f for f in cls.__dataclass_fields__}
        bad = set(obj) - known
        if bad:
            raise ValidationError(f"{path}: unknown config fields {sorted(bad)}")
        return cls(**obj)


@dataclass
class RayBatch:
    origins: np.ndarray  # (n,3)
    dirs: np.ndarray  # (n,3)
    near: np.ndarray  # (n,)
    far: np.ndarray  # (n,)
    rgb: np.ndarray  # (n,3)
    mask: np.ndarray  # (n,)
    labels: np.ndarray  # (n,) 0 where unlabeled
    has_label: np.ndarray  # (n,) bool
    frame_idx: np.ndarray  # (n,)
    uv: np.ndarray  # (n,2) pixel coordinates drawn
    groups: list = field(default_factory=list)  # (FrameRecord, start, stop)


def _mask_bbox(mask: np.ndarray, dilation: int):
    ys, xs = np.nonzero(mask)
    h, w = mask.shape
    if ys.size == 0:
        return 0, h, 0, w
    y0 = max(int(ys.min()) - dilation, 0)
    y1 = min(int(ys.max()) + dilation + 1, h)
    x0 = max(int(xs.min()) - dilation, 0)
    x1 = min(int(xs.max()) + dilation + 1, w)
    return y0, y1, x0, x1


def sample_ray_batch(dataset: Dataset, n: int, seed: int, iteration: int) -> RayBatch:
    """Uniform over (frame, pixel) pairs inside each frame's dilated mask
    bounding box; deterministic for a given (seed, iteration).  Rows come
    back grouped by frame (ascending) for single-pass rendering."""
    if not dataset.frames:
        raise ValidationError("cannot sample rays from an empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence([seed, iteration, 0]))
    boxes = [_mask_bbox(rec.mask, MASK_BBOX_DILATION_PX) for rec in dataset.frames]
    counts = np.array([(y1 - y0) * (x1 - x0) for y0, y1, x0, x1 in boxes], dtype=np.int64)
    cum = np.concatenate([[0], np.cumsum(counts)])
    draws = np.sort(rng.integers(0, cum[-1], size=n))
    f_idx = np.searchsorted(cum, draws, side="right") - 1
    local = draws - cum[f_idx]

    origins = np.zeros((n, 3))
    dirs = np.zeros((n, 3))
    near = np.zeros(n)
    far = np.zeros(n)
    rgb = np.zeros((n, 3))
    mask = np.zeros(n)
    labels = np.zeros(n, dtype=np.int64)
    has_label = np.zeros(n, dtype=bool)
    uv = np.zeros((n, 2))
    groups = []
    for fi in np.unique(f_idx):
        sel = np.nonzero(f_idx == fi)[0]
        rec = dataset.frames[int(fi)]
        y0, y1, x0, x1 = boxes[int(fi)]
        bw = x1 - x0
        vv = y0 + local[sel] // bw
        uu = x0 + local[sel] % bw
        uv[sel, 0] = uu
        uv[sel, 1] = vv
        cam = dataset.cameras[rec.camera_id]
        o, d = cam.pixel_rays(uv[sel])
        lo, hi = scene_bounds(dataset.scene.skeleton, rec.pose)
        nr, fr, _ = ray_box_intersect(o, d, lo, hi)
        origins[sel] = o
        dirs[sel] = d
        near[sel] = nr
        far[sel] = fr
        rgb[sel] = rec.rgb[vv, uu]
        mask[sel] = rec.mask[vv, uu]
        if rec.has_labels:
            labels[sel] = rec.labels[vv, uu]
            has_label[sel] = True
        groups.append((rec, int(sel[0]), int(sel[-1]) + 1))
    return RayBatch(
        origins, dirs, near, far, rgb, mask, labels, has_label,
        f_idx.astype(np.int64), uv, groups,
    )


class AdamState:
    """Per-tensor first/second moments plus the shared step counter."""

    def __init__(self):
        self.m: dict = {}
        self.v: dict = {}
        self.t: int = 0


def adam_step(named: dict, state: AdamState, cfg: TrainConfig) -> None:
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    for name in sorted(named):
        p = named[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def _check_finite(name: str, value: float, iteration: int) -> None:
    if not np.isfinite(value):
        raise NumericalAbort(
            f"non-finite loss term '{name}' ({value}) at iteration {iteration}"
        )


def compute_terms(
    params: FieldParams,
    batch: RayBatch,
    cfg: TrainConfig,
    nonrigid_on: bool,
    parsing_open: bool,
    jitter: np.ndarray,
    include_perceptual: bool = False,
):
    """Forward pass for one batch: loss-term tensors (unweighted) plus the
    off-tape parsing value when the parsing term is gated.  Bone transforms
    are stacked once and shared between the render and the surface term."""
    canon_verts = generate_surface(params.skel, tpose(params.skel), cfg.surface_samples_per_bone)
    groups = [(rec.pose, rec.index, start, stop) for rec, start, stop in batch.groups]
    delta_rows = None
    if params.pose_delta is not None:
        delta_rows = params.pose_delta[np.array([rec.index for rec, _, _ in batch.groups])]
    transforms = bone_transforms_stack_t(params.skel, [g[0] for g in groups], delta_rows)
    color, alpha, logits = render_mixed(
        batch.origins,
        batch.dirs,
        batch.near,
        batch.far,
        groups,
        params,
        cfg.d_samples,
        jitter=jitter,
        nonrigid_enabled=nonrigid_on,
        transforms=transforms,
    )

    terms = {
        "mse": mse_loss(color, batch.rgb),
        "silhouette": silhouette_loss(alpha, batch.mask),
    }
    n_verts = params.skel.k * cfg.surface_samples_per_bone
    v_obs_all = np.concatenate(
        [
            generate_surface(params.skel, rec.pose, cfg.surface_samples_per_bone).positions
            for rec, _, _ in batch.groups
        ],
        axis=0,
    )
    terms["surface"] = surface_loss_gathered(
        v_obs_all,
        np.repeat(np.arange(len(batch.groups)), n_verts),
        transforms[0],
        transforms[1],
        params.vol,
        np.tile(canon_verts.positions, (len(batch.groups), 1)),
    )
    if include_perceptual:
        terms["perceptual"] = perceptual_term(color, batch.rgb)
    if parsing_open:
        terms["parsing"] = parsing_loss(logits, batch.labels, batch.has_label)
        parsing_value = float(terms["parsing"].data)
    else:
        # gated: report-only, off the tape
        parsing_value = parsing_loss_value(logits.data, batch.labels, batch.has_label)
    return terms, parsing_value


def train_step(
    params: FieldParams,
    batch: RayBatch,
    weights: LossWeights,
    cfg: TrainConfig,
    iteration: int,
    opt: AdamState,
) -> LossReport:
    """One optimization step: render the batch, weight the losses under the
    schedule, backprop, Adam update, zero grads."""
    parsing_open = iteration >= cfg.parsing_delay_iters
    nonrigid_on = cfg.use_nonrigid and iteration >= cfg.nonrigid_enable_iter
    eff = replace(weights, parsing=weights.parsing if parsing_open else 0.0)
    jitter = np.random.default_rng(
        np.random.SeedSequence([cfg.seed, iteration, 1])
    ).random((batch.origins.shape[0], cfg.d_samples))

    with T.Tape() as tape:
        terms, parsing_value = compute_terms(
            params,
            batch,
            cfg,
            nonrigid_on,
            parsing_open,
            jitter,
            include_perceptual=eff.perceptual > 0.0,
        )
        total = total_loss(terms, eff)

        report = LossReport(
            iteration=iteration,
            mse=float(terms["mse"].data),
            silhouette=float(terms["silhouette"].data),
            surface=float(terms["surface"].data),
            parsing=parsing_value,
            perceptual=float(terms["perceptual"].data) if "perceptual" in terms else 0.0,
            total=float(total.data),
            applied_weights=eff.as_dict(),
        )
        for name in ("perceptual", "mse", "silhouette", "surface", "parsing"):
            _check_finite(name, getattr(report, name), iteration)
        _check_finite("total", report.total, iteration)

        if total.requires_grad:
            T.backward(total, tape)

    adam_step(params.named_tensors(), opt, cfg)
    params.zero_grads()
    return report


def fit(dataset: Dataset, cfg: TrainConfig, weights: LossWeights, out_dir) -> dict:
    """Run the configured number of steps; write train.log.jsonl plus a
    checkpoint every eval_every steps and at the end.

    The SEMHUM_SEED environment variable, when set, overrides cfg.seed.
    Fully reproducible from (dataset, cfg, seed).
    """
    env_seed = os.environ.get("SEMHUM_SEED")
    if env_seed is not None:
        cfg = replace(cfg, seed=int(env_seed))
    os.makedirs(out_dir, exist_ok=True)
    params = FieldParams(
        dataset.scene.skeleton,
        num_classes=dataset.scene.num_classes,
        num_frames=len(dataset.frames),
        resolution=cfg.volume_resolution,
        use_nonrigid=cfg.use_nonrigid,
        seed=cfg.seed,
    )
    opt = AdamState()
    log_path = os.path.join(out_dir, "train.log.jsonl")
    ckpts = []
    with open(log_path, "w") as log:
        for it in range(cfg.iterations):
            batch = sample_ray_batch(dataset, cfg.rays_per_batch, cfg.seed, it)
            report = train_step(params, batch, weights, cfg, it, opt)
            log.write(json.dumps(report.to_json_obj()) + "\n")
            if cfg.eval_every > 0 and (it + 1) % cfg.eval_every == 0:
                path = os.path.join(out_dir, f"ckpt_{it + 1:06d}.ckpt")
                params.save(path)
                ckpts.append(path)
    final = os.path.join(out_dir, "ckpt_final.ckpt")
    params.save(final)
    ckpts.append(final)
    return {"checkpoint": final, "checkpoints": ckpts, "log": log_path, "params": params}
