"""Training objectives.

Five weighted terms: an optional perceptual plugin, color MSE, the
silhouette term (clamped expected alpha vs. binary mask), the surface
term (skeletal warp of observed surface vertices vs. their canonical
rest positions; the non-rigid stage is deliberately excluded), and the
multi-class parsing cross-entropy over integrated logits.  All terms are
mean-reduced so the weights are batch-size independent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .bodymodel import SurfaceVertices, Pose, bone_transforms_t
from .errors import ValidationError
from .motionfield import MotionParams, skeletal_warp_batch, skeletal_warp_gathered

_TERM_ORDER = ("perceptual", "mse", "silhouette", "surface", "parsing")


@dataclass
class LossWeights:
    perceptual: float = 0.0  # plugin hook; nothing ships in-repo
    mse: float = 1.0
    silhouette: float = 0.1
    surface: float = 0.1
    parsing: float = 0.1

    def __post_init__(self):
        for name in _TERM_ORDER:
            if getattr(self, name) < 0:
                raise ValidationError(f"loss weight {name} must be >= 0")

    def as_dict(self) -> dict:
        return {name: float(getattr(self, name)) for name in _TERM_ORDER}


@dataclass
class LossReport:
    iteration: int
    mse: float
    silhouette: float
    surface: float
    parsing: float
    total: float
    perceptual: float = 0.0
    applied_weights: dict = None

    def to_json_obj(self) -> dict:
        # fixed jsonl schema for train.log.jsonl
        return {
            "iter": self.iteration,
            "mse": self.mse,
            "silhouette": self.silhouette,
            "surface": self.surface,
            "parsing": self.parsing,
            "total": self.total,
        }


_PERCEPTUAL_PLUGIN = None


def set_perceptual_plugin(fn) -> None:
    """Register fn(rendered_rgb_tensor, target_rgb_array) -> scalar tensor.

    The repo ships no implementation; with no plugin the perceptual term
    is identically zero."""
    global _PERCEPTUAL_PLUGIN
    _PERCEPTUAL_PLUGIN = fn


def perceptual_term(rendered: T.Tensor, target: np.ndarray):
    if _PERCEPTUAL_PLUGIN is None:
        return T.Tensor(0.0)
    return _PERCEPTUAL_PLUGIN(rendered, target)


def mse_loss(rendered: T.Tensor, target) -> T.Tensor:
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValidationError(
            f"mse: rendered batch {rendered.shape} != target {target.shape}"
        )
    diff = rendered - T.Tensor(target)
    return T.mean(diff * diff)


def surface_loss(
    v_obs: SurfaceVertices,
    pose: Pose,
    motion: MotionParams,
    v_canon: SurfaceVertices,
) -> T.Tensor:
    """Mean squared distance between skeletal-warped observed vertices and
    their canonical (rest) positions.  Correspondence is by index."""
    if v_obs.positions.shape != v_canon.positions.shape:
        raise ValidationError(
            f"surface: vertex counts differ "
            f"({v_obs.positions.shape[0]} vs {v_canon.positions.shape[0]})"
        )
    rots, trans = bone_transforms_t(motion.skel, pose, motion.delta_omega)
    x = T.Tensor(v_obs.positions)
    x_skel, _, _ = skeletal_warp_batch(x, rots, trans, motion.vol)
    diff = x_skel - T.Tensor(v_canon.positions)
    per_vertex = T.tsum(diff * diff, axis=1)
    return T.mean(per_vertex)


def surface_loss_gathered(
    v_obs_all: np.ndarray,
    gidx: np.ndarray,
    rot_stack: T.Tensor,
    t_stack: T.Tensor,
    vol,
    v_canon_all: np.ndarray,
    probs: T.Tensor | None = None,
) -> T.Tensor:
    """surface_loss over several frames at once, sharing pre-stacked bone
    transforms (same math: every frame contributes equally many vertices,
    so the global vertex mean equals the mean of per-frame means)."""
    x = T.Tensor(v_obs_all)
    x_skel, _, _ = skeletal_warp_gathered(x, rot_stack, t_stack, gidx, vol, probs=probs)
    diff = x_skel - T.Tensor(v_canon_all)
    per_vertex = T.tsum(diff * diff, axis=1)
    return T.mean(per_vertex)


def silhouette_loss(acc_alpha: T.Tensor, mask) -> T.Tensor:
    """Clamp expected alpha above 1 (zero gradient in the clamped region),
    then mean squared error against the binary mask."""
    mask = np.asarray(mask, dtype=np.float64).reshape(-1)
    if acc_alpha.shape != mask.shape:
        raise ValidationError(
            f"silhouette: alpha batch {acc_alpha.shape} != mask {mask.shape}"
        )
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ValidationError("silhouette: mask values must be 0 or 1")
    m_hat = T.clamp(acc_alpha, None, 1.0)
    diff = m_hat - T.Tensor(mask)
    return T.mean(diff * diff)


def parsing_loss(logits: T.Tensor, labels, valid=None) -> T.Tensor:
    """Mean over valid rays of -log softmax(S)[label]; rays from frames
    without label maps are excluded via the valid flags."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if valid is None:
        valid = np.ones(labels.shape[0], dtype=bool)
    valid = np.asarray(valid, dtype=bool).reshape(-1)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return T.Tensor(0.0)
    ce = T.cross_entropy_logits(logits, labels, valid)
    return T.tsum(ce) / float(n_valid)


def parsing_loss_value(logits: np.ndarray, labels, valid=None) -> float:
    """Off-tape twin of parsing_loss for report-only evaluation (used while
    the parsing term is schedule-gated so label content cannot perturb the
    parameter path)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if valid is None:
        valid = np.ones(labels.shape[0], dtype=bool)
    valid = np.asarray(valid, dtype=bool).reshape(-1)
    if not valid.any():
        return 0.0
    z = logits[valid]
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(z.shape[0]), labels[valid]]
    return float(np.mean(lse - picked))


def total_loss(terms: dict, weights: LossWeights) -> T.Tensor:
    """Weighted sum in fixed term order; missing terms and zero weights
    contribute nothing (an all-zero configuration is exactly 0)."""
    out = None
    for name in _TERM_ORDER:
        lam = float(getattr(weights, name))
        term = terms.get(name)
        if lam == 0.0 or term is None:
            continue
        piece = T.as_tensor(term) * lam
        out = piece if out is None else out + piece
    return out if out is not None else T.Tensor(0.0)
