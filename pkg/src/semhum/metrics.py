"""Evaluation: PSNR, SSIM, segmentation metrics, cross-view label
consistency, and the eval driver that assembles an EvalReport.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import backend
from .bodymodel import Pose, forward_kinematics, generate_surface
from .errors import ValidationError
from .params import FieldParams
from .renderer import render_image
from .scenedata import Dataset, SceneDef, analytic_render

_GRAY = np.array([0.299, 0.587, 0.114])


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """10 log10(1/MSE) on [0,1] channels over masked pixels; identical
    images give +inf (serialized as the string "inf")."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"psnr: image shapes differ: {a.shape} vs {b.shape}")
    if mask is not None:
        sel = np.asarray(mask) > 0
        if not sel.any():
            raise ValidationError("psnr: empty mask")
        diff = a[sel] - b[sel]
    else:
        diff = a - b
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    t = sliding_window_view(img, k.size, axis=0) @ k
    return sliding_window_view(t, k.size, axis=1) @ k


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale structural similarity: 11x11 Gaussian window
    (sigma 1.5), dynamic range 1, on the luma (0.299/0.587/0.114) image."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"ssim: image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a = a @ _GRAY
        b = b @ _GRAY
    win = 11
    if a.shape[0] < win or a.shape[1] < win:
        raise ValidationError(
            f"ssim: image {a.shape} smaller than the {win}x{win} window"
        )
    k = _gaussian_kernel(win, 1.5)
    mu1 = _filter_valid(a, k)
    mu2 = _filter_valid(b, k)
    s11 = _filter_valid(a * a, k) - mu1 * mu1
    s22 = _filter_valid(b * b, k) - mu2 * mu2
    s12 = _filter_valid(a * b, k) - mu1 * mu2
    c1 = k1 * k1
    c2 = k2 * k2
    num = (2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def segmentation_metrics(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray, num_classes: int):
    """(pixel accuracy, per-class IoU, mIoU) over mask==1 pixels.

    Classes absent from both prediction and truth carry IoU nan and are
    excluded from the mean."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.shape != np.asarray(mask).shape:
        raise ValidationError("segmentation: shape mismatch between inputs")
    if pred.max(initial=0) >= num_classes or truth.max(initial=0) >= num_classes:
        raise ValidationError("segmentation: label value >= class count")
    sel = np.asarray(mask) > 0
    p = pred[sel]
    t = truth[sel]
    if p.size == 0:
        raise ValidationError("segmentation: empty mask")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (t, p), 1)
    acc = float(np.trace(conf)) / float(p.size)
    iou = np.full(num_classes, np.nan)
    for c in range(num_classes):
        tp = conf[c, c]
        fp = conf[:, c].sum() - tp
        fn = conf[c, :].sum() - tp
        denom = tp + fp + fn
        if denom > 0:
            iou[c] = tp / denom
    miou = float(np.nanmean(iou)) if np.any(~np.isnan(iou)) else 0.0
    return acc, iou, miou


def label_consistency(
    label_images: list,
    cameras: list,
    scene: SceneDef,
    pose: Pose,
    n_per_bone: int = 160,
    depth_tol: float | None = None,
    seam_margin: float = 0.05,
) -> float:
    """Fraction of body-surface points whose predicted labels agree across
    every view that sees them.

    Visibility uses the analytic body: a point counts as seen in a view
    when the nearest capsule hit at its projected pixel is the point's own
    bone at a matching depth.  Points within seam_margin (world units) of
    another part's surface are excluded up front — at image resolution a
    seam point's pixel center may legitimately sample either part, which
    would measure rasterization, not view consistency.  Points seen in
    fewer than two views are excluded (no agreement to measure); an empty
    point set scores 1.0.
    """
    if len(label_images) < 2 or len(label_images) != len(cameras):
        raise ValidationError("label_consistency: need n >= 2 views with labels")
    skel = scene.skeleton
    if depth_tol is None:
        depth_tol = 1.5 * float(skel.bone_radii.max())
    pts = generate_surface(skel, pose, n_per_bone)
    if seam_margin > 0.0:
        keep = np.ones(pts.positions.shape[0], dtype=bool)
        rg0, tg0 = forward_kinematics(skel, pose)
        pj = np.einsum("kij,kj->ki", rg0, skel.rest_joints) + tg0
        pt_tips = np.einsum("kij,kj->ki", rg0, skel.bone_tips) + tg0
        for j in range(skel.k):
            a, b = pj[j], pt_tips[j]
            u = b - a
            denom = max(float(u @ u), 1e-24)
            s = np.clip((pts.positions - a) @ u / denom, 0.0, 1.0)
            d = np.linalg.norm(pts.positions - (a + s[:, None] * u), axis=1)
            keep &= (pts.bone_ids == j) | (d - skel.bone_radii[j] >= seam_margin)
        pts.positions = pts.positions[keep]
        pts.bone_ids = pts.bone_ids[keep]
    rg, tg = forward_kinematics(skel, pose)
    seg_a = np.einsum("kij,kj->ki", rg, skel.rest_joints) + tg
    seg_b = np.einsum("kij,kj->ki", rg, skel.bone_tips) + tg

    n = pts.positions.shape[0]
    seen = np.zeros((len(cameras), n), dtype=bool)
    lab = np.zeros((len(cameras), n), dtype=np.int64)
    for vi, (img, cam) in enumerate(zip(label_images, cameras)):
        uv, depth, in_front = cam.project(pts.positions)
        ui = np.rint(uv[:, 0]).astype(np.int64)
        vic = np.rint(uv[:, 1]).astype(np.int64)
        ok = in_front & (ui >= 0) & (ui < cam.width) & (vic >= 0) & (vic < cam.height)
        if not ok.any():
            continue
        uu, vv = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
        o, d = cam.pixel_rays(
            np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
        )
        t_hit, bone_hit, _ = backend.kernels().capsule_hits(
            o, d, seg_a, seg_b, skel.bone_radii
        )
        t_hit = t_hit.reshape(cam.height, cam.width)
        bone_hit = bone_hit.reshape(cam.height, cam.width)
        sel = np.nonzero(ok)[0]
        pix_bone = bone_hit[vic[sel], ui[sel]]
        pix_depth = t_hit[vic[sel], ui[sel]]
        vis = (pix_bone == pts.bone_ids[sel]) & (
            np.abs(pix_depth - depth[sel]) <= depth_tol
        )
        idx = sel[vis]
        seen[vi, idx] = True
        lab[vi, idx] = np.asarray(img)[vic[idx], ui[idx]]

    counts = seen.sum(axis=0)
    eligible = counts >= 2
    if not eligible.any():
        return 1.0
    agree = 0
    for i in np.nonzero(eligible)[0]:
        labels_i = lab[seen[:, i], i]
        agree += int(np.all(labels_i == labels_i[0]))
    return agree / int(eligible.sum())


# ---------------------------------------------------------------------------
# eval driver


def _json_float(x: float):
    if np.isposinf(x):
        return "inf"
    if np.isneginf(x):
        return "-inf"
    return float(x)


@dataclass
class EvalReport:
    split: str
    per_view: list = field(default_factory=list)
    psnr: float = 0.0
    ssim: float = 0.0
    pixel_acc: float = 0.0
    miou: float = 0.0
    consistency: float | None = None
    evaluated_pixels: int = 0
    lpips: float | None = None  # reserved for the perceptual plugin

    def to_json_obj(self) -> dict:
        return {
            "split": self.split,
            "psnr": _json_float(self.psnr),
            "ssim": float(self.ssim),
            "pixel_acc": float(self.pixel_acc),
            "miou": float(self.miou),
            "consistency": None if self.consistency is None else float(self.consistency),
            "evaluated_pixels": int(self.evaluated_pixels),
            "lpips": self.lpips,
            "per_view": [
                {**v, "psnr": _json_float(v["psnr"])} for v in self.per_view
            ],
        }


def evaluate(
    dataset: Dataset,
    params: FieldParams,
    split: str = "heldout",
    d_samples: int = 128,
    frame_stride: int = 5,
    with_consistency: bool = True,
) -> EvalReport:
    """Render and score a split.

    train: each selected frame from its own training camera, against the
    stored images (clean labels recomputed analytically).
    heldout: each selected frame from the held-out camera, against the
    analytic ground truth; consistency is measured on held-out poses
    rendered from every training camera.
    """
    if split not in ("train", "heldout"):
        raise ValidationError(f"unknown split {split!r} (use train or heldout)")
    scene = dataset.scene
    heldout_cams = [c for c in dataset.cameras.values() if c.heldout]
    train_cams = [c for c in dataset.cameras.values() if not c.heldout]
    if split == "heldout" and not heldout_cams:
        raise ValidationError("dataset has no held-out camera")

    rows = []
    pixel_count = 0
    sel_frames = dataset.frames[:: max(frame_stride, 1)]
    for rec in sel_frames:
        if split == "train":
            cam = dataset.cameras[rec.camera_id]
            gt_rgb = rec.rgb
            _, gt_mask, gt_labels, _ = analytic_render(scene, rec.pose, cam)
        else:
            cam = heldout_cams[0]
            gt_rgb, gt_mask, gt_labels, _ = analytic_render(scene, rec.pose, cam)
        rgb, _, labels, _ = render_image(
            cam,
            rec.pose,
            params,
            d_samples=d_samples,
            frame_index=rec.index if split == "train" else None,
        )
        acc, _, miou = segmentation_metrics(labels, gt_labels, gt_mask, scene.num_classes)
        rows.append(
            {
                "frame": rec.index,
                "camera": cam.cam_id,
                "psnr": psnr(rgb, gt_rgb),
                "ssim": ssim(rgb, gt_rgb),
                "pixel_acc": acc,
                "miou": miou,
            }
        )
        pixel_count += int(gt_mask.sum())

    consistency = None
    if with_consistency:
        poses = dataset.heldout_frames if dataset.heldout_frames else [r.pose for r in sel_frames[:2]]
        scores = []
        for pose in poses:
            imgs = []
            for cam in train_cams:
                _, _, labels, _ = render_image(cam, pose, params, d_samples=d_samples)
                imgs.append(labels)
            scores.append(label_consistency(imgs, train_cams, scene, pose))
        consistency = float(np.mean(scores)) if scores else None

    report = EvalReport(
        split=split,
        per_view=rows,
        psnr=float(np.mean([r["psnr"] for r in rows])),
        ssim=float(np.mean([r["ssim"] for r in rows])),
        pixel_acc=float(np.mean([r["pixel_acc"] for r in rows])),
        miou=float(np.mean([r["miou"] for r in rows])),
        consistency=consistency,
        evaluated_pixels=pixel_count,
    )
    return report
