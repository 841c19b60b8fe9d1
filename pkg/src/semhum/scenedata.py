"""Synthetic scenes: analytic capsule rendering, pseudo-label noise,
dataset generation and loading.

The analytic renderer is exact ray/capsule intersection with flat part
colors plus one directional Lambert light, one sample per pixel, so
regenerated datasets are byte-identical.  Pseudo-label noise stacks three
corruptions (boundary relabeling, i.i.d. flips, elliptical blobs) that
never touch pixels outside the mask.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .bodymodel import (
    Pose,
    Skeleton,
    forward_kinematics,
    humanoid4,
    posed_joints,
    tpose,
)
from .errors import ValidationError
from .images import read_pgm, read_ppm, to_float, write_pgm, write_ppm
from .renderer import Camera


@dataclass
class FrameRecord:
    camera_id: str
    pose: Pose
    rgb: np.ndarray  # (H,W,3) float in [0,1], background black
    mask: np.ndarray  # (H,W) {0,1}
    labels: np.ndarray | None  # (H,W) class indices, 0 = background
    has_labels: bool
    index: int = 0

    def validate(self, num_classes: int, origin: str = "frame") -> None:
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValidationError(f"{origin}: mask must be binary")
        if self.labels is not None:
            if self.labels.max(initial=0) >= num_classes:
                raise ValidationError(
                    f"{origin}: label value {int(self.labels.max())} >= "
                    f"class count {num_classes}"
                )
            if np.any(self.labels[self.mask == 0] != 0):
                raise ValidationError(
                    f"{origin}: non-background label outside the mask"
                )


@dataclass
class SceneDef:
    skeleton: Skeleton
    part_colors: np.ndarray  # (K,3) in [0,1]
    part_classes: np.ndarray  # (K,) semantic class per bone
    class_names: list
    light_dir: np.ndarray
    ambient: float = 0.35

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass
class Dataset:
    scene: SceneDef
    cameras: dict  # id -> Camera
    frames: list  # training FrameRecords
    heldout_frames: list  # evaluation poses (no files required)
    seed: int = 0
    root: str = "."


def humanoid4_scene() -> SceneDef:
    return SceneDef(
        skeleton=humanoid4(),
        part_colors=np.array(
            [
                [0.25, 0.35, 0.85],  # torso
                [0.90, 0.75, 0.55],  # head
                [0.85, 0.20, 0.20],  # arm
                [0.20, 0.70, 0.30],  # leg
            ]
        ),
        part_classes=np.array([1, 2, 3, 4]),
        class_names=["background", "torso", "head", "arm", "leg"],
        light_dir=np.array([0.35, 0.8, -0.5]) / np.linalg.norm([0.35, 0.8, -0.5]),
        ambient=0.35,
    )


def analytic_render(scene: SceneDef, pose: Pose, cam: Camera):
    """Exact ray/capsule ground truth: (rgb, mask, labels, depth).

    Nearest hit wins; shading is part color * (ambient + (1-ambient) *
    max(0, n.l)); background is black / class 0 / depth inf.
    """
    skel = scene.skeleton
    rg, tg = forward_kinematics(skel, pose)
    seg_a = np.einsum("kij,kj->ki", rg, skel.rest_joints) + tg
    seg_b = np.einsum("kij,kj->ki", rg, skel.bone_tips) + tg

    h, w = cam.height, cam.width
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
    origins, dirs = cam.pixel_rays(uv)
    t, bone, normal = backend.kernels().capsule_hits(
        origins, dirs, seg_a, seg_b, skel.bone_radii
    )
    hit = bone >= 0
    lam = scene.ambient + (1.0 - scene.ambient) * np.maximum(
        normal @ scene.light_dir, 0.0
    )
    rgb = np.zeros((h * w, 3))
    rgb[hit] = scene.part_colors[bone[hit]] * lam[hit, None]
    np.clip(rgb, 0.0, 1.0, out=rgb)
    labels = np.zeros(h * w, dtype=np.int64)
    labels[hit] = scene.part_classes[bone[hit]]
    mask = hit.astype(np.uint8)
    return (
        rgb.reshape(h, w, 3),
        mask.reshape(h, w),
        labels.reshape(h, w),
        t.reshape(h, w),
    )


# ---------------------------------------------------------------------------
# pseudo-label noise


@dataclass
class NoiseConfig:
    # defaults put clean-vs-noisy mIoU near 0.8 on the humanoid4 preset,
    # the regime where label denoising is measurable
    boundary_width: int = 1
    flip_prob: float = 0.005
    blob_count: int = 1
    blob_area_frac: float = 0.005


def _label_boundary(labels: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Foreground pixels 4-adjacent to a different foreground part.

    The outer silhouette ring is excluded: parser confusion concentrates
    along part seams, and counting the silhouette would let the band term
    dominate every thin part."""
    b = np.zeros_like(mask, dtype=bool)
    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        shifted = np.full_like(labels, 0)
        ys = slice(max(dy, 0), labels.shape[0] + min(dy, 0))
        yd = slice(max(-dy, 0), labels.shape[0] + min(-dy, 0))
        xs = slice(max(dx, 0), labels.shape[1] + min(dx, 0))
        xd = slice(max(-dx, 0), labels.shape[1] + min(-dx, 0))
        shifted[yd, xd] = labels[ys, xs]
        b |= (shifted > 0) & (shifted != labels)
    return b & (mask > 0)


def _dilate(b: np.ndarray, it: int) -> np.ndarray:
    out = b.copy()
    for _ in range(it):
        grown = out.copy()
        grown[1:, :] |= out[:-1, :]
        grown[:-1, :] |= out[1:, :]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def inject_label_noise(
    labels: np.ndarray,
    mask: np.ndarray,
    noise: NoiseConfig,
    seed: int,
    num_classes: int,
) -> np.ndarray:
    """Simulated off-the-shelf parser output: (a) a boundary band relabeled
    to random adjacent parts, (b) i.i.d. flips among foreground classes,
    (c) random elliptical blobs.  Background (mask == 0) is never altered."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0B]))
    out = labels.astype(np.int64).copy()
    h, w = out.shape
    fg_classes = np.arange(1, num_classes)

    # (a) boundary band
    if noise.boundary_width > 0:
        band = _label_boundary(out, mask)
        if noise.boundary_width > 1:
            band = _dilate(band, noise.boundary_width - 1) & (mask > 0)
        ys, xs = np.nonzero(band)
        r = noise.boundary_width
        for y, x in zip(ys, xs):
            y0, y1 = max(0, y - r), min(h, y + r + 1)
            x0, x1 = max(0, x - r), min(w, x + r + 1)
            window = labels[y0:y1, x0:x1][mask[y0:y1, x0:x1] > 0]
            cand = np.unique(window)
            cand = cand[(cand != labels[y, x]) & (cand > 0)]
            if cand.size:
                out[y, x] = cand[rng.integers(0, cand.size)]

    # (b) i.i.d. flips among foreground classes
    if noise.flip_prob > 0 and fg_classes.size > 1:
        fg = mask > 0
        flip = fg & (rng.random((h, w)) < noise.flip_prob)
        ys, xs = np.nonzero(flip)
        for y, x in zip(ys, xs):
            others = fg_classes[fg_classes != out[y, x]]
            out[y, x] = others[rng.integers(0, others.size)]

    # (c) elliptical blobs
    area = float(mask.sum())
    for _ in range(noise.blob_count):
        if area == 0 or fg_classes.size == 0:
            break
        ys, xs = np.nonzero(mask)
        i = rng.integers(0, ys.size)
        cy, cx = float(ys[i]), float(xs[i])
        target = noise.blob_area_frac * area
        base = np.sqrt(target / np.pi)
        a_ax = base * rng.uniform(0.6, 1.6)
        b_ax = target / (np.pi * a_ax)
        theta = rng.uniform(0.0, np.pi)
        cls = int(fg_classes[rng.integers(0, fg_classes.size)])
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        dy, dx = yy - cy, xx - cx
        ct, st = np.cos(theta), np.sin(theta)
        e = ((dx * ct + dy * st) / a_ax) ** 2 + ((-dx * st + dy * ct) / b_ax) ** 2
        blob = (e <= 1.0) & (mask > 0)
        out[blob] = cls

    out[mask == 0] = 0
    return out


# ---------------------------------------------------------------------------
# trajectories and camera rigs


def look_at(eye, target, fov_deg: float, size: int, cam_id: str, heldout=False) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.array([0.0, 1.0, 0.0])
    z = target - eye
    z = z / np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.array([1.0, 0.0, 0.0])
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=0)
    f = 0.5 * size / np.tan(np.deg2rad(fov_deg) / 2.0)
    return Camera(
        fx=f,
        fy=f,
        cx=size / 2.0,
        cy=size / 2.0,
        width=size,
        height=size,
        rotation=rot,
        translation=-rot @ eye,
        cam_id=cam_id,
        heldout=heldout,
    )


def default_rig(size: int = 64) -> dict:
    target = np.array([0.0, 0.15, 0.0])
    radius = 2.4
    cams = {}
    for i, az in enumerate((0.0, 120.0, 240.0)):
        a = np.deg2rad(az)
        eye = target + radius * np.array([np.sin(a), 0.12, -np.cos(a)])
        cams[f"cam{i}"] = look_at(eye, target, 42.0, size, f"cam{i}")
    a = np.deg2rad(60.0)
    eye = target + radius * np.array([np.sin(a), 0.35, -np.cos(a)])
    cams["heldout"] = look_at(eye, target, 42.0, size, "heldout", heldout=True)
    return cams


def trajectory_pose(scene: SceneDef, t: float) -> Pose:
    """Smooth sinusoidal joint motion over phase t in [0, 1)."""
    k = scene.skeleton.k
    rot = np.zeros((k, 3))
    tau = 2.0 * np.pi * t
    rot[0] = [0.0, 0.9 * np.sin(tau), 0.0]  # torso yaw
    if k >= 2:
        rot[1] = [0.22 * np.sin(2.0 * tau), 0.0, 0.0]  # head nod
    if k >= 3:
        rot[2] = [0.0, 0.0, -0.8 * np.sin(tau + 0.7)]  # arm swing
    if k >= 4:
        rot[3] = [0.55 * np.sin(tau + 1.9), 0.0, 0.0]  # leg swing
    joints = posed_joints(scene.skeleton, np.zeros(3), rot)
    return Pose(joints=joints, rotations=rot)


# ---------------------------------------------------------------------------
# dataset generation / loading


def _camera_to_json(cam: Camera) -> dict:
    return {
        "id": cam.cam_id,
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
        "rotation": cam.rotation.tolist(),
        "translation": cam.translation.tolist(),
        "heldout": cam.heldout,
    }


def _camera_from_json(obj: dict) -> Camera:
    try:
        return Camera(
            fx=float(obj["fx"]),
            fy=float(obj["fy"]),
            cx=float(obj["cx"]),
            cy=float(obj["cy"]),
            width=int(obj["width"]),
            height=int(obj["height"]),
            rotation=np.array(obj["rotation"], dtype=np.float64),
            translation=np.array(obj["translation"], dtype=np.float64),
            cam_id=str(obj["id"]),
            heldout=bool(obj.get("heldout", False)),
        )
    except KeyError as exc:
        raise ValidationError(f"manifest camera entry missing field {exc}") from None


def generate_dataset(
    out_dir,
    scene: SceneDef | None = None,
    n_frames: int = 30,
    image_size: int = 64,
    labeled=5,
    seed: int = 0,
    noise: NoiseConfig | None = None,
    n_heldout_poses: int = 3,
) -> str:
    """Write a synthetic scene to disk; returns the manifest path.

    `labeled` is a frame count (evenly spaced subset) or an explicit list
    of frame indices that receive (noisy) label maps.  Held-out cameras
    are flagged for evaluation only; held-out poses are extra trajectory
    phases listed in the manifest without image files.
    """
    scene = scene if scene is not None else humanoid4_scene()
    noise = noise if noise is not None else NoiseConfig()
    cams = default_rig(image_size)
    train_cams = [c for c in cams.values() if not c.heldout]

    if isinstance(labeled, (int, np.integer)):
        if labeled < 0 or labeled > n_frames:
            raise ValidationError(
                f"labeled count {labeled} outside [0, {n_frames}]"
            )
        labeled_idx = (
            set(np.round(np.linspace(0, n_frames - 1, labeled)).astype(int).tolist())
            if labeled > 0
            else set()
        )
    else:
        labeled_idx = set(int(i) for i in labeled)
        if labeled_idx and (min(labeled_idx) < 0 or max(labeled_idx) >= n_frames):
            raise ValidationError("labeled subset contains out-of-range frame index")

    os.makedirs(out_dir, exist_ok=True)
    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)

    frames_json = []
    for i in range(n_frames):
        pose = trajectory_pose(scene, i / n_frames)
        cam = train_cams[i % len(train_cams)]
        rgb, mask, labels, _ = analytic_render(scene, pose, cam)
        stem = f"f{i:03d}"
        rgb_rel = f"frames/{stem}_rgb.ppm"
        mask_rel = f"frames/{stem}_mask.pgm"
        write_ppm(os.path.join(out_dir, rgb_rel), rgb)
        write_pgm(os.path.join(out_dir, mask_rel), mask, maxval=1)
        entry = {
            "camera": cam.cam_id,
            "pose": {
                "joints": pose.joints.tolist(),
                "rotations": pose.rotations.tolist(),
            },
            "rgb": rgb_rel,
            "mask": mask_rel,
            "labels": None,
        }
        if i in labeled_idx:
            noisy = inject_label_noise(
                labels, mask, noise, seed=seed * 100003 + i, num_classes=scene.num_classes
            )
            lab_rel = f"frames/{stem}_labels.pgm"
            write_pgm(
                os.path.join(out_dir, lab_rel), noisy, maxval=scene.num_classes - 1
            )
            entry["labels"] = lab_rel
        frames_json.append(entry)

    heldout_json = []
    for j in range(n_heldout_poses):
        phase = (j + 0.37) / max(n_heldout_poses, 1)
        hp = trajectory_pose(scene, phase)
        heldout_json.append(
            {
                "phase": phase,
                "pose": {
                    "joints": hp.joints.tolist(),
                    "rotations": hp.rotations.tolist(),
                },
            }
        )

    skel = scene.skeleton
    manifest = {
        "format": "semhum-scene",
        "seed": seed,
        "image_size": image_size,
        "class_count": scene.num_classes,
        "class_names": scene.class_names,
        "skeleton": {
            "parent": skel.parent.tolist(),
            "rest_joints": skel.rest_joints.tolist(),
            "bone_tips": skel.bone_tips.tolist(),
            "bone_radii": skel.bone_radii.tolist(),
        },
        "parts": {
            "colors": scene.part_colors.tolist(),
            "classes": scene.part_classes.tolist(),
        },
        "light": {"direction": scene.light_dir.tolist(), "ambient": scene.ambient},
        "noise": {
            "boundary_width": noise.boundary_width,
            "flip_prob": noise.flip_prob,
            "blob_count": noise.blob_count,
            "blob_area_frac": noise.blob_area_frac,
        },
        "cameras": [_camera_to_json(c) for c in cams.values()],
        "frames": frames_json,
        "heldout_frames": heldout_json,
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return manifest_path


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ValidationError(f"{where}: missing field {key!r}")
    return obj[key]


def load_dataset(manifest_path) -> Dataset:
    """Load and validate a scene tree; violations name the file and field."""
    where = str(manifest_path)
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"{where}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{where}: invalid JSON: {exc}") from None
    if manifest.get("format") != "semhum-scene":
        raise ValidationError(f"{where}: field 'format' is not 'semhum-scene'")

    root = os.path.dirname(os.path.abspath(manifest_path))
    num_classes = int(_require(manifest, "class_count", where))
    class_names = _require(manifest, "class_names", where)
    if len(class_names) != num_classes:
        raise ValidationError(
            f"{where}: class_names has {len(class_names)} entries, "
            f"class_count is {num_classes}"
        )
    sk = _require(manifest, "skeleton", where)
    try:
        skel = Skeleton(
            parent=np.array(sk["parent"]),
            rest_joints=np.array(sk["rest_joints"], dtype=np.float64),
            bone_tips=np.array(sk["bone_tips"], dtype=np.float64),
            bone_radii=np.array(sk["bone_radii"], dtype=np.float64),
        )
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"{where}: skeleton: {exc}") from None
    parts = _require(manifest, "parts", where)
    light = _require(manifest, "light", where)
    scene = SceneDef(
        skeleton=skel,
        part_colors=np.array(parts["colors"], dtype=np.float64),
        part_classes=np.array(parts["classes"], dtype=np.int64),
        class_names=list(class_names),
        light_dir=np.array(light["direction"], dtype=np.float64),
        ambient=float(light["ambient"]),
    )
    if scene.part_classes.max(initial=0) >= num_classes:
        raise ValidationError(f"{where}: parts.classes exceed class_count")

    cameras = {}
    for cj in _require(manifest, "cameras", where):
        cam = _camera_from_json(cj)
        cameras[cam.cam_id] = cam

    size = int(_require(manifest, "image_size", where))
    frames = []
    for i, fj in enumerate(_require(manifest, "frames", where)):
        here = f"{where}: frames[{i}]"
        cam_id = _require(fj, "camera", here)
        if cam_id not in cameras:
            raise ValidationError(f"{here}: unknown camera {cam_id!r}")
        pj = _require(fj, "pose", here)
        pose = Pose(
            joints=np.array(pj["joints"], dtype=np.float64),
            rotations=np.array(pj["rotations"], dtype=np.float64),
        )
        if pose.joints.shape != (skel.k, 3) or pose.rotations.shape != (skel.k, 3):
            raise ValidationError(f"{here}: pose dimensions do not match skeleton")
        rgb_path = os.path.join(root, _require(fj, "rgb", here))
        mask_path = os.path.join(root, _require(fj, "mask", here))
        try:
            rgb_u8, maxval = read_ppm(rgb_path)
        except FileNotFoundError:
            raise ValidationError(f"{here}: rgb file missing: {rgb_path}") from None
        if rgb_u8.shape[:2] != (size, size):
            raise ValidationError(
                f"{rgb_path}: size {rgb_u8.shape[1]}x{rgb_u8.shape[0]} does not "
                f"match manifest image_size {size}"
            )
        rgb = to_float(rgb_u8, maxval)
        try:
            mask_u8, _ = read_pgm(mask_path)
        except FileNotFoundError:
            raise ValidationError(f"{here}: mask file missing: {mask_path}") from None
        if mask_u8.shape != (size, size):
            raise ValidationError(f"{mask_path}: mask size does not match manifest")
        mask = (mask_u8 > 0).astype(np.uint8)
        labels = None
        if fj.get("labels"):
            lab_path = os.path.join(root, fj["labels"])
            try:
                lab_u8, _ = read_pgm(lab_path)
            except FileNotFoundError:
                raise ValidationError(f"{here}: label file missing: {lab_path}") from None
            if lab_u8.shape != (size, size):
                raise ValidationError(f"{lab_path}: label size does not match manifest")
            labels = lab_u8.astype(np.int64)
            if labels.max(initial=0) >= num_classes:
                raise ValidationError(
                    f"{lab_path}: label value {int(labels.max())} >= class count "
                    f"{num_classes}"
                )
        rec = FrameRecord(
            camera_id=cam_id,
            pose=pose,
            rgb=rgb,
            mask=mask,
            labels=labels,
            has_labels=labels is not None,
            index=i,
        )
        rec.validate(num_classes, origin=f"{here}")
        frames.append(rec)

    heldout = []
    for j, hj in enumerate(manifest.get("heldout_frames", [])):
        pj = _require(hj, "pose", f"{where}: heldout_frames[{j}]")
        heldout.append(
            Pose(
                joints=np.array(pj["joints"], dtype=np.float64),
                rotations=np.array(pj["rotations"], dtype=np.float64),
            )
        )

    return Dataset(
        scene=scene,
        cameras=cameras,
        frames=frames,
        heldout_frames=heldout,
        seed=int(manifest.get("seed", 0)),
        root=root,
    )
