"""Aggregate of every trainable tensor, with checkpoint naming.

Checkpoint tensor names:
  canon.trunkN.{w,b}, canon.{color,density,semantic}.{w,b},
  weightvol.logits, nonrigid.layerN.{w,b}, posecorr.delta_omega.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .bodymodel import Skeleton
from .canonicalfield import CanonicalMLP
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ValidationError
from .motionfield import MotionParams, NonRigidNet, init_weight_volume


class FieldParams:
    def __init__(
        self,
        skel: Skeleton,
        num_classes: int = 5,
        num_frames: int = 0,
        resolution: int = 32,
        use_nonrigid: bool = True,
        seed: int = 0,
    ):
        ss = np.random.SeedSequence([seed, 0x5EED])
        rng_canon, rng_nr = [np.random.default_rng(s) for s in ss.spawn(2)]
        self.skel = skel
        self.num_classes = num_classes
        self.num_frames = num_frames
        self.canon = CanonicalMLP(num_classes=num_classes, rng=rng_canon)
        self.vol = init_weight_volume(skel, resolution=resolution)
        self.nonrigid = NonRigidNet(skel.k, rng=rng_nr) if use_nonrigid else None
        self.pose_delta = (
            T.Tensor(np.zeros((num_frames, skel.k, 3)), requires_grad=True)
            if num_frames > 0
            else None
        )

    def named_tensors(self) -> dict:
        out = {}
        out.update(self.canon.named_tensors())
        out.update(self.vol.named_tensors())
        if self.nonrigid is not None:
            out.update(self.nonrigid.named_tensors())
        if self.pose_delta is not None:
            out["posecorr.delta_omega"] = self.pose_delta
        return out

    def trainable(self) -> list:
        return list(self.named_tensors().values())

    def zero_grads(self) -> None:
        for t in self.trainable():
            t.zero_grad()

    def motion(self, frame_index: int | None = None) -> MotionParams:
        """Warp inputs for one frame; frame_index selects that frame's pose
        residual (None for poses with no learned correction)."""
        delta = None
        if frame_index is not None and self.pose_delta is not None:
            delta = self.pose_delta[frame_index]
        return MotionParams(self.skel, self.vol, self.nonrigid, delta)

    def save(self, path) -> None:
        save_checkpoint(path, self.named_tensors())

    @classmethod
    def load(cls, path, skel: Skeleton) -> "FieldParams":
        arrays = load_checkpoint(path)
        if "canon.semantic.b" not in arrays or "weightvol.logits" not in arrays:
            raise ValidationError(f"{path}: missing field tensors in checkpoint")
        num_classes = arrays["canon.semantic.b"].shape[0]
        resolution = arrays["weightvol.logits"].shape[1]
        use_nonrigid = "nonrigid.layer0.w" in arrays
        num_frames = (
            arrays["posecorr.delta_omega"].shape[0]
            if "posecorr.delta_omega" in arrays
            else 0
        )
        params = cls(
            skel,
            num_classes=num_classes,
            num_frames=num_frames,
            resolution=resolution,
            use_nonrigid=use_nonrigid,
        )
        named = params.named_tensors()
        for name, tensor in named.items():
            if name not in arrays:
                raise ValidationError(f"{path}: checkpoint missing tensor {name!r}")
            if arrays[name].shape != tensor.data.shape:
                raise ValidationError(
                    f"{path}: tensor {name!r} has shape {arrays[name].shape}, "
                    f"expected {tensor.data.shape}"
                )
            tensor.data = arrays[name]
        return params
