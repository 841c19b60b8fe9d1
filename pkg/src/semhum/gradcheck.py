"""Finite-difference verification of analytic gradients.

Every check compares reverse-mode gradients against central differences
(h = 1e-5) at seeded random coordinates of each tensor.  A coordinate
passes when |analytic - fd| <= max(1e-4 * scale, 1e-7) with scale =
max(|analytic|, |fd|) — the relative test with an absolute floor near
zero.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .canonicalfield import CanonicalMLP
from .params import FieldParams
from .scenedata import Dataset, FrameRecord, analytic_render, humanoid4_scene, look_at, trajectory_pose
from .trainer import TrainConfig, compute_terms, sample_ray_batch

H_STEP = 1e-5
REL_TOL = 1e-4
ABS_TOL = 1e-7


def central_difference(f, tensor: T.Tensor, idx, h: float = H_STEP) -> float:
    flat = tensor.data.reshape(-1)
    old = flat[idx]
    flat[idx] = old + h
    fp = f()
    flat[idx] = old - h
    fm = f()
    flat[idx] = old
    return (fp - fm) / (2.0 * h)


def check_gradients(
    build_scalar,
    named: dict,
    n_coords: int = 6,
    seed: int = 0,
    h: float = H_STEP,
) -> dict:
    """Compare backward() against central differences.

    build_scalar() must rebuild the scalar objective from the tensors in
    `named` (it is called repeatedly with perturbed data).  Returns per
    tensor {max_abs_err, max_rel_err, ok, checked}.
    """
    for t in named.values():
        t.zero_grad()
    with T.Tape() as tape:
        loss = build_scalar()
        if loss.requires_grad:
            T.backward(loss, tape)

    def value() -> float:
        return float(build_scalar().data)

    rng = np.random.default_rng(seed)
    results = {}
    for name, t in sorted(named.items()):
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        gflat = grad.reshape(-1)
        n = min(n_coords, t.size)
        coords = rng.choice(t.size, size=n, replace=False)
        worst_abs = 0.0
        worst_rel = 0.0
        ok = True
        for idx in coords:
            fd = central_difference(value, t, int(idx), h)
            a = float(gflat[idx])
            err = abs(a - fd)
            scale = max(abs(a), abs(fd))
            worst_abs = max(worst_abs, err)
            if scale > 0:
                worst_rel = max(worst_rel, err / scale)
            if err > max(REL_TOL * scale, ABS_TOL):
                ok = False
        results[name] = {
            "max_abs_err": worst_abs,
            "max_rel_err": worst_rel,
            "ok": ok,
            "checked": int(n),
        }
        t.zero_grad()
    return results


# ---------------------------------------------------------------------------
# micro fixtures


def micro_dataset(size: int = 16, n_frames: int = 2, seed: int = 3) -> Dataset:
    """Tiny in-memory scene for gradient checks: 2 posed frames, 16x16."""
    scene = humanoid4_scene()
    cam = look_at([0.25, 0.4, -2.3], [0.0, 0.15, 0.0], 46.0, size, "cam0")
    frames = []
    for i in range(n_frames):
        pose = trajectory_pose(scene, 0.13 + 0.31 * i)
        rgb, mask, labels, _ = analytic_render(scene, pose, cam)
        frames.append(
            FrameRecord(
                camera_id="cam0",
                pose=pose,
                rgb=rgb,
                mask=mask.astype(np.uint8),
                labels=labels,
                has_labels=True,
                index=i,
            )
        )
    return Dataset(scene=scene, cameras={"cam0": cam}, frames=frames, heldout_frames=[], seed=seed)


def micro_params(dataset: Dataset, seed: int = 5) -> FieldParams:
    params = FieldParams(
        dataset.scene.skeleton,
        num_classes=dataset.scene.num_classes,
        num_frames=len(dataset.frames),
        resolution=8,
        use_nonrigid=True,
        seed=seed,
    )
    rng = np.random.default_rng(seed + 1)
    # heads start at zero by design; nudge them (and the pose residual) so
    # every gradient path is exercised at a generic point.  The weight
    # volume is rebuilt with mild random logits: the geometric-prior init
    # has per-cell logit swings of ~12, whose curvature through softmax
    # dominates central differences at h=1e-5 and would mask real errors.
    for name, t in params.named_tensors().items():
        if name.startswith("canon.") and (".color." in name or ".density." in name or ".semantic." in name):
            t.data = rng.normal(0.0, 0.05, size=t.data.shape)
        if name == "posecorr.delta_omega":
            t.data = rng.normal(0.0, 0.02, size=t.data.shape)
        if name.startswith("nonrigid.layer3"):
            t.data = rng.normal(0.0, 0.05, size=t.data.shape)
        if name == "weightvol.logits":
            t.data = rng.normal(0.0, 0.3, size=t.data.shape)
    return params


def micro_batch(dataset: Dataset, n_rays: int = 4, seed: int = 11) -> tuple:
    cfg = TrainConfig(
        iterations=10,
        rays_per_batch=n_rays,
        parsing_delay_iters=0,
        nonrigid_enable_iter=0,
        d_samples=2,
        surface_samples_per_bone=3,
        eval_every=0,
        seed=seed,
    )
    batch = sample_ray_batch(dataset, n_rays, seed, 0)
    jitter = np.random.default_rng(np.random.SeedSequence([seed, 0, 1])).random(
        (n_rays, cfg.d_samples)
    )
    return cfg, batch, jitter


# ---------------------------------------------------------------------------
# suites


def _loss_term_check(term: str, n_coords: int = 4) -> dict:
    ds = micro_dataset()
    params = micro_params(ds)
    cfg, batch, jitter = micro_batch(ds)

    def build():
        terms, _ = compute_terms(
            params, batch, cfg, nonrigid_on=True, parsing_open=True, jitter=jitter
        )
        return terms[term]

    return check_gradients(build, params.named_tensors(), n_coords=n_coords, seed=17)


def check_losses(n_coords: int = 4) -> dict:
    return {
        term: _loss_term_check(term, n_coords)
        for term in ("mse", "silhouette", "surface", "parsing")
    }


def check_renderer(n_coords: int = 4) -> dict:
    ds = micro_dataset()
    params = micro_params(ds)
    cfg, batch, jitter = micro_batch(ds)

    def build():
        terms, _ = compute_terms(
            params, batch, cfg, nonrigid_on=True, parsing_open=True, jitter=jitter
        )
        # weighted mix of all three render outputs through their losses
        return terms["mse"] + terms["silhouette"] * 0.5 + terms["parsing"] * 0.25

    return {"render_outputs": check_gradients(build, params.named_tensors(), n_coords=n_coords, seed=23)}


def check_canonicalfield(n_coords: int = 5) -> dict:
    rng = np.random.default_rng(2)
    mlp = CanonicalMLP(num_classes=4, width=16, depth=3, skip_at=1, rng=rng)
    for _, t in mlp.named_tensors().items():
        if not np.any(t.data):
            t.data = rng.normal(0.0, 0.1, size=t.data.shape)
    x = rng.normal(0.0, 0.4, size=(6, 3))

    def build():
        c, d, s = mlp.query(T.Tensor(x))
        return T.tsum(c) + T.tsum(d) + T.tsum(T.sin(s))

    return {"query_field": check_gradients(build, mlp.named_tensors(), n_coords=n_coords, seed=29)}


def check_motionfield(n_coords: int = 5) -> dict:
    ds = micro_dataset()
    params = micro_params(ds)
    pose = ds.frames[0].pose
    rng = np.random.default_rng(4)
    pts = rng.normal(0.0, 0.3, size=(8, 3)) + np.array([0.0, 0.2, 0.0])

    from .bodymodel import bone_transforms_stack_t
    from .motionfield import skeletal_warp_gathered

    def build():
        rot, tr = bone_transforms_stack_t(params.skel, [pose], params.pose_delta[0:1])
        x_skel, fg, _ = skeletal_warp_gathered(
            T.Tensor(pts), rot, tr, np.zeros(8, dtype=np.int64), params.vol
        )
        return T.tsum(T.sin(x_skel)) + T.tsum(fg * 0.5)

    named = {
        "weightvol.logits": params.vol.logits,
        "posecorr.delta_omega": params.pose_delta,
    }
    out = {"skeletal_warp": check_gradients(build, named, n_coords=n_coords, seed=31)}

    def build_nr():
        dx = params.nonrigid.offsets(T.Tensor(pts), pose.rotations)
        return T.tsum(T.sin(dx))

    out["nonrigid_offset"] = check_gradients(
        build_nr, params.nonrigid.named_tensors(), n_coords=n_coords, seed=37
    )
    return out


def check_autodiff(n_coords: int = 8) -> dict:
    rng = np.random.default_rng(6)
    a = T.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    c = T.Tensor(rng.normal(size=(5, 3)), requires_grad=True)

    def build():
        h = T.relu(T.matmul(a, b) + c)
        s = T.softmax(h, axis=1)
        z = T.sigmoid(T.tsum(s * c, axis=0))
        return T.tsum(T.log(z + 1.1) * T.exp(z * 0.3)) + T.tsum(T.sqrt(T.clamp(h, 1e-3, None) + 1.0))

    named = {"a": a, "b": b, "c": c}
    return {"composite_graph": check_gradients(build, named, n_coords=n_coords, seed=41)}


SUITES = {
    "autodiff": check_autodiff,
    "motionfield": check_motionfield,
    "canonicalfield": check_canonicalfield,
    "renderer": check_renderer,
    "losses": check_losses,
}


def run(module: str = "all") -> dict:
    if module == "all":
        names = list(SUITES)
    elif module in SUITES:
        names = [module]
    else:
        raise ValueError(f"unknown gradcheck module {module!r}; options: all, {', '.join(SUITES)}")
    report = {}
    overall = True
    for name in names:
        res = SUITES[name]()
        report[name] = res
        for check in res.values():
            for entry in check.values():
                overall &= entry["ok"]
    report["ok"] = overall
    return report
