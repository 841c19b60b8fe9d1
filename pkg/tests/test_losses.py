import numpy as np
import pytest

from semhum import bodymodel as bm
from semhum import losses as ls
from semhum import motionfield as mf
from semhum import tensor as T
from semhum.errors import ValidationError


def test_mse_fixpoints_and_oracle():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(8, 3))
    assert float(ls.mse_loss(T.Tensor(x), x).data) == 0.0
    one = float(ls.mse_loss(T.Tensor(np.zeros((5, 3))), np.ones((5, 3))).data)
    assert one == 1.0
    a = rng.uniform(size=(12, 3))
    b = rng.uniform(size=(12, 3))
    got = float(ls.mse_loss(T.Tensor(a), b).data)
    acc = 0.0
    for i in range(12):
        for c in range(3):
            acc += (a[i, c] - b[i, c]) ** 2
    assert abs(got - acc / 36.0) < 1e-12
    with pytest.raises(ValidationError, match="mse"):
        ls.mse_loss(T.Tensor(np.zeros((3, 3))), np.zeros((4, 3)))


def test_surface_loss_zero_at_canonical_pose():
    skel = bm.humanoid4()
    vol = mf.init_weight_volume(skel)
    pose = bm.tpose(skel)
    canon = bm.generate_surface(skel, pose, 20)
    obs = bm.generate_surface(skel, pose, 20)
    loss = ls.surface_loss(obs, pose, mf.MotionParams(skel, vol), canon)
    assert abs(float(loss.data)) < 1e-12


def test_surface_loss_unit_displacement():
    skel = bm.humanoid4()
    vol = mf.init_weight_volume(skel)
    pose = bm.tpose(skel)  # identity warp
    canon = bm.generate_surface(skel, pose, 10)
    shifted = bm.SurfaceVertices(
        positions=canon.positions + np.array([1.0, 0.0, 0.0]),
        space="observation",
        bone_ids=canon.bone_ids,
    )
    # shifted vertices may leave the volume support; they pass through the
    # background branch unchanged, still one unit from their rest spots
    loss = ls.surface_loss(shifted, pose, mf.MotionParams(skel, vol), canon)
    assert abs(float(loss.data) - 1.0) < 1e-9


def test_surface_loss_matches_vertexwise_oracle():
    skel = bm.humanoid4()
    rng = np.random.default_rng(1)
    vol = mf.init_weight_volume(skel, resolution=16)
    rots = rng.normal(0.0, 0.35, size=(4, 3))
    pose = bm.Pose(joints=bm.posed_joints(skel, skel.rest_joints[0], rots), rotations=rots)
    canon = bm.generate_surface(skel, bm.tpose(skel), 12)
    obs = bm.generate_surface(skel, pose, 12)
    loss = float(ls.surface_loss(obs, pose, mf.MotionParams(skel, vol), canon).data)

    # independent oracle: per-vertex blend math with plain numpy
    bt = bm.bone_transforms(skel, pose)
    probs_grid = vol.softmaxed().data
    total = 0.0
    for v, v_t in zip(obs.positions, canon.positions):
        ys = [bt.rotations[i] @ v + bt.translations[i] for i in range(skel.k)]
        ws = []
        for i, y in enumerate(ys):
            w_all = mf.sample_canonical_weights(vol, y[None]).data[0]
            ws.append(w_all[i])
        d = sum(ws)
        if d > mf.EPS_W:
            warped = v + sum(w / d * (y - v) for w, y in zip(ws, ys))
        else:
            warped = v
        total += float(((warped - v_t) ** 2).sum())
    assert abs(loss - total / obs.positions.shape[0]) < 1e-9
    with pytest.raises(ValidationError, match="vertex counts"):
        ls.surface_loss(
            bm.SurfaceVertices(canon.positions[:5], "observation"),
            pose,
            mf.MotionParams(skel, vol),
            canon,
        )


def test_silhouette_fixpoints_and_clamp():
    mask = np.array([1.0, 0.0, 1.0, 1.0])
    assert float(ls.silhouette_loss(T.Tensor(mask.copy()), mask).data) == 0.0
    # over-one alpha on a mask-1 pixel clamps to 1 and contributes nothing
    a = np.array([1.7, 0.0, 1.0, 1.0])
    assert float(ls.silhouette_loss(T.Tensor(a), mask).data) == 0.0
    rng = np.random.default_rng(2)
    alpha = rng.uniform(0.0, 1.4, size=20)
    m = (rng.random(20) < 0.5).astype(float)
    got = float(ls.silhouette_loss(T.Tensor(alpha), m).data)
    acc = 0.0
    for i in range(20):
        clamped = min(alpha[i], 1.0)
        acc += (clamped - m[i]) ** 2
    assert abs(got - acc / 20.0) < 1e-12
    with pytest.raises(ValidationError, match="0 or 1"):
        ls.silhouette_loss(T.Tensor(alpha), np.full(20, 0.5))


def test_silhouette_clamped_gradient_exactly_zero():
    alpha = T.Tensor(np.array([1.3, 0.6]), requires_grad=True)
    with T.Tape() as tape:
        T.backward(ls.silhouette_loss(alpha, np.array([1.0, 1.0])), tape)
    assert alpha.grad[0] == 0.0
    assert alpha.grad[1] != 0.0


def test_parsing_loss_examples():
    # saturated logits
    logits = np.full((3, 5), -50.0)
    labels = np.array([2, 0, 4])
    for i, l in enumerate(labels):
        logits[i, l] = 50.0
    loss = float(ls.parsing_loss(T.Tensor(logits), labels).data)
    assert loss < 1e-10
    # uniform logits -> exactly ln L
    uni = float(ls.parsing_loss(T.Tensor(np.zeros((8, 5))), np.zeros(8, dtype=int)).data)
    assert uni == np.log(5.0)
    for l_count in (2, 3, 9):
        got = float(
            ls.parsing_loss(T.Tensor(np.zeros((4, l_count))), np.zeros(4, dtype=int)).data
        )
        assert got == np.log(float(l_count))


def test_parsing_loss_valid_flags_and_oracle():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(10, 5))
    labels = rng.integers(0, 5, size=10)
    valid = rng.random(10) < 0.7
    got = float(ls.parsing_loss(T.Tensor(logits), labels, valid).data)
    acc = []
    for i in range(10):
        if not valid[i]:
            continue
        z = logits[i]
        p = np.exp(z - z.max())
        p /= p.sum()
        acc.append(-np.log(p[labels[i]]))
    assert abs(got - np.mean(acc)) < 1e-10
    none = ls.parsing_loss(T.Tensor(logits), labels, np.zeros(10, dtype=bool))
    assert float(none.data) == 0.0
    with pytest.raises(ValueError, match="out of range"):
        ls.parsing_loss(T.Tensor(logits), np.array([0, 1, 2, 3, 9, 0, 1, 2, 3, 4]))


def test_total_loss_weighting():
    terms = {
        "mse": T.Tensor(0.5),
        "silhouette": T.Tensor(0.25),
        "surface": T.Tensor(0.125),
        "parsing": T.Tensor(2.0),
    }
    zero = ls.total_loss(terms, ls.LossWeights(perceptual=0, mse=0, silhouette=0, surface=0, parsing=0))
    assert float(zero.data) == 0.0
    only = ls.total_loss(terms, ls.LossWeights(perceptual=0, mse=1.0, silhouette=0, surface=0, parsing=0))
    assert float(only.data) == 0.5
    rng = np.random.default_rng(4)
    for _ in range(10):
        lam = rng.uniform(0.0, 2.0, size=4)
        w = ls.LossWeights(perceptual=0.0, mse=lam[0], silhouette=lam[1], surface=lam[2], parsing=lam[3])
        got = float(ls.total_loss(terms, w).data)
        expect = (
            lam[0] * 0.5 + lam[1] * 0.25 + lam[2] * 0.125 + lam[3] * 2.0
        )
        assert abs(got - expect) < 1e-12
    with pytest.raises(ValidationError, match=">= 0"):
        ls.LossWeights(mse=-1.0)


def test_perceptual_hook_default_zero_and_plugin():
    rendered = T.Tensor(np.zeros((4, 3)))
    assert float(ls.perceptual_term(rendered, np.zeros((4, 3))).data) == 0.0
    calls = []

    def plugin(r, t):
        calls.append(1)
        return T.tsum(r * 0.0) + 7.0

    ls.set_perceptual_plugin(plugin)
    try:
        val = ls.perceptual_term(rendered, np.zeros((4, 3)))
        assert float(val.data) == 7.0 and calls
    finally:
        ls.set_perceptual_plugin(None)


def test_loss_report_jsonl_schema():
    rep = ls.LossReport(iteration=3, mse=0.1, silhouette=0.2, surface=0.3, parsing=0.4, total=0.5)
    obj = rep.to_json_obj()
    assert list(obj.keys()) == ["iter", "mse", "silhouette", "surface", "parsing", "total"]
