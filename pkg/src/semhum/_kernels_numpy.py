"""Pure-numpy reference kernels.

These mirror the numba kernels op-for-op: corner loops run in the same
order, dot products expand into the same component sums, and scatter
accumulations happen in the same sequence, so both backends produce
bit-identical floats.
"""
from __future__ import annotations

import numpy as np

_CORNERS = [(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)]
_TMIN = 1e-9


def _dot3(p, q):
    return p[:, 0] * q[:, 0] + p[:, 1] * q[:, 1] + p[:, 2] * q[:, 2]


def trilinear_forward(vol, pts, origin, step):
    """Trilinear interpolation of a (C, nx, ny, nz) grid at M points.

    Grid nodes sit at origin + index*step per axis.  Points outside the
    node lattice yield zeros (the caller composes its own out-of-support
    value).  Returns (out (M,C), i0 (M,3) int64, frac (M,3), inside (M,)).
    """
    c, nx, ny, nz = vol.shape
    m = pts.shape[0]
    dims = np.array([nx, ny, nz], dtype=np.float64)
    g = (pts - origin[None, :]) / step[None, :]
    inside = np.all((g >= 0.0) & (g <= dims[None, :] - 1.0), axis=1)
    i0 = np.floor(g).astype(np.int64)
    np.clip(i0, 0, (dims - 2).astype(np.int64)[None, :], out=i0)
    frac = g - i0

    vol2 = vol.reshape(c, -1)
    out = np.zeros((m, c), dtype=np.float64)
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    for ci, cj, ck in _CORNERS:
        wx = fx if ci else 1.0 - fx
        wy = fy if cj else 1.0 - fy
        wz = fz if ck else 1.0 - fz
        w = wx * wy * wz
        flat = (i0[:, 0] + ci) * (ny * nz) + (i0[:, 1] + cj) * nz + (i0[:, 2] + ck)
        out += vol2[:, flat].T * w[:, None]
    out[~inside] = 0.0
    return out, i0, frac, inside


def trilinear_backward_vol(gout, i0, frac, inside, shape):
    """Adjoint of trilinear_forward w.r.t. the grid: scatter-add."""
    c, nx, ny, nz = shape
    gvol = np.zeros(shape, dtype=np.float64)
    gvol2 = gvol.reshape(c, -1)
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    ins = inside.astype(np.float64)
    for ci, cj, ck in _CORNERS:
        wx = fx if ci else 1.0 - fx
        wy = fy if cj else 1.0 - fy
        wz = fz if ck else 1.0 - fz
        w = (wx * wy * wz) * ins
        flat = (i0[:, 0] + ci) * (ny * nz) + (i0[:, 1] + cj) * nz + (i0[:, 2] + ck)
        for ch in range(c):
            np.add.at(gvol2[ch], flat, gout[:, ch] * w)
    return gvol


def trilinear_backward_pts(gout, vol, i0, frac, inside, inv_step):
    """Adjoint of trilinear_forward w.r.t. the query points."""
    c, nx, ny, nz = vol.shape
    m = gout.shape[0]
    vol2 = vol.reshape(c, -1)
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    dfx = np.zeros(m, dtype=np.float64)
    dfy = np.zeros(m, dtype=np.float64)
    dfz = np.zeros(m, dtype=np.float64)
    for ci, cj, ck in _CORNERS:
        wx = fx if ci else 1.0 - fx
        wy = fy if cj else 1.0 - fy
        wz = fz if ck else 1.0 - fz
        sx = 1.0 if ci else -1.0
        sy = 1.0 if cj else -1.0
        sz = 1.0 if ck else -1.0
        flat = (i0[:, 0] + ci) * (ny * nz) + (i0[:, 1] + cj) * nz + (i0[:, 2] + ck)
        vals = vol2[:, flat]
        s = np.zeros(m, dtype=np.float64)
        for ch in range(c):
            s = s + gout[:, ch] * vals[ch]
        dfx = dfx + sx * ((wy * wz) * s)
        dfy = dfy + sy * ((wx * wz) * s)
        dfz = dfz + sz * ((wx * wy) * s)
    dpts = np.empty((m, 3), dtype=np.float64)
    dpts[:, 0] = dfx * inv_step[0]
    dpts[:, 1] = dfy * inv_step[1]
    dpts[:, 2] = dfz * inv_step[2]
    dpts[~inside] = 0.0
    return dpts


def gemm_rows(a, b):
    """Row-deterministic matmul for inference: each output element is
    accumulated in a fixed sequential k order, so results do not depend on
    how the rows are batched (BLAS gemm does not guarantee that).

    Operands are made contiguous first (einsum reorders its loops around
    strides, changing the accumulation order on transposed views), and
    single-column right operands are padded (einsum special-cases n == 1
    into a dot kernel whose reduction order differs from the generic loop).
    """
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    if b.shape[1] == 1:
        padded = np.concatenate([b, np.zeros_like(b)], axis=1)
        return np.einsum("mk,kn->mn", a, padded)[:, :1]
    return np.einsum("mk,kn->mn", a, b)


def capsule_hits(orig, dirs, seg_a, seg_b, radii):
    """Nearest ray/capsule intersection over K capsules.

    Returns (t (R,), bone (R,) int64, normal (R,3)); misses carry t=inf,
    bone=-1, normal=0.  Candidate surfaces per bone are tested in the
    fixed order cylinder side, cap at a, cap at b, with strict `<` best
    updates, so ties resolve identically across backends.
    """
    r_n = orig.shape[0]
    k_n = seg_a.shape[0]
    best_t = np.full(r_n, np.inf)
    best_bone = np.full(r_n, -1, dtype=np.int64)
    best_nrm = np.zeros((r_n, 3), dtype=np.float64)

    for k in range(k_n):
        a = seg_a[k]
        b = seg_b[k]
        r = radii[k]
        u = b - a
        length = np.sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2])
        degenerate = length < 1e-12
        un = np.zeros(3) if degenerate else u / length

        q = orig - a[None, :]
        qu = q[:, 0] * un[0] + q[:, 1] * un[1] + q[:, 2] * un[2]
        du = dirs[:, 0] * un[0] + dirs[:, 1] * un[1] + dirs[:, 2] * un[2]
        qp = q - qu[:, None] * un[None, :]
        dp = dirs - du[:, None] * un[None, :]

        if not degenerate:
            aa = _dot3(dp, dp)
            bb = _dot3(qp, dp)
            cc = _dot3(qp, qp) - r * r
            disc = bb * bb - aa * cc
            ok = (aa > 1e-14) & (disc >= 0.0)
            sq = np.sqrt(np.where(ok, disc, 0.0))
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = np.where(ok, (-bb - sq) / aa, np.inf)
                t2 = np.where(ok, (-bb + sq) / aa, np.inf)
            for tc in (t1, t2):
                s = qu + tc * du
                hit = ok & (tc > _TMIN) & (tc < best_t) & (s >= 0.0) & (s <= length)
                if np.any(hit):
                    p = orig[hit] + tc[hit, None] * dirs[hit]
                    axis_pt = a[None, :] + s[hit, None] * un[None, :]
                    best_t[hit] = tc[hit]
                    best_bone[hit] = k
                    best_nrm[hit] = (p - axis_pt) / r

        for cap_i in (0, 1):
            if degenerate and cap_i == 1:
                continue
            center = a if cap_i == 0 else b
            oc = orig - center[None, :]
            b2 = _dot3(oc, dirs)
            c2 = _dot3(oc, oc) - r * r
            disc = b2 * b2 - c2
            ok = disc >= 0.0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t1 = np.where(ok, -b2 - sq, np.inf)
            t2 = np.where(ok, -b2 + sq, np.inf)
            for tc in (t1, t2):
                s = qu + tc * du
                if degenerate:
                    side = np.ones(r_n, dtype=bool)
                elif cap_i == 0:
                    side = s < 0.0
                else:
                    side = s > length
                hit = ok & (tc > _TMIN) & (tc < best_t) & side
                if np.any(hit):
                    p = orig[hit] + tc[hit, None] * dirs[hit]
                    best_t[hit] = tc[hit]
                    best_bone[hit] = k
                    best_nrm[hit] = (p - center[None, :]) / r

    return best_t, best_bone, best_nrm
