"""Numba-jitted kernels.

Arithmetic mirrors _kernels_numpy exactly (same corner order, same
component-expanded dot products, same accumulation sequence) so results
are bit-identical to the fallback.
"""
from __future__ import annotations

import numpy as np
from numba import njit, prange

_TMIN = 1e-9


@njit(cache=True)
def _trilinear_forward_jit(vol2, pts, origin, step, nx, ny, nz, out, i0, frac, inside):
    m = pts.shape[0]
    c = vol2.shape[0]
    for p in range(m):
        ins = True
        for ax in range(3):
            n_ax = nx if ax == 0 else (ny if ax == 1 else nz)
            g = (pts[p, ax] - origin[ax]) / step[ax]
            if not (g >= 0.0 and g <= n_ax - 1.0):
                ins = False
            ii = int(np.floor(g))
            if ii < 0:
                ii = 0
            if ii > n_ax - 2:
                ii = n_ax - 2
            i0[p, ax] = ii
            frac[p, ax] = g - ii
        inside[p] = ins
        fx = frac[p, 0]
        fy = frac[p, 1]
        fz = frac[p, 2]
        if ins:
            for ci in range(2):
                wx = fx if ci else 1.0 - fx
                for cj in range(2):
                    wy = fy if cj else 1.0 - fy
                    for ck in range(2):
                        wz = fz if ck else 1.0 - fz
                        w = wx * wy * wz
                        flat = (
                            (i0[p, 0] + ci) * (ny * nz)
                            + (i0[p, 1] + cj) * nz
                            + (i0[p, 2] + ck)
                        )
                        for ch in range(c):
                            out[p, ch] += vol2[ch, flat] * w


def trilinear_forward(vol, pts, origin, step):
    c, nx, ny, nz = vol.shape
    m = pts.shape[0]
    out = np.zeros((m, c), dtype=np.float64)
    i0 = np.zeros((m, 3), dtype=np.int64)
    frac = np.zeros((m, 3), dtype=np.float64)
    inside = np.zeros(m, dtype=np.bool_)
    _trilinear_forward_jit(
        np.ascontiguousarray(vol.reshape(c, -1)),
        np.ascontiguousarray(pts),
        np.ascontiguousarray(origin),
        np.ascontiguousarray(step),
        nx,
        ny,
        nz,
        out,
        i0,
        frac,
        inside,
    )
    return out, i0, frac, inside


@njit(cache=True)
def _trilinear_backward_vol_jit(gout, i0, frac, inside, ny, nz, gvol2):
    m = gout.shape[0]
    c = gout.shape[1]
    for ci in range(2):
        for cj in range(2):
            for ck in range(2):
                for ch in range(c):
                    for p in range(m):
                        if not inside[p]:
                            continue
                        fx = frac[p, 0]
                        fy = frac[p, 1]
                        fz = frac[p, 2]
                        wx = fx if ci else 1.0 - fx
                        wy = fy if cj else 1.0 - fy
                        wz = fz if ck else 1.0 - fz
                        w = (wx * wy * wz) * 1.0
                        flat = (
                            (i0[p, 0] + ci) * (ny * nz)
                            + (i0[p, 1] + cj) * nz
                            + (i0[p, 2] + ck)
                        )
                        gvol2[ch, flat] += gout[p, ch] * w
    return gvol2


def trilinear_backward_vol(gout, i0, frac, inside, shape):
    c, nx, ny, nz = shape
    gvol = np.zeros(shape, dtype=np.float64)
    _trilinear_backward_vol_jit(
        np.ascontiguousarray(gout), i0, frac, inside, ny, nz, gvol.reshape(c, -1)
    )
    return gvol


@njit(cache=True)
def _trilinear_backward_pts_jit(gout, vol2, i0, frac, inside, inv_step, ny, nz, dpts):
    m = gout.shape[0]
    c = gout.shape[1]
    for p in range(m):
        if not inside[p]:
            continue
        fx = frac[p, 0]
        fy = frac[p, 1]
        fz = frac[p, 2]
        dfx = 0.0
        dfy = 0.0
        dfz = 0.0
        for ci in range(2):
            wx = fx if ci else 1.0 - fx
            sx = 1.0 if ci else -1.0
            for cj in range(2):
                wy = fy if cj else 1.0 - fy
                sy = 1.0 if cj else -1.0
                for ck in range(2):
                    wz = fz if ck else 1.0 - fz
                    sz = 1.0 if ck else -1.0
                    flat = (
                        (i0[p, 0] + ci) * (ny * nz)
                        + (i0[p, 1] + cj) * nz
                        + (i0[p, 2] + ck)
                    )
                    s = 0.0
                    for ch in range(c):
                        s = s + gout[p, ch] * vol2[ch, flat]
                    dfx = dfx + sx * ((wy * wz) * s)
                    dfy = dfy + sy * ((wx * wz) * s)
                    dfz = dfz + sz * ((wx * wy) * s)
        dpts[p, 0] = dfx * inv_step[0]
        dpts[p, 1] = dfy * inv_step[1]
        dpts[p, 2] = dfz * inv_step[2]


def trilinear_backward_pts(gout, vol, i0, frac, inside, inv_step):
    c = vol.shape[0]
    ny, nz = vol.shape[2], vol.shape[3]
    m = gout.shape[0]
    dpts = np.zeros((m, 3), dtype=np.float64)
    _trilinear_backward_pts_jit(
        np.ascontiguousarray(gout),
        np.ascontiguousarray(vol.reshape(c, -1)),
        i0,
        frac,
        inside,
        np.ascontiguousarray(inv_step),
        ny,
        nz,
        dpts,
    )
    return dpts


@njit(cache=True, parallel=True)
def _gemm_rows_jit(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in prange(m):
        for kk in range(k):
            aik = a[i, kk]
            for j in range(n):
                out[i, j] += aik * b[kk, j]


def gemm_rows(a, b):
    """Row-deterministic matmul: out[i,j] accumulates over k in a fixed
    order per element, independent of the row batching."""
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    _gemm_rows_jit(np.ascontiguousarray(a), np.ascontiguousarray(b), out)
    return out


@njit(cache=True)
def _capsule_hits_jit(orig, dirs, seg_a, seg_b, radii, best_t, best_bone, best_nrm):
    r_n = orig.shape[0]
    k_n = seg_a.shape[0]
    for p in range(r_n):
        ox, oy, oz = orig[p, 0], orig[p, 1], orig[p, 2]
        dx, dy, dz = dirs[p, 0], dirs[p, 1], dirs[p, 2]
        for k in range(k_n):
            ax, ay, az = seg_a[k, 0], seg_a[k, 1], seg_a[k, 2]
            bx, by, bz = seg_b[k, 0], seg_b[k, 1], seg_b[k, 2]
            r = radii[k]
            ux, uy, uz = bx - ax, by - ay, bz - az
            length = np.sqrt(ux * ux + uy * uy + uz * uz)
            degenerate = length < 1e-12
            if degenerate:
                unx = uny = unz = 0.0
            else:
                unx, uny, unz = ux / length, uy / length, uz / length

            qx, qy, qz = ox - ax, oy - ay, oz - az
            qu = qx * unx + qy * uny + qz * unz
            du = dx * unx + dy * uny + dz * unz
            qpx, qpy, qpz = qx - qu * unx, qy - qu * uny, qz - qu * unz
            dpx, dpy, dpz = dx - du * unx, dy - du * uny, dz - du * unz

            if not degenerate:
                aa = dpx * dpx + dpy * dpy + dpz * dpz
                bb = qpx * dpx + qpy * dpy + qpz * dpz
                cc = qpx * qpx + qpy * qpy + qpz * qpz - r * r
                disc = bb * bb - aa * cc
                if aa > 1e-14 and disc >= 0.0:
                    sq = np.sqrt(disc)
                    for root in range(2):
                        tc = (-bb - sq) / aa if root == 0 else (-bb + sq) / aa
                        s = qu + tc * du
                        if (
                            tc > _TMIN
                            and tc < best_t[p]
                            and s >= 0.0
                            and s <= length
                        ):
                            px = ox + tc * dx
                            py = oy + tc * dy
                            pz = oz + tc * dz
                            best_t[p] = tc
                            best_bone[p] = k
                            best_nrm[p, 0] = (px - (ax + s * unx)) / r
                            best_nrm[p, 1] = (py - (ay + s * uny)) / r
                            best_nrm[p, 2] = (pz - (az + s * unz)) / r

            for cap_i in range(2):
                if degenerate and cap_i == 1:
                    continue
                if cap_i == 0:
                    cx, cy, cz = ax, ay, az
                else:
                    cx, cy, cz = bx, by, bz
                ocx, ocy, ocz = ox - cx, oy - cy, oz - cz
                b2 = ocx * dx + ocy * dy + ocz * dz
                c2 = ocx * ocx + ocy * ocy + ocz * ocz - r * r
                disc = b2 * b2 - c2
                if disc < 0.0:
                    continue
                sq = np.sqrt(disc)
                for root in range(2):
                    tc = -b2 - sq if root == 0 else -b2 + sq
                    s = qu + tc * du
                    if degenerate:
                        side = True
                    elif cap_i == 0:
                        side = s < 0.0
                    else:
                        side = s > length
                    if tc > _TMIN and tc < best_t[p] and side:
                        px = ox + tc * dx
                        py = oy + tc * dy
                        pz = oz + tc * dz
                        best_t[p] = tc
                        best_bone[p] = k
                        best_nrm[p, 0] = (px - cx) / r
                        best_nrm[p, 1] = (py - cy) / r
                        best_nrm[p, 2] = (pz - cz) / r


def capsule_hits(orig, dirs, seg_a, seg_b, radii):
    r_n = orig.shape[0]
    best_t = np.full(r_n, np.inf)
    best_bone = np.full(r_n, -1, dtype=np.int64)
    best_nrm = np.zeros((r_n, 3), dtype=np.float64)
    _capsule_hits_jit(
        np.ascontiguousarray(orig),
        np.ascontiguousarray(dirs),
        np.ascontiguousarray(seg_a),
        np.ascontiguousarray(seg_b),
        np.ascontiguousarray(radii),
        best_t,
        best_bone,
        best_nrm,
    )
    return best_t, best_bone, best_nrm
