"""Numba kernels for tile binning and alpha compositing.

Splat arrays passed here are already depth-sorted and restricted to visible
splats; a splat is identified by its position in that sorted order.

Slot buffers: every (pixel, contributing splat) pair owns one slot. Slots are
laid out pixel-major in row-major pixel order and front-to-back within a
pixel, so their layout does not depend on the tiling or the thread schedule.
"""

from __future__ import annotations

import numba
import numpy as np

N_SLOT_GRAD = 9  # d/dmean2d (2), d/dconic (3), d/dopacity (1), d/dcolour (3)


@numba.njit(cache=True)
def bin_splats(bbox, tile_size, tiles_x, tiles_y):
    """Counting sort of splats into tiles; per-tile lists stay in depth order."""
    n = bbox.shape[0]
    ntiles = tiles_x * tiles_y
    counts = np.zeros(ntiles + 1, dtype=np.int64)
    for i in range(n):
        tx0 = bbox[i, 0] // tile_size
        tx1 = bbox[i, 1] // tile_size
        ty0 = bbox[i, 2] // tile_size
        ty1 = bbox[i, 3] // tile_size
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int64)
    for i in range(n):
        tx0 = bbox[i, 0] // tile_size
        tx1 = bbox[i, 1] // tile_size
        ty0 = bbox[i, 2] // tile_size
        ty1 = bbox[i, 3] // tile_size
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * tiles_x + tx
                ids[fill[t]] = i
                fill[t] += 1
    return offsets, ids


@numba.njit(inline="always")
def _mahalanobis(px, py, k, mean2d, conic):
    dx = px - mean2d[k, 0]
    dy = py - mean2d[k, 1]
    return dx, dy, conic[k, 0] * dx * dx + 2.0 * conic[k, 1] * dx * dy + conic[k, 2] * dy * dy


@numba.njit(inline="always")
def _row_span(lo, hi, py, k, mean2d, conic, cutoff2):
    # Pixel columns of row py that can pass m <= cutoff2, clipped to [lo, hi]. The span
    # is widened slightly so the exact per-pixel test alone decides boundary pixels.
    a = conic[k, 0]
    if a <= 0.0:
        return lo, hi
    dy = py - mean2d[k, 1]
    bdy = conic[k, 1] * dy
    disc = bdy * bdy - a * (conic[k, 2] * dy * dy - cutoff2)
    if disc < 0.0:
        return lo, lo - 1
    r = np.sqrt(disc) / a
    c = mean2d[k, 0] - bdy / a
    return max(lo, int(np.ceil(c - r - 1e-3))), min(hi, int(np.floor(c + r + 1e-3)))


@numba.njit(parallel=True, cache=True)
def forward_tiles(offsets, ids, mean2d, conic, bbox, colour, opacity, depth, background,
                  width, height, tile_size, tiles_x, alpha_max, t_min, cutoff2):
    # Within a tile the loop is splat-major: each splat visits only the pixels of
    # its bbox inside the tile. Every pixel still sees its contributors front to
    # back with the same arithmetic, so results match a per-pixel scan exactly.
    out_c = np.zeros((height, width, 3))
    out_a = np.zeros((height, width))
    out_d = np.zeros((height, width))
    out_t = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    n_clamped = np.zeros((height, width), dtype=np.int64)
    ntiles = offsets.shape[0] - 1
    for t in numba.prange(ntiles):
        x0 = (t % tiles_x) * tile_size
        y0 = (t // tiles_x) * tile_size
        x1 = min(x0 + tile_size, width) - 1
        y1 = min(y0 + tile_size, height) - 1
        done = np.zeros((tile_size, tile_size), dtype=np.bool_)
        n_done = 0
        n_pix = (x1 - x0 + 1) * (y1 - y0 + 1)
        for j in range(offsets[t], offsets[t + 1]):
            if n_done == n_pix:
                break
            k = ids[j]
            for py in range(max(bbox[k, 2], y0), min(bbox[k, 3], y1) + 1):
                xa, xb = _row_span(max(bbox[k, 0], x0), min(bbox[k, 1], x1), py, k, mean2d, conic, cutoff2)
                for px in range(xa, xb + 1):
                    if done[py - y0, px - x0]:
                        continue
                    dx, dy, m = _mahalanobis(px, py, k, mean2d, conic)
                    if m > cutoff2:
                        continue
                    alpha = opacity[k] * np.exp(-0.5 * m)
                    if alpha > alpha_max:
                        alpha = alpha_max
                        n_clamped[py, px] += 1
                    T = out_t[py, px]
                    w = alpha * T
                    out_c[py, px, 0] += colour[k, 0] * w
                    out_c[py, px, 1] += colour[k, 1] * w
                    out_c[py, px, 2] += colour[k, 2] * w
                    out_d[py, px] += depth[k] * w
                    out_a[py, px] += w
                    T = T * (1.0 - alpha)
                    out_t[py, px] = T
                    n_contrib[py, px] += 1
                    if T < t_min:
                        done[py - y0, px - x0] = True
                        n_done += 1
        for py in range(y0, y1 + 1):
            for px in range(x0, x1 + 1):
                T = out_t[py, px]
                out_c[py, px, 0] += T * background[0]
                out_c[py, px, 1] += T * background[1]
                out_c[py, px, 2] += T * background[2]
                acc = out_a[py, px]
                out_d[py, px] = out_d[py, px] / acc if acc > 0.0 else 0.0
    return out_c, out_a, out_d, out_t, n_contrib, n_clamped


@numba.njit(parallel=True, cache=True)
def backward_tiles(offsets, ids, mean2d, conic, bbox, colour, opacity, background,
                   width, height, tile_size, tiles_x, alpha_max, t_min, cutoff2,
                   grad_img, slot_offsets, slot_id, slot_grad, slot_alpha, slot_trans):
    ntiles = offsets.shape[0] - 1
    for t in numba.prange(ntiles):
        x0 = (t % tiles_x) * tile_size
        y0 = (t // tiles_x) * tile_size
        x1 = min(x0 + tile_size, width) - 1
        y1 = min(y0 + tile_size, height) - 1
        # replay the forward pass (splat-major), recording alpha and transmittance per slot
        trans = np.ones((tile_size, tile_size))
        cnt = np.zeros((tile_size, tile_size), dtype=np.int64)
        done = np.zeros((tile_size, tile_size), dtype=np.bool_)
        n_done = 0
        n_pix = (x1 - x0 + 1) * (y1 - y0 + 1)
        for j in range(offsets[t], offsets[t + 1]):
            if n_done == n_pix:
                break
            k = ids[j]
            for py in range(max(bbox[k, 2], y0), min(bbox[k, 3], y1) + 1):
                xa, xb = _row_span(max(bbox[k, 0], x0), min(bbox[k, 1], x1), py, k, mean2d, conic, cutoff2)
                for px in range(xa, xb + 1):
                    ly = py - y0
                    lx = px - x0
                    if done[ly, lx]:
                        continue
                    dx, dy, m = _mahalanobis(px, py, k, mean2d, conic)
                    if m > cutoff2:
                        continue
                    alpha = opacity[k] * np.exp(-0.5 * m)
                    if alpha > alpha_max:
                        alpha = alpha_max
                    s = slot_offsets[py * width + px] + cnt[ly, lx]
                    T = trans[ly, lx]
                    slot_id[s] = k
                    slot_alpha[s] = alpha
                    slot_trans[s] = T
                    T = T * (1.0 - alpha)
                    trans[ly, lx] = T
                    cnt[ly, lx] += 1
                    if T < t_min:
                        done[ly, lx] = True
                        n_done += 1
        for py in range(y0, y1 + 1):
            for px in range(x0, x1 + 1):
                base = slot_offsets[py * width + px]
                g0 = grad_img[py, px, 0]
                g1 = grad_img[py, px, 1]
                g2 = grad_img[py, px, 2]
                a0 = background[0]
                a1 = background[1]
                a2 = background[2]
                for c in range(cnt[py - y0, px - x0] - 1, -1, -1):
                    s = base + c
                    k = slot_id[s]
                    alpha = slot_alpha[s]
                    Tk = slot_trans[s]
                    c0 = colour[k, 0]
                    c1 = colour[k, 1]
                    c2 = colour[k, 2]
                    w = alpha * Tk
                    slot_grad[s, 6] = w * g0
                    slot_grad[s, 7] = w * g1
                    slot_grad[s, 8] = w * g2
                    dl_dalpha = Tk * (g0 * (c0 - a0) + g1 * (c1 - a1) + g2 * (c2 - a2))
                    a0 = alpha * c0 + (1.0 - alpha) * a0
                    a1 = alpha * c1 + (1.0 - alpha) * a1
                    a2 = alpha * c2 + (1.0 - alpha) * a2
                    dx, dy, m = _mahalanobis(px, py, k, mean2d, conic)
                    gauss = np.exp(-0.5 * m)
                    if opacity[k] * gauss > alpha_max:
                        # clamped: no gradient through opacity or footprint
                        for q in range(6):
                            slot_grad[s, q] = 0.0
                        continue
                    dl_dm = -0.5 * opacity[k] * gauss * dl_dalpha
                    slot_grad[s, 0] = -2.0 * (conic[k, 0] * dx + conic[k, 1] * dy) * dl_dm
                    slot_grad[s, 1] = -2.0 * (conic[k, 1] * dx + conic[k, 2] * dy) * dl_dm
                    slot_grad[s, 2] = dx * dx * dl_dm
                    slot_grad[s, 3] = 2.0 * dx * dy * dl_dm
                    slot_grad[s, 4] = dy * dy * dl_dm
                    slot_grad[s, 5] = gauss * dl_dalpha


@numba.njit(cache=True)
def reduce_slots(slot_id, slot_grad, n):
    """Fixed-order (slot order) accumulation of per-slot gradients per splat."""
    out = np.zeros((n, slot_grad.shape[1]))
    for s in range(slot_id.shape[0]):
        k = slot_id[s]
        for q in range(slot_grad.shape[1]):
            out[k, q] += slot_grad[s, q]
    return out


@numba.njit(inline="always")
def _rotmat(qw, qx, qy, qz, R):
    n = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    w = qw / n
    x = qx / n
    y = qy / n
    z = qz / n
    R[0, 0] = 1 - 2 * (y * y + z * z)
    R[0, 1] = 2 * (x * y - w * z)
    R[0, 2] = 2 * (x * z + w * y)
    R[1, 0] = 2 * (x * y + w * z)
    R[1, 1] = 1 - 2 * (x * x + z * z)
    R[1, 2] = 2 * (y * z - w * x)
    R[2, 0] = 2 * (x * z - w * y)
    R[2, 1] = 2 * (y * z + w * x)
    R[2, 2] = 1 - 2 * (x * x + y * y)
    return n


@numba.njit(inline="always")
def _view_cov(R, s, Wp, M):
    """M = Wp (R^T diag(s) R) Wp^T."""
    S = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for k in range(3):
                acc += R[k, i] * s[k] * R[k, j]
            S[i, j] = acc
    T = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for k in range(3):
                acc += Wp[i, k] * S[k, j]
            T[i, j] = acc
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for k in range(3):
                acc += T[i, k] * Wp[j, k]
            M[i, j] = acc


@numba.njit(parallel=True, cache=True)
def project_gaussians(means, quats, scales, Wp, tp, fx, fy, cx, cy, width, height,
                      z_near, blur, cutoff):
    n = means.shape[0]
    view = np.zeros((n, 3))
    mean2d = np.zeros((n, 2))
    cov2d = np.zeros((n, 3))
    conic = np.zeros((n, 3))
    bbox = np.zeros((n, 4), dtype=np.int64)
    front = np.zeros(n, dtype=np.bool_)
    visible = np.zeros(n, dtype=np.bool_)
    for i in numba.prange(n):
        for r in range(3):
            view[i, r] = (Wp[r, 0] * means[i, 0] + Wp[r, 1] * means[i, 1]
                          + Wp[r, 2] * means[i, 2] + tp[r])
        x = view[i, 0]
        y = view[i, 1]
        z = view[i, 2]
        if not z > z_near:
            continue
        front[i] = True
        R = np.empty((3, 3))
        _rotmat(quats[i, 0], quats[i, 1], quats[i, 2], quats[i, 3], R)
        M = np.empty((3, 3))
        _view_cov(R, scales[i], Wp, M)
        j00 = fx / z
        j02 = -fx * x / (z * z)
        j11 = fy / z
        j12 = -fy * y / (z * z)
        # J M J^T for J = [[j00, 0, j02], [0, j11, j12]]
        cxx = j00 * (j00 * M[0, 0] + j02 * M[2, 0]) + j02 * (j00 * M[0, 2] + j02 * M[2, 2]) + blur
        cxy = j00 * (j11 * M[0, 1] + j12 * M[0, 2]) + j02 * (j11 * M[2, 1] + j12 * M[2, 2])
        cyy = j11 * (j11 * M[1, 1] + j12 * M[2, 1]) + j12 * (j11 * M[1, 2] + j12 * M[2, 2]) + blur
        det = cxx * cyy - cxy * cxy
        mx = fx * x / z + cx
        my = fy * y / z + cy
        mean2d[i, 0] = mx
        mean2d[i, 1] = my
        cov2d[i, 0] = cxx
        cov2d[i, 1] = cxy
        cov2d[i, 2] = cyy
        if not det > 0.0:
            continue
        conic[i, 0] = cyy / det
        conic[i, 1] = -cxy / det
        conic[i, 2] = cxx / det
        rx = cutoff * np.sqrt(cxx)
        ry = cutoff * np.sqrt(cyy)
        x0 = max(np.ceil(mx - rx), 0.0)
        x1 = min(np.floor(mx + rx), width - 1.0)
        y0 = max(np.ceil(my - ry), 0.0)
        y1 = min(np.floor(my + ry), height - 1.0)
        if x0 <= x1 and y0 <= y1:
            visible[i] = True
            bbox[i, 0] = np.int64(x0)
            bbox[i, 1] = np.int64(x1)
            bbox[i, 2] = np.int64(y0)
            bbox[i, 3] = np.int64(y1)
    return view, mean2d, cov2d, conic, bbox, front, visible


@numba.njit(parallel=True, cache=True)
def chain_geometry(g2d, view, conic, quats, scales, Wp, fx, fy, front):
    """Chain d/dmean2d and d/dconic to d/dmean (world), d/dquat (ambient), d/dscale."""
    n = g2d.shape[0]
    gmean = np.zeros((n, 3))
    gquat = np.zeros((n, 4))
    gscale = np.zeros((n, 3))
    for i in numba.prange(n):
        if not front[i]:
            continue
        a = conic[i, 0]
        b = conic[i, 1]
        c = conic[i, 2]
        ga = g2d[i, 2]
        gb = 0.5 * g2d[i, 3]
        gc = g2d[i, 4]
        # Gc = -A Gi A, A = [[a, b], [b, c]], Gi = [[ga, gb], [gb, gc]]
        t00 = ga * a + gb * b
        t01 = ga * b + gb * c
        t10 = gb * a + gc * b
        t11 = gb * b + gc * c
        G00 = -(a * t00 + b * t10)
        G01 = -(a * t01 + b * t11)
        G11 = -(b * t01 + c * t11)
        x = view[i, 0]
        y = view[i, 1]
        z = view[i, 2]
        J = np.zeros((2, 3))
        J[0, 0] = fx / z
        J[0, 2] = -fx * x / (z * z)
        J[1, 1] = fy / z
        J[1, 2] = -fy * y / (z * z)
        R = np.empty((3, 3))
        qn = _rotmat(quats[i, 0], quats[i, 1], quats[i, 2], quats[i, 3], R)
        M = np.empty((3, 3))
        _view_cov(R, scales[i], Wp, M)
        Gc = np.empty((2, 2))
        Gc[0, 0] = G00
        Gc[0, 1] = G01
        Gc[1, 0] = G01
        Gc[1, 1] = G11
        # gM = J^T Gc J ; gJ = 2 Gc J M
        GJ = np.empty((2, 3))
        for r in range(2):
            for k in range(3):
                GJ[r, k] = Gc[r, 0] * J[0, k] + Gc[r, 1] * J[1, k]
        gM = np.empty((3, 3))
        for r in range(3):
            for k in range(3):
                gM[r, k] = J[0, r] * GJ[0, k] + J[1, r] * GJ[1, k]
        gJ = np.empty((2, 3))
        for r in range(2):
            for k in range(3):
                gJ[r, k] = 2.0 * (GJ[r, 0] * M[0, k] + GJ[r, 1] * M[1, k] + GJ[r, 2] * M[2, k])
        # gSigma = Wp^T gM Wp ; RG = R gSigma
        T = np.empty((3, 3))
        for r in range(3):
            for k in range(3):
                T[r, k] = gM[r, 0] * Wp[0, k] + gM[r, 1] * Wp[1, k] + gM[r, 2] * Wp[2, k]
        gS = np.empty((3, 3))
        for r in range(3):
            for k in range(3):
                gS[r, k] = Wp[0, r] * T[0, k] + Wp[1, r] * T[1, k] + Wp[2, r] * T[2, k]
        RG = np.empty((3, 3))
        for r in range(3):
            for k in range(3):
                RG[r, k] = R[r, 0] * gS[0, k] + R[r, 1] * gS[1, k] + R[r, 2] * gS[2, k]
        gR = np.empty((3, 3))
        for r in range(3):
            acc = 0.0
            for k in range(3):
                acc += RG[r, k] * R[r, k]
                gR[r, k] = 2.0 * scales[i, r] * RG[r, k]
            gscale[i, r] = acc
        w = quats[i, 0] / qn
        qx = quats[i, 1] / qn
        qy = quats[i, 2] / qn
        qz = quats[i, 3] / qn
        gw = -2 * qz * gR[0, 1] + 2 * qy * gR[0, 2] + 2 * qz * gR[1, 0] - 2 * qx * gR[1, 2] \
            - 2 * qy * gR[2, 0] + 2 * qx * gR[2, 1]
        gx = 2 * qy * gR[0, 1] + 2 * qz * gR[0, 2] + 2 * qy * gR[1, 0] - 4 * qx * gR[1, 1] \
            - 2 * w * gR[1, 2] + 2 * qz * gR[2, 0] + 2 * w * gR[2, 1] - 4 * qx * gR[2, 2]
        gy = -4 * qy * gR[0, 0] + 2 * qx * gR[0, 1] + 2 * w * gR[0, 2] + 2 * qx * gR[1, 0] \
            + 2 * qz * gR[1, 2] - 2 * w * gR[2, 0] + 2 * qz * gR[2, 1] - 4 * qy * gR[2, 2]
        gz = -4 * qz * gR[0, 0] - 2 * w * gR[0, 1] + 2 * qx * gR[0, 2] + 2 * w * gR[1, 0] \
            - 4 * qz * gR[1, 1] + 2 * qy * gR[1, 2] + 2 * qx * gR[2, 0] + 2 * qy * gR[2, 1]
        dot = gw * w + gx * qx + gy * qy + gz * qz
        gquat[i, 0] = (gw - w * dot) / qn
        gquat[i, 1] = (gx - qx * dot) / qn
        gquat[i, 2] = (gy - qy * dot) / qn
        gquat[i, 3] = (gz - qz * dot) / qn
        gmx = g2d[i, 0]
        gmy = g2d[i, 1]
        z2 = z * z
        z3 = z2 * z
        gt0 = gmx * fx / z - gJ[0, 2] * fx / z2
        gt1 = gmy * fy / z - gJ[1, 2] * fy / z2
        gt2 = (-gmx * fx * x / z2 - gmy * fy * y / z2 - gJ[0, 0] * fx / z2
               + gJ[0, 2] * 2 * fx * x / z3 - gJ[1, 1] * fy / z2 + gJ[1, 2] * 2 * fy * y / z3)
        for k in range(3):
            gmean[i, k] = gt0 * Wp[0, k] + gt1 * Wp[1, k] + gt2 * Wp[2, k]
    return gmean, gquat, gscale
