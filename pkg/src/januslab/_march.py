"""Numba ray-march kernels behind render/render_vjp.

Single-threaded on purpose: scatter-adds in the adjoint stay deterministic,
and process-level parallelism over seeds is handled by the experiment
harness instead.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, fastmath=False)
def _sample_point(dens, col, n, lo0, lo1, lo2, inv0, inv1, inv2, px, py, pz, out_col):
    """Trilinear sample of density (returned) and color (written to out_col)."""
    if (px < lo0 or py < lo1 or pz < lo2
            or px > lo0 + n / inv0 or py > lo1 + n / inv1 or pz > lo2 + n / inv2):
        out_col[0] = 0.0
        out_col[1] = 0.0
        out_col[2] = 0.0
        return 0.0
    gx = (px - lo0) * inv0 - 0.5
    gy = (py - lo1) * inv1 - 0.5
    gz = (pz - lo2) * inv2 - 0.5
    if gx < 0.0:
        gx = 0.0
    if gy < 0.0:
        gy = 0.0
    if gz < 0.0:
        gz = 0.0
    if gx > n - 1.0:
        gx = n - 1.0
    if gy > n - 1.0:
        gy = n - 1.0
    if gz > n - 1.0:
        gz = n - 1.0
    ix = int(gx)
    iy = int(gy)
    iz = int(gz)
    if ix > n - 2:
        ix = n - 2
    if iy > n - 2:
        iy = n - 2
    if iz > n - 2:
        iz = n - 2
    fx = gx - ix
    fy = gy - iy
    fz = gz - iz
    d = 0.0
    out_col[0] = 0.0
    out_col[1] = 0.0
    out_col[2] = 0.0
    for dx in range(2):
        wx = fx if dx == 1 else 1.0 - fx
        for dy in range(2):
            wy = fy if dy == 1 else 1.0 - fy
            for dz in range(2):
                wz = fz if dz == 1 else 1.0 - fz
                w = wx * wy * wz
                lin = ((ix + dx) * n + (iy + dy)) * n + (iz + dz)
                d += w * dens[lin]
                out_col[0] += w * col[lin, 0]
                out_col[1] += w * col[lin, 1]
                out_col[2] += w * col[lin, 2]
    return d


@njit(cache=True, fastmath=False)
def march_forward(dens, col, n, lo, inv, origin, dirs, near, delta, nsamp, bg):
    nray = dirs.shape[0]
    out = np.zeros((nray, 3))
    c = np.zeros(3)
    for r in range(nray):
        trans = 1.0
        p0 = out[r]
        for i in range(nsamp):
            t = near + (i + 0.5) * delta
            px = origin[0] + t * dirs[r, 0]
            py = origin[1] + t * dirs[r, 1]
            pz = origin[2] + t * dirs[r, 2]
            d = _sample_point(dens, col, n, lo[0], lo[1], lo[2],
                              inv[0], inv[1], inv[2], px, py, pz, c)
            alpha = 1.0 - np.exp(-d * delta)
            w = trans * alpha
            p0[0] += w * c[0]
            p0[1] += w * c[1]
            p0[2] += w * c[2]
            trans *= 1.0 - alpha
        p0[0] += trans * bg[0]
        p0[1] += trans * bg[1]
        p0[2] += trans * bg[2]
    return out


@njit(cache=True, fastmath=False)
def march_backward(dens, col, n, lo, inv, origin, dirs, near, delta, nsamp, bg, g,
                   acc_dens, acc_col):
    """Adjoint of march_forward: accumulates d(g . pixels)/d(activated grids).

    Per ray, a forward pass caches per-sample quantities, then a reverse pass
    forms the suffix sums needed for the density adjoint and scatters both
    adjoints into the accumulator grids.
    """
    nray = dirs.shape[0]
    sig = np.zeros(nsamp)
    cr = np.zeros(nsamp)   # g . color_i
    al = np.zeros(nsamp)
    tr = np.zeros(nsamp)   # transmittance before sample i
    cols = np.zeros((nsamp, 3))
    c = np.zeros(3)
    for r in range(nray):
        trans = 1.0
        for i in range(nsamp):
            t = near + (i + 0.5) * delta
            px = origin[0] + t * dirs[r, 0]
            py = origin[1] + t * dirs[r, 1]
            pz = origin[2] + t * dirs[r, 2]
            d = _sample_point(dens, col, n, lo[0], lo[1], lo[2],
                              inv[0], inv[1], inv[2], px, py, pz, c)
            sig[i] = d
            cols[i, 0] = c[0]
            cols[i, 1] = c[1]
            cols[i, 2] = c[2]
            cr[i] = g[r, 0] * c[0] + g[r, 1] * c[1] + g[r, 2] * c[2]
            al[i] = 1.0 - np.exp(-d * delta)
            tr[i] = trans
            trans *= 1.0 - al[i]
        gbg = g[r, 0] * bg[0] + g[r, 1] * bg[1] + g[r, 2] * bg[2]
        suffix = trans * gbg  # sum_{k>i} w_k r_k + T_final * (g.bg), built backwards
        for i in range(nsamp - 1, -1, -1):
            w_i = tr[i] * al[i]
            d_sig = delta * ((1.0 - al[i]) * tr[i] * cr[i] - suffix)
            suffix += w_i * cr[i]
            # scatter trilinear adjoint for this sample
            t = near + (i + 0.5) * delta
            px = origin[0] + t * dirs[r, 0]
            py = origin[1] + t * dirs[r, 1]
            pz = origin[2] + t * dirs[r, 2]
            if (px < lo[0] or py < lo[1] or pz < lo[2]
                    or px > lo[0] + n / inv[0] or py > lo[1] + n / inv[1]
                    or pz > lo[2] + n / inv[2]):
                continue
            gx = (px - lo[0]) * inv[0] - 0.5
            gy = (py - lo[1]) * inv[1] - 0.5
            gz = (pz - lo[2]) * inv[2] - 0.5
            if gx < 0.0:
                gx = 0.0
            if gy < 0.0:
                gy = 0.0
            if gz < 0.0:
                gz = 0.0
            if gx > n - 1.0:
                gx = n - 1.0
            if gy > n - 1.0:
                gy = n - 1.0
            if gz > n - 1.0:
                gz = n - 1.0
            ix = int(gx)
            iy = int(gy)
            iz = int(gz)
            if ix > n - 2:
                ix = n - 2
            if iy > n - 2:
                iy = n - 2
            if iz > n - 2:
                iz = n - 2
            fx = gx - ix
            fy = gy - iy
            fz = gz - iz
            gc0 = w_i * g[r, 0]
            gc1 = w_i * g[r, 1]
            gc2 = w_i * g[r, 2]
            for dx in range(2):
                wx = fx if dx == 1 else 1.0 - fx
                for dy in range(2):
                    wy = fy if dy == 1 else 1.0 - fy
                    for dz in range(2):
                        wz = fz if dz == 1 else 1.0 - fz
                        w = wx * wy * wz
                        lin = ((ix + dx) * n + (iy + dy)) * n + (iz + dz)
                        acc_dens[lin] += w * d_sig
                        acc_col[lin, 0] += w * gc0
                        acc_col[lin, 1] += w * gc1
                        acc_col[lin, 2] += w * gc2
