"""Compiled inner loops for the render and gradient paths.

Everything here operates on plain float64/complex128 arrays so the hot loops
compile with numba. Rays are enumerated u-major (ray id = u * n_el + v) and
each ray writes only its own output slot, so results are bitwise identical
for any worker count. The tiled kernels parallelize over 16x16-ray tiles
and gather each tile's candidate attributes into tile-local scratch once,
reused by all 256 rays; the naive kernels parallelize over ray chunks.
Gradient kernels write per-(ray, hit) contribution slots instead of shared
accumulators; the deterministic reduction by primitive happens afterwards
with bincount.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

#: squared early-termination threshold on cumulative transmittance magnitude
TERM_EPS2 = 1e-12
#: discriminant guard below which the intersection-point gradient is skipped
TANGENT_EPS = 1e-10

TILE = 16


@njit(cache=True, inline="always")
def _collect_hits(
    u, v, dx, dy, dz, n_cand, cand_g, means, inv_covs, norm_consts,
    splat_cu, splat_cv, splat_r2,
    rx, min_t, n_az, use_disc,
    hit_g, hit_tmid, hit_w, hit_d1, hit_d2, hit_clamped,
):
    """Gather ray-ellipsoid hits for one ray; returns the hit count.

    Candidate attribute arrays are indexed 0..n_cand-1 and cand_g maps back
    to global primitive ids. Hits are insertion-sorted by (t_mid, global
    id) so the blend order is unambiguous even for ties.
    """
    count = 0
    for ci in range(n_cand):
        r2 = splat_r2[ci]
        if r2 < 0.0:
            continue
        if use_disc:
            du = abs(u - splat_cu[ci])
            if n_az - du < du:
                du = n_az - du
            dv = v - splat_cv[ci]
            if du * du + dv * dv > r2:
                continue
        mx = rx[0] - means[ci, 0]
        my = rx[1] - means[ci, 1]
        mz = rx[2] - means[ci, 2]
        i00 = inv_covs[ci, 0, 0]
        i01 = inv_covs[ci, 0, 1]
        i02 = inv_covs[ci, 0, 2]
        i11 = inv_covs[ci, 1, 1]
        i12 = inv_covs[ci, 1, 2]
        i22 = inv_covs[ci, 2, 2]
        sx = i00 * dx + i01 * dy + i02 * dz
        sy = i01 * dx + i11 * dy + i12 * dz
        sz = i02 * dx + i12 * dy + i22 * dz
        a = sx * dx + sy * dy + sz * dz
        b = sx * mx + sy * my + sz * mz
        c = (
            (i00 * mx + i01 * my + i02 * mz) * mx
            + (i01 * mx + i11 * my + i12 * mz) * my
            + (i02 * mx + i12 * my + i22 * mz) * mz
        )
        disc = b * b - a * (c - 9.0)
        if disc < 0.0:
            continue
        sq = np.sqrt(disc)
        d2 = (-b + sq) / a
        if d2 < min_t:
            continue
        d1 = (-b - sq) / a
        clamped = d1 < min_t
        t_in = min_t if clamped else d1
        t_mid = 0.5 * (t_in + d2)
        # x_mid - mu = t_mid * dir + (rx - mu)
        ddx = t_mid * dx + mx
        ddy = t_mid * dy + my
        ddz = t_mid * dz + mz
        qf = (
            (i00 * ddx + i01 * ddy + i02 * ddz) * ddx
            + (i01 * ddx + i11 * ddy + i12 * ddz) * ddy
            + (i02 * ddx + i12 * ddy + i22 * ddz) * ddz
        )
        w = norm_consts[ci] * np.exp(-0.5 * qf)
        g = cand_g[ci]
        j = count
        while j > 0 and (
            hit_tmid[j - 1] > t_mid
            or (hit_tmid[j - 1] == t_mid and hit_g[j - 1] > g)
        ):
            hit_tmid[j] = hit_tmid[j - 1]
            hit_g[j] = hit_g[j - 1]
            hit_w[j] = hit_w[j - 1]
            hit_d1[j] = hit_d1[j - 1]
            hit_d2[j] = hit_d2[j - 1]
            hit_clamped[j] = hit_clamped[j - 1]
            j -= 1
        hit_tmid[j] = t_mid
        hit_g[j] = g
        hit_w[j] = w
        hit_d1[j] = d1
        hit_d2[j] = d2
        hit_clamped[j] = clamped
        count += 1
    return count


@njit(cache=True, inline="always")
def _gather_tile(tile_items, lo, hi, means, inv_covs, norm_consts, splat_cu, splat_cv, splat_r2):
    """Copy one tile's candidate attributes into contiguous local arrays."""
    m = hi - lo
    loc_g = np.empty(m, dtype=np.int64)
    loc_means = np.empty((m, 3))
    loc_inv = np.empty((m, 3, 3))
    loc_nc = np.empty(m)
    loc_cu = np.empty(m)
    loc_cv = np.empty(m)
    loc_r2 = np.empty(m)
    for i in range(m):
        g = tile_items[lo + i]
        loc_g[i] = g
        for a in range(3):
            loc_means[i, a] = means[g, a]
            for b in range(3):
                loc_inv[i, a, b] = inv_covs[g, a, b]
        loc_nc[i] = norm_consts[g]
        loc_cu[i] = splat_cu[g]
        loc_cv[i] = splat_cv[g]
        loc_r2[i] = splat_r2[g]
    return loc_g, loc_means, loc_inv, loc_nc, loc_cu, loc_cv, loc_r2


@njit(cache=True, parallel=True, nogil=True)
def forward_tiled(
    ray_dirs, means, inv_covs, norm_consts, rho, psi,
    splat_cu, splat_cv, splat_r2,
    tile_items, tile_ranges, tiles_u,
    rx, min_t, n_az, n_el,
    out,
):
    """Complex received signal per ray, candidates from each ray's tile."""
    n_tiles = tile_ranges.shape[0]
    for t in prange(n_tiles):
        lo = tile_ranges[t, 0]
        hi = tile_ranges[t, 1]
        m = hi - lo
        if m == 0:
            tu0 = (t % tiles_u) * TILE
            tv0 = (t // tiles_u) * TILE
            for u in range(tu0, min(tu0 + TILE, n_az)):
                for v in range(tv0, min(tv0 + TILE, n_el)):
                    out[u * n_el + v] = 0.0 + 0.0j
            continue
        loc_g, loc_means, loc_inv, loc_nc, loc_cu, loc_cv, loc_r2 = _gather_tile(
            tile_items, lo, hi, means, inv_covs, norm_consts,
            splat_cu, splat_cv, splat_r2,
        )
        hit_g = np.empty(m, dtype=np.int64)
        hit_tmid = np.empty(m)
        hit_w = np.empty(m)
        hit_d1 = np.empty(m)
        hit_d2 = np.empty(m)
        hit_clamped = np.empty(m, dtype=np.bool_)
        tu0 = (t % tiles_u) * TILE
        tv0 = (t // tiles_u) * TILE
        for u in range(tu0, min(tu0 + TILE, n_az)):
            for v in range(tv0, min(tv0 + TILE, n_el)):
                r = u * n_el + v
                count = _collect_hits(
                    float(u), float(v),
                    ray_dirs[r, 0], ray_dirs[r, 1], ray_dirs[r, 2],
                    m, loc_g, loc_means, loc_inv, loc_nc,
                    loc_cu, loc_cv, loc_r2,
                    rx, min_t, float(n_az), True,
                    hit_g, hit_tmid, hit_w, hit_d1, hit_d2, hit_clamped,
                )
                s = 0.0 + 0.0j
                trans = 1.0 + 0.0j
                for k in range(count):
                    if trans.real * trans.real + trans.imag * trans.imag < TERM_EPS2:
                        break
                    g = hit_g[k]
                    s += hit_w[k] * psi[g] * trans
                    trans *= rho[g]
                out[r] = s


@njit(cache=True, parallel=True, nogil=True)
def forward_naive(
    ray_dirs, means, inv_covs, norm_consts, rho, psi,
    splat_r2,
    rx, min_t, n_az,
    out,
):
    """Reference forward: every primitive against every ray, no tiling."""
    n_rays = ray_dirs.shape[0]
    n_gauss = means.shape[0]
    all_g = np.arange(n_gauss, dtype=np.int64)
    dummy = np.empty(1)
    n_chunks = min(256, n_rays) if n_rays > 0 else 0
    for chunk in prange(n_chunks):
        r_lo = chunk * n_rays // n_chunks
        r_hi = (chunk + 1) * n_rays // n_chunks
        hit_g = np.empty(n_gauss, dtype=np.int64)
        hit_tmid = np.empty(n_gauss)
        hit_w = np.empty(n_gauss)
        hit_d1 = np.empty(n_gauss)
        hit_d2 = np.empty(n_gauss)
        hit_clamped = np.empty(n_gauss, dtype=np.bool_)
        for r in range(r_lo, r_hi):
            count = _collect_hits(
                0.0, 0.0,
                ray_dirs[r, 0], ray_dirs[r, 1], ray_dirs[r, 2],
                n_gauss, all_g, means, inv_covs, norm_consts,
                dummy, dummy, splat_r2,
                rx, min_t, float(n_az), False,
                hit_g, hit_tmid, hit_w, hit_d1, hit_d2, hit_clamped,
            )
            s = 0.0 + 0.0j
            trans = 1.0 + 0.0j
            for k in range(count):
                if trans.real * trans.real + trans.imag * trans.imag < TERM_EPS2:
                    break
                g = hit_g[k]
                s += hit_w[k] * psi[g] * trans
                trans *= rho[g]
            out[r] = s


@njit(cache=True, inline="always")
def _live_hits(count, hit_g, rho):
    """Number of hits processed before early termination."""
    trans = 1.0 + 0.0j
    live = 0
    for k in range(count):
        if trans.real * trans.real + trans.imag * trans.imag < TERM_EPS2:
            break
        trans *= rho[hit_g[k]]
        live += 1
    return live


@njit(cache=True, parallel=True, nogil=True)
def count_hits_tiled(
    ray_dirs, means, inv_covs, norm_consts, rho,
    splat_cu, splat_cv, splat_r2,
    tile_items, tile_ranges, tiles_u,
    rx, min_t, n_az, n_el,
    counts,
):
    """Live (pre-truncation) hit count per ray, for gradient slot layout."""
    n_tiles = tile_ranges.shape[0]
    for t in prange(n_tiles):
        lo = tile_ranges[t, 0]
        hi = tile_ranges[t, 1]
        m = hi - lo
        tu0 = (t % tiles_u) * TILE
        tv0 = (t // tiles_u) * TILE
        if m == 0:
            for u in range(tu0, min(tu0 + TILE, n_az)):
                for v in range(tv0, min(tv0 + TILE, n_el)):
                    counts[u * n_el + v] = 0
            continue
        loc_g, loc_means, loc_inv, loc_nc, loc_cu, loc_cv, loc_r2 = _gather_tile(
            tile_items, lo, hi, means, inv_covs, norm_consts,
            splat_cu, splat_cv, splat_r2,
        )
        hit_g = np.empty(m, dtype=np.int64)
        hit_tmid = np.empty(m)
        hit_w = np.empty(m)
        hit_d1 = np.empty(m)
        hit_d2 = np.empty(m)
        hit_clamped = np.empty(m, dtype=np.bool_)
        for u in range(tu0, min(tu0 + TILE, n_az)):
            for v in range(tv0, min(tv0 + TILE, n_el)):
                r = u * n_el + v
                count = _collect_hits(
                    float(u), float(v),
                    ray_dirs[r, 0], ray_dirs[r, 1], ray_dirs[r, 2],
                    m, loc_g, loc_means, loc_inv, loc_nc,
                    loc_cu, loc_cv, loc_r2,
                    rx, min_t, float(n_az), True,
                    hit_g, hit_tmid, hit_w, hit_d1, hit_d2, hit_clamped,
                )
                counts[r] = _live_hits(count, hit_g, rho)


@njit(cache=True, parallel=True, nogil=True)
def backward_tiled(
    ray_dirs, upstream,
    means, inv_covs, norm_consts, rho, unit_rho, psi,
    splat_cu, splat_cv, splat_r2,
    tile_items, tile_ranges, tiles_u,
    rx, min_t, n_az, n_el,
    ray_offsets,
    inc_g, inc_pg, inc_dmag, inc_dphase, inc_dmu, inc_dcov,
):
    """Per-(ray, hit) gradient contributions.

    ray_offsets[r] is the slot where ray r's hits start (from the counting
    kernel). Slots are disjoint across rays, so the fill order is
    immaterial and the result is deterministic for any worker count.
    """
    n_tiles = tile_ranges.shape[0]
    for t in prange(n_tiles):
        lo = tile_ranges[t, 0]
        hi = tile_ranges[t, 1]
        m = hi - lo
        if m == 0:
            continue
        loc_g, loc_means, loc_inv, loc_nc, loc_cu, loc_cv, loc_r2 = _gather_tile(
            tile_items, lo, hi, means, inv_covs, norm_consts,
            splat_cu, splat_cv, splat_r2,
        )
        hit_g = np.empty(m, dtype=np.int64)
        hit_tmid = np.empty(m)
        hit_w = np.empty(m)
        hit_d1 = np.empty(m)
        hit_d2 = np.empty(m)
        hit_clamped = np.empty(m, dtype=np.bool_)
        trans_arr = np.empty(m, dtype=np.complex128)
        tu0 = (t % tiles_u) * TILE
        tv0 = (t // tiles_u) * TILE
        for u in range(tu0, min(tu0 + TILE, n_az)):
            for v in range(tv0, min(tv0 + TILE, n_el)):
                r = u * n_el + v
                lam = upstream[r]
                count = _collect_hits(
                    float(u), float(v),
                    ray_dirs[r, 0], ray_dirs[r, 1], ray_dirs[r, 2],
                    m, loc_g, loc_means, loc_inv, loc_nc,
                    loc_cu, loc_cv, loc_r2,
                    rx, min_t, float(n_az), True,
                    hit_g, hit_tmid, hit_w, hit_d1, hit_d2, hit_clamped,
                )
                trans = 1.0 + 0.0j
                live = 0
                for k in range(count):
                    if trans.real * trans.real + trans.imag * trans.imag < TERM_EPS2:
                        break
                    trans_arr[k] = trans
                    trans *= rho[hit_g[k]]
                    live += 1
                _ray_backward(
                    r, lam, live,
                    hit_g, hit_w, hit_d1, hit_d2, hit_clamped, trans_arr,
                    ray_dirs, means, inv_covs, rho, unit_rho, psi,
                    rx, min_t, ray_offsets,
                    inc_g, inc_pg, inc_dmag, inc_dphase, inc_dmu, inc_dcov,
                )


@njit(cache=True)
def _ray_backward(
    r, lam, live,
    hit_g, hit_w, hit_d1, hit_d2, hit_clamped, trans_arr,
    ray_dirs, means, inv_covs, rho, unit_rho, psi,
    rx, min_t, ray_offsets,
    inc_g, inc_pg, inc_dmag, inc_dphase, inc_dmu, inc_dcov,
):
    """Reverse sweep over one ray's live hits; fills the ray's slots."""
    base = ray_offsets[r]
    clam = np.conj(lam)
    dx = ray_dirs[r, 0]
    dy = ray_dirs[r, 1]
    dz = ray_dirs[r, 2]
    suffix = 0.0 + 0.0j
    for k in range(live - 1, -1, -1):
        g = hit_g[k]
        w = hit_w[k]
        tk = trans_arr[k]
        slot = base + k
        inc_g[slot] = g
        inc_pg[slot] = clam * w * tk
        zmag = clam * tk * unit_rho[g] * suffix
        inc_dmag[slot] = zmag.real
        zph = clam * tk * rho[g] * suffix
        inc_dphase[slot] = -zph.imag

        gw_c = clam * psi[g] * tk
        gw = gw_c.real
        i00 = inv_covs[g, 0, 0]
        i01 = inv_covs[g, 0, 1]
        i02 = inv_covs[g, 0, 2]
        i11 = inv_covs[g, 1, 1]
        i12 = inv_covs[g, 1, 2]
        i22 = inv_covs[g, 2, 2]
        t_in = min_t if hit_clamped[k] else hit_d1[k]
        t_mid = 0.5 * (t_in + hit_d2[k])
        ddx = rx[0] + t_mid * dx - means[g, 0]
        ddy = rx[1] + t_mid * dy - means[g, 1]
        ddz = rx[2] + t_mid * dz - means[g, 2]
        q0 = i00 * ddx + i01 * ddy + i02 * ddz
        q1 = i01 * ddx + i11 * ddy + i12 * ddz
        q2 = i02 * ddx + i12 * ddy + i22 * ddz
        # direct mean term: +w * Sigma^{-1} (x_mid - mu)
        gmu0 = gw * w * q0
        gmu1 = gw * w * q1
        gmu2 = gw * w * q2
        # direct covariance term: w/2 * (qq^T - Sigma^{-1})
        f = gw * w * 0.5
        c00 = f * (q0 * q0 - i00)
        c01 = f * (q0 * q1 - i01)
        c02 = f * (q0 * q2 - i02)
        c10 = f * (q1 * q0 - i01)
        c11 = f * (q1 * q1 - i11)
        c12 = f * (q1 * q2 - i12)
        c20 = f * (q2 * q0 - i02)
        c21 = f * (q2 * q1 - i12)
        c22 = f * (q2 * q2 - i22)

        mx = rx[0] - means[g, 0]
        my = rx[1] - means[g, 1]
        mz = rx[2] - means[g, 2]
        p0 = i00 * dx + i01 * dy + i02 * dz
        p1 = i01 * dx + i11 * dy + i12 * dz
        p2 = i02 * dx + i12 * dy + i22 * dz
        e0 = i00 * mx + i01 * my + i02 * mz
        e1 = i01 * mx + i11 * my + i12 * mz
        e2 = i02 * mx + i12 * my + i22 * mz
        a = p0 * dx + p1 * dy + p2 * dz
        b = p0 * mx + p1 * my + p2 * mz
        c = e0 * mx + e1 * my + e2 * mz
        disc = b * b - a * (c - 9.0)
        if disc >= TANGENT_EPS:
            sq = np.sqrt(disc)
            s_dv = q0 * dx + q1 * dy + q2 * dz
            dw_dt = gw * (-w) * s_dv
            half = 0.5 * dw_dt
            inv2sq = 0.5 / sq
            clamped = hit_clamped[k]
            # mean chain through the midpoint: dB/dmu = -p, dC/dmu = -2e
            for ax in range(3):
                if ax == 0:
                    bmu = -p0
                    cmu = -2.0 * e0
                elif ax == 1:
                    bmu = -p1
                    cmu = -2.0 * e1
                else:
                    bmu = -p2
                    cmu = -2.0 * e2
                dd = (2.0 * b * bmu - a * cmu) * inv2sq
                dsum = (-bmu + dd) / a
                if not clamped:
                    dsum += (-bmu - dd) / a
                if ax == 0:
                    gmu0 += half * dsum
                elif ax == 1:
                    gmu1 += half * dsum
                else:
                    gmu2 += half * dsum
            # covariance chain: dA = -pp^T, dB = -pe^T, dC = -ee^T entrywise
            cm9 = c - 9.0
            for ii in range(3):
                if ii == 0:
                    pi = p0
                    qi = e0
                elif ii == 1:
                    pi = p1
                    qi = e1
                else:
                    pi = p2
                    qi = e2
                for jj in range(3):
                    if jj == 0:
                        pj = p0
                        qj = e0
                    elif jj == 1:
                        pj = p1
                        qj = e1
                    else:
                        pj = p2
                        qj = e2
                    da = -pi * pj
                    db = -pi * qj
                    dc = -qi * qj
                    ddisc = 2.0 * b * db - cm9 * da - a * dc
                    dsum = (-db + ddisc * inv2sq) / a - hit_d2[k] * da / a
                    if not clamped:
                        dsum += (-db - ddisc * inv2sq) / a - hit_d1[k] * da / a
                    dt = half * dsum
                    if ii == 0 and jj == 0:
                        c00 += dt
                    elif ii == 0 and jj == 1:
                        c01 += dt
                    elif ii == 0 and jj == 2:
                        c02 += dt
                    elif ii == 1 and jj == 0:
                        c10 += dt
                    elif ii == 1 and jj == 1:
                        c11 += dt
                    elif ii == 1 and jj == 2:
                        c12 += dt
                    elif ii == 2 and jj == 0:
                        c20 += dt
                    elif ii == 2 and jj == 1:
                        c21 += dt
                    else:
                        c22 += dt

        inc_dmu[slot, 0] = gmu0
        inc_dmu[slot, 1] = gmu1
        inc_dmu[slot, 2] = gmu2
        inc_dcov[slot, 0] = c00
        inc_dcov[slot, 1] = c01
        inc_dcov[slot, 2] = c02
        inc_dcov[slot, 3] = c10
        inc_dcov[slot, 4] = c11
        inc_dcov[slot, 5] = c12
        inc_dcov[slot, 6] = c20
        inc_dcov[slot, 7] = c21
        inc_dcov[slot, 8] = c22

        suffix = hit_w[k] * psi[g] + rho[g] * suffix


@njit(cache=True)
def expand_tile_rects(tu_lo, tu_hi, tu2_lo, tu2_hi, tv_lo, tv_hi, depth_codes, gidx, tiles_u):
    """Expand per-splat tile rectangles into flat (key, index) incidence arrays.

    Each splat contributes the tile rectangle [tv_lo, tv_hi] x [tu_lo, tu_hi]
    plus an optional second azimuth segment [tu2_lo, tu2_hi] (wraparound).
    """
    n = tu_lo.shape[0]
    total = 0
    for i in range(n):
        nv = tv_hi[i] - tv_lo[i] + 1
        if nv <= 0:
            continue
        nu = tu_hi[i] - tu_lo[i] + 1
        if tu2_hi[i] >= tu2_lo[i]:
            nu += tu2_hi[i] - tu2_lo[i] + 1
        total += nv * nu
    keys = np.empty(total, dtype=np.uint64)
    out_idx = np.empty(total, dtype=np.int64)
    pos = 0
    for i in range(n):
        if tv_hi[i] < tv_lo[i]:
            continue
        code = np.uint64(depth_codes[i])
        for tv in range(tv_lo[i], tv_hi[i] + 1):
            row = tv * tiles_u
            for tu in range(tu_lo[i], tu_hi[i] + 1):
                keys[pos] = (np.uint64(row + tu) << np.uint64(32)) | code
                out_idx[pos] = gidx[i]
                pos += 1
            for tu in range(tu2_lo[i], tu2_hi[i] + 1):
                keys[pos] = (np.uint64(row + tu) << np.uint64(32)) | code
                out_idx[pos] = gidx[i]
                pos += 1
    return keys, out_idx
