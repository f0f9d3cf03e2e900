"""Analytic backward pass for every primitive attribute.

The loss is a real function of the complex per-ray signals. All chains are
carried as real pairs over (Re S, Im S): the upstream gradient for a ray is
packed as a complex number lambda with lambda.real = dL/d(Re S) and
lambda.imag = dL/d(Im S), and for any real parameter w the chain rule reads

    dL/dw = Re( conj(lambda) * dS/dw )

with dS/dw the elementwise complex derivative. Per-ray work recomputes the
forward hit list and runs one reverse sweep that maintains the running
downstream sum needed by the transmittance chain, so memory stays O(hits).

Gradients of a hit's weight flow into the mean and covariance through both
the density itself and the chord midpoint (the intersection distances
depend on the primitive's mean and covariance); the covariance gradient is
then chained onto the stored rotation quaternion and log scales through
Sigma = R S S^T R^T. Moving a primitive also turns its response toward the
transmitter, so the bearing chain through the directional basis is added to
the mean gradient (toggleable for ablation against the plain density-only
gradient).

The production path parallelizes over rays into disjoint per-(ray, hit)
slots and reduces them with bincount in fixed order, so buffers are
bitwise identical for any worker count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels, fle
from .errors import ContractViolationError, ShapeError
from .render import RenderContext, prepare_context, set_workers
from .scene import RFScene, quats_to_rotations

__all__ = [
    "GradientBuffer",
    "upstream_to_ray",
    "backward_frame",
    "backward_frame_reference",
    "RayGradContext",
    "build_ray_context",
    "backward_radiance",
    "backward_transmittance",
    "backward_mean",
    "backward_covariance",
    "chain_cov_to_shape",
    "rotation_derivatives",
]


@dataclass
class GradientBuffer:
    """Per-primitive gradient accumulators.

    d_coeffs packs the two real partials of each complex coefficient as a
    complex number: real part = dL/d(Re c), imaginary part = dL/d(Im c).
    d_cov holds the raw covariance gradient before chaining; d_quat and
    d_log_scale are filled by `finalize` (or by the backward drivers).
    """

    d_mean: np.ndarray
    d_quat: np.ndarray
    d_log_scale: np.ndarray
    d_trans_mag: np.ndarray
    d_trans_phase: np.ndarray
    d_coeffs: np.ndarray
    d_cov: np.ndarray

    @classmethod
    def zeros(cls, n: int, n_coeffs: int) -> "GradientBuffer":
        return cls(
            np.zeros((n, 3)),
            np.zeros((n, 4)),
            np.zeros((n, 3)),
            np.zeros(n),
            np.zeros(n),
            np.zeros((n, n_coeffs), dtype=np.complex128),
            np.zeros((n, 3, 3)),
        )

    def add(self, other: "GradientBuffer") -> None:
        self.d_mean += other.d_mean
        self.d_quat += other.d_quat
        self.d_log_scale += other.d_log_scale
        self.d_trans_mag += other.d_trans_mag
        self.d_trans_phase += other.d_trans_phase
        self.d_coeffs += other.d_coeffs
        self.d_cov += other.d_cov

    def all_finite(self) -> bool:
        return all(
            np.all(np.isfinite(a))
            for a in (
                self.d_mean, self.d_quat, self.d_log_scale,
                self.d_trans_mag, self.d_trans_phase, self.d_cov,
            )
        ) and np.all(np.isfinite(self.d_coeffs.view(np.float64)))


def upstream_to_ray(dL_dpower, s_frame) -> np.ndarray:
    """Upstream gradient pairs for power frames: chain through P = |S|^2.

    Returns a complex array packing (dL/dRe S, dL/dIm S) = 2 * dL/dP * (Re S,
    Im S) elementwise.

    Raises:
        ContractViolationError: the cached complex forward frame is missing
            or does not match the gradient frame's shape.
    """
    if s_frame is None:
        raise ContractViolationError("forward complex frame was not cached")
    dL_dpower = np.asarray(dL_dpower, dtype=np.float64)
    s_frame = np.asarray(s_frame, dtype=np.complex128)
    if dL_dpower.shape != s_frame.shape:
        raise ContractViolationError("gradient frame and forward frame shapes differ")
    return 2.0 * dL_dpower * s_frame


def rotation_derivatives(quat_unit: np.ndarray) -> np.ndarray:
    """dR/dq for a unit quaternion (w, x, y, z); shape (4, 3, 3)."""
    w, x, y, z = quat_unit
    d = np.empty((4, 3, 3))
    d[0] = 2.0 * np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    d[1] = 2.0 * np.array([[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    d[2] = 2.0 * np.array([[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]])
    d[3] = 2.0 * np.array([[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]])
    return d


def chain_cov_to_shape(scene: RFScene, d_cov: np.ndarray):
    """Chain covariance gradients onto quaternions and log scales.

    Includes the quaternion normalization (the forward always rotates by
    q / |q|), so the result is the gradient with respect to the stored,
    possibly non-unit quaternion components.
    """
    n = scene.n
    norms = np.linalg.norm(scene.quats, axis=1)
    q_unit = scene.quats / norms[:, None]
    rot = quats_to_rotations(q_unit)
    dvec = np.exp(2.0 * scene.log_scales)

    d_log_scale = np.empty((n, 3))
    for a in range(3):
        col = rot[:, :, a]
        d_log_scale[:, a] = 2.0 * dvec[:, a] * np.einsum(
            "ni,nij,nj->n", col, d_cov, col
        )

    d_quat = np.empty((n, 4))
    for i in range(n):
        dr = rotation_derivatives(q_unit[i])
        rd = rot[i] * dvec[i]  # R D
        for qi in range(4):
            dsig = dr[qi] * dvec[i] @ rot[i].T + rd @ dr[qi].T
            d_quat[i, qi] = float(np.sum(d_cov[i] * dsig))
        # through the normalization q_hat = q / |q|
        g = d_quat[i]
        d_quat[i] = (g - np.dot(g, q_unit[i]) * q_unit[i]) / norms[i]
    return d_quat, d_log_scale


def _direction_chain(ctx: RenderContext, p_acc: np.ndarray) -> np.ndarray:
    """Mean gradient term from the bearing-dependent directional response."""
    scene = ctx.scene
    r = ctx.tx - scene.means
    zeta2 = np.sum(r * r, axis=1)
    rho2 = r[:, 0] ** 2 + r[:, 1] ** 2
    ok = ctx.bearing_valid & (rho2 > 1e-18 * zeta2)
    rho = np.sqrt(np.where(ok, rho2, 1.0))
    dpsi_da = np.einsum("nk,nk->n", scene.coeffs, ctx.basis_dalpha)
    dpsi_db = np.einsum("nk,nk->n", scene.coeffs, ctx.basis_dbeta)
    ga = np.real(p_acc * dpsi_da)
    gb = np.real(p_acc * dpsi_db)
    da_dr = np.zeros_like(r)
    db_dr = np.zeros_like(r)
    with np.errstate(invalid="ignore", divide="ignore"):
        da_dr[:, 0] = -r[:, 1] / rho2
        da_dr[:, 1] = r[:, 0] / rho2
        db_dr[:, 0] = -r[:, 2] * r[:, 0] / (rho * zeta2)
        db_dr[:, 1] = -r[:, 2] * r[:, 1] / (rho * zeta2)
        db_dr[:, 2] = rho / zeta2
    out = -(ga[:, None] * da_dr + gb[:, None] * db_dr)
    out[~ok] = 0.0
    return out


def backward_frame(
    scene: RFScene,
    tx,
    upstream: np.ndarray,
    workers: int = 1,
    include_direction_chain: bool = True,
    ctx: RenderContext | None = None,
) -> GradientBuffer:
    """Full backward pass for a frame of upstream gradients.

    upstream has shape (n_az, n_el), complex-packed (dL/dRe S, dL/dIm S)
    per ray. Returns a finalized GradientBuffer.
    """
    if ctx is None:
        ctx = prepare_context(scene, tx)
    upstream = np.asarray(upstream, dtype=np.complex128)
    if upstream.shape != (scene.n_az, scene.n_el):
        raise ShapeError("upstream frame shape does not match the scene grid")
    set_workers(workers)

    n_rays = scene.n_az * scene.n_el
    counts = np.zeros(n_rays, dtype=np.int64)
    _kernels.count_hits_tiled(
        ctx.ray_dirs,
        scene.means, ctx.inv_covs, ctx.norm_consts, ctx.rho,
        ctx.projection.center_u, ctx.projection.center_v, ctx.splat_r2,
        ctx.tiles.indices, ctx.tiles.ranges, ctx.tiles.tiles_u,
        scene.rx, scene.ress_radius, scene.n_az, scene.n_el,
        counts,
    )
    offsets = np.zeros(n_rays, dtype=np.int64)
    np.cumsum(counts[:-1], out=offsets[1:])
    total = int(counts.sum())

    inc_g = np.zeros(total, dtype=np.int64)
    inc_pg = np.zeros(total, dtype=np.complex128)
    inc_dmag = np.zeros(total)
    inc_dphase = np.zeros(total)
    inc_dmu = np.zeros((total, 3))
    inc_dcov = np.zeros((total, 9))
    _kernels.backward_tiled(
        ctx.ray_dirs, upstream.reshape(-1),
        scene.means, ctx.inv_covs, ctx.norm_consts, ctx.rho, ctx.unit_rho, ctx.psi,
        ctx.projection.center_u, ctx.projection.center_v, ctx.splat_r2,
        ctx.tiles.indices, ctx.tiles.ranges, ctx.tiles.tiles_u,
        scene.rx, scene.ress_radius, scene.n_az, scene.n_el,
        offsets,
        inc_g, inc_pg, inc_dmag, inc_dphase, inc_dmu, inc_dcov,
    )

    n = scene.n
    buf = GradientBuffer.zeros(n, scene.coeffs.shape[1])
    buf.d_trans_mag = np.bincount(inc_g, weights=inc_dmag, minlength=n)
    buf.d_trans_phase = np.bincount(inc_g, weights=inc_dphase, minlength=n)
    for a in range(3):
        buf.d_mean[:, a] = np.bincount(inc_g, weights=inc_dmu[:, a], minlength=n)
    for a in range(9):
        buf.d_cov[:, a // 3, a % 3] = np.bincount(
            inc_g, weights=inc_dcov[:, a], minlength=n
        )
    p_acc = np.bincount(inc_g, weights=inc_pg.real, minlength=n) + 1j * np.bincount(
        inc_g, weights=inc_pg.imag, minlength=n
    )
    buf.d_coeffs = np.conj(p_acc)[:, None] * np.conj(ctx.basis)
    if include_direction_chain:
        buf.d_mean += _direction_chain(ctx, p_acc)
    buf.d_quat, buf.d_log_scale = chain_cov_to_shape(scene, buf.d_cov)
    return buf


# reference path ----------------------------------------------------------
#
# The functions below implement the same sweep one ray at a time in plain
# numpy. They are the readable specification of the kernel math and the
# oracle the compiled path is tested against.


@dataclass
class RayGradContext:
    """Forward caches for one ray, consumed by the backward_* steps."""

    scene: RFScene
    ctx: RenderContext
    upstream: complex
    direction: np.ndarray
    hit_g: np.ndarray
    hit_d1: np.ndarray
    hit_d2: np.ndarray
    hit_clamped: np.ndarray
    hit_w: np.ndarray
    trans: np.ndarray
    suffix: np.ndarray

    @property
    def n_hits(self) -> int:
        return len(self.hit_g)


def build_ray_context(
    ctx: RenderContext, ray_index: int, upstream: complex
) -> RayGradContext:
    """Recompute one ray's sorted hits plus the sweep caches."""
    scene = ctx.scene
    direction = ctx.ray_dirs[ray_index]
    min_t = scene.ress_radius
    rows = []
    for g in range(scene.n):
        if ctx.splat_r2[g] < 0.0:
            continue
        inv = ctx.inv_covs[g]
        m = scene.rx - scene.means[g]
        a = direction @ inv @ direction
        b = direction @ inv @ m
        c = m @ inv @ m
        disc = b * b - a * (c - 9.0)
        if disc < 0.0:
            continue
        sq = np.sqrt(disc)
        d2 = (-b + sq) / a
        if d2 < min_t:
            continue
        d1 = (-b - sq) / a
        clamped = d1 < min_t
        t_mid = 0.5 * ((min_t if clamped else d1) + d2)
        x_mid = scene.rx + t_mid * direction
        delta = x_mid - scene.means[g]
        w = ctx.norm_consts[g] * np.exp(-0.5 * delta @ inv @ delta)
        rows.append((t_mid, g, d1, d2, clamped, w))
    rows.sort(key=lambda r: (r[0], r[1]))

    live = []
    trans = []
    t = 1.0 + 0.0j
    for row in rows:
        if abs(t) ** 2 < _kernels.TERM_EPS2:
            break
        trans.append(t)
        t *= ctx.rho[row[1]]
        live.append(row)

    k = len(live)
    suffix = np.zeros(k, dtype=np.complex128)
    acc = 0.0 + 0.0j
    for i in range(k - 1, -1, -1):
        suffix[i] = acc
        acc = live[i][5] * ctx.psi[live[i][1]] + ctx.rho[live[i][1]] * acc
    return RayGradContext(
        scene, ctx, complex(upstream), direction,
        np.array([r[1] for r in live], dtype=np.int64),
        np.array([r[2] for r in live]),
        np.array([r[3] for r in live]),
        np.array([r[4] for r in live], dtype=bool),
        np.array([r[5] for r in live]),
        np.array(trans, dtype=np.complex128),
        suffix,
    )


def backward_radiance(rc: RayGradContext, k: int, buf: GradientBuffer) -> None:
    """Coefficient gradients of hit k: the response chain is linear."""
    g = rc.hit_g[k]
    z = np.conj(rc.upstream) * rc.hit_w[k] * rc.trans[k]
    buf.d_coeffs[g] += np.conj(z) * np.conj(rc.ctx.basis[g])


def backward_transmittance(rc: RayGradContext, k: int, buf: GradientBuffer) -> None:
    """Transmittance gradients of hit k; only deeper hits contribute."""
    g = rc.hit_g[k]
    clam = np.conj(rc.upstream)
    base = clam * rc.trans[k] * rc.suffix[k]
    buf.d_trans_mag[g] += np.real(base * rc.ctx.unit_rho[g])
    buf.d_trans_phase[g] += -np.imag(base * rc.ctx.rho[g])


def _hit_geometry(rc: RayGradContext, k: int):
    scene = rc.scene
    g = rc.hit_g[k]
    inv = rc.ctx.inv_covs[g]
    v = rc.direction
    m = scene.rx - scene.means[g]
    a = v @ inv @ v
    b = v @ inv @ m
    c = m @ inv @ m
    t_in = scene.ress_radius if rc.hit_clamped[k] else rc.hit_d1[k]
    t_mid = 0.5 * (t_in + rc.hit_d2[k])
    delta = scene.rx + t_mid * v - scene.means[g]
    return g, inv, v, m, a, b, c, delta


def backward_mean(rc: RayGradContext, k: int, buf: GradientBuffer) -> None:
    """Mean gradient of hit k through the density and the chord midpoint."""
    g, inv, v, m, a, b, c, delta = _hit_geometry(rc, k)
    w = rc.hit_w[k]
    gw = np.real(np.conj(rc.upstream) * rc.ctx.psi[g] * rc.trans[k])
    i_delta = inv @ delta
    grad = gw * w * i_delta  # direct term
    disc = b * b - a * (c - 9.0)
    if disc >= _kernels.TANGENT_EPS:
        sq = np.sqrt(disc)
        b_mu = -inv @ v
        c_mu = -2.0 * inv @ m
        dd = (2.0 * b * b_mu - a * c_mu) / (2.0 * sq)
        dd2 = (-b_mu + dd) / a
        dd1 = np.zeros(3) if rc.hit_clamped[k] else (-b_mu - dd) / a
        dt_mid = 0.5 * (dd1 + dd2)
        s_dv = i_delta @ v
        grad += gw * (-w) * s_dv * dt_mid
    buf.d_mean[g] += grad


def backward_covariance(rc: RayGradContext, k: int, buf: GradientBuffer) -> None:
    """Covariance gradient of hit k: normalizer, exponent, and midpoint chains."""
    g, inv, v, m, a, b, c, delta = _hit_geometry(rc, k)
    w = rc.hit_w[k]
    gw = np.real(np.conj(rc.upstream) * rc.ctx.psi[g] * rc.trans[k])
    i_delta = inv @ delta
    grad = gw * w * 0.5 * (np.outer(i_delta, i_delta) - inv)
    disc = b * b - a * (c - 9.0)
    if disc >= _kernels.TANGENT_EPS:
        sq = np.sqrt(disc)
        iv = inv @ v
        im = inv @ m
        a_s = -np.outer(iv, iv)
        b_s = -np.outer(iv, im)
        c_s = -np.outer(im, im)
        ddisc = 2.0 * b * b_s - (c - 9.0) * a_s - a * c_s
        dd2 = (-b_s + ddisc / (2.0 * sq)) / a - rc.hit_d2[k] * a_s / a
        if rc.hit_clamped[k]:
            dd1 = np.zeros((3, 3))
        else:
            dd1 = (-b_s - ddisc / (2.0 * sq)) / a - rc.hit_d1[k] * a_s / a
        s_dv = i_delta @ v
        grad += gw * (-w) * s_dv * 0.5 * (dd1 + dd2)
    buf.d_cov[g] += grad


def backward_frame_reference(
    scene: RFScene,
    tx,
    upstream: np.ndarray,
    include_direction_chain: bool = True,
) -> GradientBuffer:
    """Pure-numpy backward pass over all rays; oracle for the compiled path."""
    ctx = prepare_context(scene, tx)
    upstream = np.asarray(upstream, dtype=np.complex128).reshape(-1)
    buf = GradientBuffer.zeros(scene.n, scene.coeffs.shape[1])
    p_acc = np.zeros(scene.n, dtype=np.complex128)
    for r in range(upstream.size):
        lam = upstream[r]
        rc = build_ray_context(ctx, r, lam)
        for k in range(rc.n_hits):
            backward_radiance(rc, k, buf)
            backward_transmittance(rc, k, buf)
            backward_mean(rc, k, buf)
            backward_covariance(rc, k, buf)
            p_acc[rc.hit_g[k]] += np.conj(lam) * rc.hit_w[k] * rc.trans[k]
    if include_direction_chain:
        buf.d_mean += _direction_chain(ctx, p_acc)
    buf.d_quat, buf.d_log_scale = chain_cov_to_shape(scene, buf.d_cov)
    return buf
