"""Forward complex-valued ray tracing.

One ray leaves the receiver through each grid cell center. For every
primitive the ray crosses (exact ray-ellipsoid test at the 3-sigma level
set), the contribution is the normalized Gaussian density at the chord
midpoint times the primitive's directional response toward the transmitter,
attenuated by the cumulative complex transmittance of everything nearer to
the receiver:

    S = sum_k  w_k * psi_k * prod_{m<k} rho_m

with hits ordered by chord midpoint distance. Spectrum entries are |S|^2
(power); the single-antenna output is the coherent sum of S over all rays.

Rays are independent; the compiled kernels parallelize over them with
read-only scene access and per-ray output slots, so results do not depend
on the worker count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import config as _numba_config
from numba import set_num_threads

from . import _kernels, fle, splat
from .errors import ContractViolationError, GeometryError, ShapeError
from .scene import RFScene

__all__ = [
    "Ray",
    "RayHit",
    "SpectrumFrame",
    "RenderContext",
    "ray_directions",
    "ray_ellipsoid_intersect",
    "transmittance_value",
    "trace_ray",
    "prepare_context",
    "render_complex_frame",
    "render_spectrum",
    "render_scalar",
]

_GAUSS_NORM = (2.0 * np.pi) ** (-1.5)


@dataclass
class Ray:
    """A ray from the receiver: origin, unit direction, and start distance."""

    origin: np.ndarray
    direction: np.ndarray
    min_t: float = 1.0

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(self.direction)
        if abs(norm - 1.0) > 1e-9:
            raise GeometryError(f"ray direction norm {norm} is not 1")
        if self.min_t <= 0.0:
            raise GeometryError("ray start distance must be positive")


@dataclass
class RayHit:
    """One ray-primitive crossing: entry/exit distances and midpoint weight."""

    gaussian_index: int
    t_in: float
    t_out: float
    weight: float

    @property
    def t_mid(self) -> float:
        return 0.5 * (self.t_in + self.t_out)


@dataclass
class SpectrumFrame:
    """Per-direction signal power on the receiving grid, shape (n_az, n_el)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ShapeError("spectrum frame must be 2-dimensional")

    @property
    def n_az(self) -> int:
        return self.data.shape[0]

    @property
    def n_el(self) -> int:
        return self.data.shape[1]


def ray_directions(n_az: int, n_el: int):
    """Unit directions through all cell centers, u-major.

    Returns (dirs (R,3), u (R,), v (R,)) with ray id r = u * n_el + v.
    """
    cell = splat.cell_size_deg(n_az)
    u = np.repeat(np.arange(n_az), n_el)
    v = np.tile(np.arange(n_el), n_az)
    alpha = np.deg2rad((u + 0.5) * cell)
    beta = np.deg2rad((v + 0.5) * cell - 90.0)
    dirs = np.stack(
        [np.cos(beta) * np.cos(alpha), np.cos(beta) * np.sin(alpha), np.sin(beta)],
        axis=1,
    )
    return dirs, u.astype(np.int64), v.astype(np.int64)


def ray_ellipsoid_intersect(ray: Ray, mean, cov) -> tuple[float, float] | None:
    """Entry/exit distances of a ray through the 3-sigma level set.

    Solves A d^2 + 2 B d + (C - 9) = 0 with A = v^T S^-1 v,
    B = v^T S^-1 (o - mu), C = (o - mu)^T S^-1 (o - mu). Returns None when
    the ray misses or exits before the start distance; the entry is clamped
    up to the start distance when the receiver sits inside the ellipsoid.
    """
    mean = np.asarray(mean, dtype=np.float64).reshape(3)
    inv = np.linalg.inv(np.asarray(cov, dtype=np.float64).reshape(3, 3))
    m = ray.origin - mean
    a = ray.direction @ inv @ ray.direction
    b = ray.direction @ inv @ m
    c = m @ inv @ m
    disc = b * b - a * (c - 9.0)
    if disc < 0.0:
        return None
    sq = np.sqrt(disc)
    d2 = (-b + sq) / a
    if d2 < ray.min_t:
        return None
    d1 = (-b - sq) / a
    return max(d1, ray.min_t), float(d2)


def transmittance_value(trans_mag_raw: float, trans_phase: float) -> complex:
    """Complex transmittance |rho| e^{j angle} from the stored parameters."""
    mag = 1.0 / (1.0 + np.exp(-trans_mag_raw))
    return complex(mag * np.exp(1j * trans_phase))


def _bearing(src, dst) -> tuple[float, float]:
    """(azimuth, elevation) of the direction from src toward dst."""
    _, alpha, beta = splat.to_spherical(dst, src)
    return alpha, beta


def trace_ray(
    ray: Ray,
    hits: Sequence[RayHit],
    scene: RFScene,
    tx,
) -> complex:
    """Blend sorted hits into the received complex signal for one ray.

    Hits must arrive sorted ascending by t_mid. Each hit's weight is the
    Gaussian density at the chord midpoint; the directional response of the
    hit primitive is evaluated toward the transmitter. Accumulation stops
    once the cumulative transmittance magnitude falls below 1e-6.

    Raises:
        ContractViolationError: hits are not sorted by t_mid.
    """
    tmids = [h.t_mid for h in hits]
    if any(tmids[i] > tmids[i + 1] for i in range(len(tmids) - 1)):
        raise ContractViolationError("hits must be sorted ascending by t_mid")
    s = 0.0 + 0.0j
    trans = 1.0 + 0.0j
    for h in hits:
        if abs(trans) < 1e-6:
            break
        g = h.gaussian_index
        alpha, beta = _bearing(scene.means[g], tx)
        psi = fle.fle_eval(scene.coeffs[g], alpha, beta)
        s += h.weight * psi * trans
        trans *= transmittance_value(
            float(scene.trans_mag_raw[g]), float(scene.trans_phase[g])
        )
    return s


@dataclass
class RenderContext:
    """Precomputed per-scene arrays shared by the forward and backward passes."""

    scene: RFScene
    tx: np.ndarray
    covs: np.ndarray
    inv_covs: np.ndarray
    norm_consts: np.ndarray
    rho: np.ndarray
    unit_rho: np.ndarray
    basis: np.ndarray
    basis_dalpha: np.ndarray
    basis_dbeta: np.ndarray
    psi: np.ndarray
    bearing_alpha: np.ndarray
    bearing_beta: np.ndarray
    bearing_valid: np.ndarray
    projection: splat.SceneProjection
    tiles: splat.TileIndex
    ray_dirs: np.ndarray
    ray_u: np.ndarray
    ray_v: np.ndarray
    splat_r2: np.ndarray


def prepare_context(scene: RFScene, tx) -> RenderContext:
    """Assemble the array form of a scene for the compiled kernels."""
    tx = np.asarray(tx, dtype=np.float64).reshape(3)
    covs = scene.covariances()
    inv_covs = np.linalg.inv(covs)
    inv_covs = 0.5 * (inv_covs + np.swapaxes(inv_covs, 1, 2))
    dets = np.linalg.det(covs)
    norm_consts = _GAUSS_NORM / np.sqrt(dets)
    mag = 1.0 / (1.0 + np.exp(-scene.trans_mag_raw))
    unit_rho = np.exp(1j * scene.trans_phase)
    rho = mag * unit_rho

    offsets = tx - scene.means
    dist = np.linalg.norm(offsets, axis=1)
    valid = dist > 1e-12
    safe = np.where(valid, dist, 1.0)
    alpha = np.arctan2(offsets[:, 1], offsets[:, 0]) % (2.0 * np.pi)
    beta = np.pi / 2.0 - np.arccos(np.clip(offsets[:, 2] / safe, -1.0, 1.0))
    alpha = np.where(valid, alpha, 0.0)
    beta = np.where(valid, beta, 0.0)
    basis, dba, dbb = fle.fle_basis_with_derivs(alpha, beta, scene.fle_degree)
    psi = np.einsum("nk,nk->n", scene.coeffs, basis)

    proj = splat.project_scene(scene, covs)
    tiles = splat.build_tiles_for_render(scene, proj)
    ray_dirs, ray_u, ray_v = ray_directions(scene.n_az, scene.n_el)
    splat_r2 = np.where(proj.active, proj.tile_radius**2, -1.0)
    return RenderContext(
        scene, tx, covs, inv_covs, norm_consts, rho, unit_rho,
        basis, dba, dbb, psi, alpha, beta, valid,
        proj, tiles, ray_dirs, ray_u, ray_v, splat_r2,
    )


def set_workers(workers: int) -> int:
    """Clamp and apply the kernel worker count; returns the effective value."""
    n = max(1, min(int(workers), _numba_config.NUMBA_NUM_THREADS))
    set_num_threads(n)
    return n


def _forward(ctx: RenderContext, workers: int, tiled: bool) -> np.ndarray:
    scene = ctx.scene
    set_workers(workers)
    out = np.empty(scene.n_az * scene.n_el, dtype=np.complex128)
    if tiled:
        _kernels.forward_tiled(
            ctx.ray_dirs,
            scene.means, ctx.inv_covs, ctx.norm_consts, ctx.rho, ctx.psi,
            ctx.projection.center_u, ctx.projection.center_v, ctx.splat_r2,
            ctx.tiles.indices, ctx.tiles.ranges, ctx.tiles.tiles_u,
            scene.rx, scene.ress_radius, scene.n_az, scene.n_el,
            out,
        )
    else:
        _kernels.forward_naive(
            ctx.ray_dirs,
            scene.means, ctx.inv_covs, ctx.norm_consts, ctx.rho, ctx.psi,
            ctx.splat_r2,
            scene.rx, scene.ress_radius, scene.n_az,
            out,
        )
    return out.reshape(scene.n_az, scene.n_el)


def render_complex_frame(
    scene: RFScene, tx, workers: int = 1, tiled: bool = True,
    ctx: RenderContext | None = None,
) -> np.ndarray:
    """Complex received signal for every ray, shape (n_az, n_el)."""
    if ctx is None:
        ctx = prepare_context(scene, tx)
    return _forward(ctx, workers, tiled)


def render_spectrum(
    scene: RFScene, tx, workers: int = 1,
    ctx: RenderContext | None = None,
) -> SpectrumFrame:
    """Spatial power spectrum: squared magnitude of the per-ray signal."""
    frame = render_complex_frame(scene, tx, workers, ctx=ctx)
    return SpectrumFrame(np.abs(frame) ** 2)


def render_scalar(
    scene: RFScene, tx, workers: int = 1,
    ctx: RenderContext | None = None,
) -> complex:
    """Coherent complex sum over all rays (single-antenna output)."""
    frame = render_complex_frame(scene, tx, workers, ctx=ctx)
    return complex(frame.sum())
