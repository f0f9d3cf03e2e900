"""Orthographic projection of 3D Gaussians onto the receiving angular grid.

The receiver sees the scene through an azimuth/elevation grid. Azimuth
always spans the full circle; the cell size is 360/n_az degrees on both
axes, and elevation rows start at -90 degrees, so a 360x180 grid is the
full sphere at one degree, 360x90 the lower hemisphere at one degree, and
coarser grids (e.g. 180x45 at two degrees, 72x18 at five) keep the same
convention. Grid mapping:

    u = floor(alpha_deg / cell),  v = floor((beta_deg + 90) / cell)

with v clamped into [0, n_el - 1].

Each Gaussian is projected orthographically along its center direction: the
projected center is the grid position of the unit direction vector, the
projected covariance is J Sigma J^T with J the analytic Jacobian of the
(u, v) map at the center, and the splat radius is 3 * sqrt(lambda_max) grid
cells. Tiling groups rays into 16x16 blocks and sorts (tile, splat)
incidences by a single 64-bit key: tile index in the high 32 bits, the
IEEE-754 bit pattern of the float32 depth (order-preserving for
non-negative values) in the low 32 bits.

The linearized splat radius slightly underestimates the true angular
silhouette of a nearby ellipsoid, so the render path registers tiles with a
rigorous bound from the primitive's 3-sigma bounding sphere instead; rays
make the final call with an exact ray-ellipsoid test. Tiles therefore only
ever overapproximate, never miss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import GeometryError, ShapeError
from .scene import RFScene

__all__ = [
    "Splat2D",
    "TileIndex",
    "SceneProjection",
    "TILE_SIZE",
    "cell_size_deg",
    "to_spherical",
    "to_grid",
    "spherical_jacobian",
    "project_gaussian",
    "project_scene",
    "intersects",
    "pack_key",
    "depth_code",
    "build_tiles",
]

TILE_SIZE = 16
_RAD2DEG = 180.0 / np.pi


def cell_size_deg(n_az: int) -> float:
    """Angular width of one grid cell in degrees (same on both axes)."""
    return 360.0 / n_az


@dataclass
class Splat2D:
    """A primitive's projection onto the receiving grid.

    center_u/center_v are real-valued grid coordinates (cells), radius_px is
    the 3-sigma radius of the projected covariance in cells, depth the
    distance from the receiver to the primitive center in meters.
    """

    gaussian_index: int
    center_u: float
    center_v: float
    radius_px: float
    depth: float


@dataclass
class TileIndex:
    """Sorted (tile, splat) incidences with per-tile ranges.

    keys/indices are sorted ascending by key; ranges[t] = (start, end) into
    them for tile t. Tile t covers rays u in [16*(t % tiles_u), ...) and
    v in [16*(t // tiles_u), ...).
    """

    n_az: int
    n_el: int
    tiles_u: int
    tiles_v: int
    keys: np.ndarray
    indices: np.ndarray
    ranges: np.ndarray

    @property
    def n_tiles(self) -> int:
        return self.tiles_u * self.tiles_v


@dataclass
class SceneProjection:
    """Vectorized projection of a whole scene.

    active marks primitives outside the ray-emitting sphere (the others are
    skipped entirely); tile_radius is the conservative incidence radius in
    cells used for tiling and the per-ray disc prefilter.
    """

    active: np.ndarray
    center_u: np.ndarray
    center_v: np.ndarray
    radius_px: np.ndarray
    tile_radius: np.ndarray
    depth: np.ndarray


def to_spherical(p, rx) -> tuple[float, float, float]:
    """Cartesian point to (distance, azimuth, elevation) about the receiver.

    azimuth = atan2(y, x) of the offset mapped into [0, 2*pi); elevation =
    pi/2 - arccos(z / distance) in [-pi/2, pi/2].

    Raises:
        GeometryError: zero-length offset.
    """
    offset = np.asarray(p, dtype=np.float64).reshape(3) - np.asarray(
        rx, dtype=np.float64
    ).reshape(3)
    dist = float(np.linalg.norm(offset))
    if dist == 0.0:
        raise GeometryError("point coincides with the receiver")
    alpha = float(np.arctan2(offset[1], offset[0])) % (2.0 * np.pi)
    beta = float(np.pi / 2.0 - np.arccos(np.clip(offset[2] / dist, -1.0, 1.0)))
    return dist, alpha, beta


def to_grid(alpha: float, beta: float, n_az: int = 360, n_el: int = 180) -> tuple[int, int]:
    """Angular direction to integer grid cell, elevation clamped into range."""
    cell = cell_size_deg(n_az)
    u = int(np.floor(alpha * _RAD2DEG / cell))
    u = min(max(u, 0), n_az - 1)
    v = int(np.floor((beta * _RAD2DEG + 90.0) / cell))
    v = min(max(v, 0), n_el - 1)
    return u, v


def spherical_jacobian(offset: np.ndarray, n_az: int = 360) -> np.ndarray:
    """2x3 Jacobian of the (u, v) grid map w.r.t. world position, cells per meter.

    Row 0 is the azimuth row, row 1 the elevation row, both evaluated at the
    given offset from the receiver. Singular on the polar axis.
    """
    offset = np.asarray(offset, dtype=np.float64).reshape(3)
    x, y, z = offset
    rho2 = x * x + y * y
    r2 = rho2 + z * z
    if rho2 == 0.0:
        raise GeometryError("Jacobian undefined on the polar axis")
    rho = np.sqrt(rho2)
    scale = _RAD2DEG / cell_size_deg(n_az)
    j = np.empty((2, 3), dtype=np.float64)
    j[0] = scale * np.array([-y / rho2, x / rho2, 0.0])
    j[1] = scale * np.array([-z * x / (rho * r2), -z * y / (rho * r2), rho / r2])
    return j


def project_gaussian(
    mean,
    cov,
    rx,
    n_az: int = 360,
    n_el: int = 180,
    ress_radius: float = 1.0,
    gaussian_index: int = 0,
) -> Splat2D | None:
    """Project one Gaussian onto the grid; None when inside the emit sphere.

    Raises:
        GeometryError: mean within 1e-9 of the receiver.
    """
    mean = np.asarray(mean, dtype=np.float64).reshape(3)
    rx = np.asarray(rx, dtype=np.float64).reshape(3)
    offset = mean - rx
    depth = float(np.linalg.norm(offset))
    if depth < 1e-9:
        raise GeometryError("Gaussian centered on the receiver")
    if depth < ress_radius:
        return None
    _, alpha, beta = to_spherical(mean, rx)
    cell = cell_size_deg(n_az)
    cu = alpha * _RAD2DEG / cell
    cv = (beta * _RAD2DEG + 90.0) / cell
    rho2 = offset[0] ** 2 + offset[1] ** 2
    if rho2 <= (1e-12 * depth) ** 2:
        # Polar direction: azimuth is degenerate, the splat spans the grid.
        radius = float(n_az + n_el)
    else:
        j = spherical_jacobian(offset, n_az)
        cov2d = j @ np.asarray(cov, dtype=np.float64).reshape(3, 3) @ j.T
        # Largest eigenvalue of a symmetric 2x2 in closed form.
        half_tr = 0.5 * (cov2d[0, 0] + cov2d[1, 1])
        det = cov2d[0, 0] * cov2d[1, 1] - cov2d[0, 1] * cov2d[1, 0]
        lam_max = half_tr + np.sqrt(max(half_tr * half_tr - det, 0.0))
        radius = 3.0 * float(np.sqrt(max(lam_max, 0.0)))
    return Splat2D(gaussian_index, cu, cv, radius, depth)


def project_scene(scene: RFScene, covs: np.ndarray | None = None) -> SceneProjection:
    """Vectorized projection of every primitive.

    The conservative tile radius comes from the primitive's 3-sigma bounding
    sphere: half-angle asin(r3 / depth), widened to the azimuth span of that
    cap at its worst covered elevation, plus two cells of discretization
    slack. A sphere that reaches the receiver covers the whole grid.
    """
    if covs is None:
        covs = scene.covariances()
    n = scene.n
    offsets = scene.means - scene.rx
    depth = np.linalg.norm(offsets, axis=1)
    if np.any(depth < 1e-9):
        raise GeometryError("a Gaussian is centered on the receiver")
    active = depth >= scene.ress_radius

    cell = cell_size_deg(scene.n_az)
    cover_all = float(scene.n_az + scene.n_el)
    alpha = np.arctan2(offsets[:, 1], offsets[:, 0]) % (2.0 * np.pi)
    beta = np.pi / 2.0 - np.arccos(np.clip(offsets[:, 2] / depth, -1.0, 1.0))
    cu = alpha * _RAD2DEG / cell
    cv = (beta * _RAD2DEG + 90.0) / cell

    # linearized 3-sigma radius of J Sigma J^T
    x, y, z = offsets[:, 0], offsets[:, 1], offsets[:, 2]
    rho2 = x * x + y * y
    r2 = rho2 + z * z
    polar = rho2 <= (1e-12 * depth) ** 2
    rho_s = np.sqrt(np.where(polar, 1.0, rho2))
    scale = _RAD2DEG / cell
    j = np.zeros((n, 2, 3))
    j[:, 0, 0] = -y / rho2.clip(min=1e-300)
    j[:, 0, 1] = x / rho2.clip(min=1e-300)
    j[:, 1, 0] = -z * x / (rho_s * r2)
    j[:, 1, 1] = -z * y / (rho_s * r2)
    j[:, 1, 2] = rho_s / r2
    j *= scale
    cov2d = np.einsum("nij,njk,nlk->nil", j, covs, j)
    half_tr = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    det2 = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    lam_max = half_tr + np.sqrt(np.maximum(half_tr * half_tr - det2, 0.0))
    radius_px = np.where(polar, cover_all, 3.0 * np.sqrt(np.maximum(lam_max, 0.0)))

    # conservative incidence radius from the 3-sigma bounding sphere
    lam3 = np.linalg.eigvalsh(covs)[:, -1]
    r3 = 3.0 * np.sqrt(np.maximum(lam3, 0.0))
    inside = depth <= r3
    with np.errstate(invalid="ignore", divide="ignore"):
        theta = np.arcsin(np.clip(r3 / depth, 0.0, 1.0))
        cos_lo = np.minimum(np.cos(beta - theta), np.cos(beta + theta))
        pole_touch = cos_lo <= np.sin(theta)
        az_extent = np.arcsin(np.clip(np.sin(theta) / np.where(pole_touch, 1.0, cos_lo), 0.0, 1.0))
    extent = np.where(pole_touch, np.pi, np.maximum(theta, az_extent))
    tile_radius = np.minimum(extent * _RAD2DEG / cell + 2.0, cover_all)
    tile_radius = np.where(inside | polar, cover_all, tile_radius)
    return SceneProjection(active, cu, cv, radius_px, tile_radius, depth)


def intersects(s: Splat2D, u: int, v: int, n_az: int = 360) -> bool:
    """Disc test between a ray cell and a splat, azimuth wrapping at n_az."""
    du = abs(u - s.center_u)
    du = min(du, n_az - du)
    dv = v - s.center_v
    return du * du + dv * dv <= s.radius_px * s.radius_px


def depth_code(depth: float) -> int:
    """Order-preserving 32-bit code of a non-negative float depth."""
    if depth < 0.0:
        raise AssertionError("negative depth reached the sort key")
    return int(np.float32(depth).view(np.uint32))


def pack_key(tile: int, depth: float) -> int:
    """64-bit sort key: tile index in the high half, depth code in the low half."""
    return (tile << 32) | depth_code(depth)


def _tiles_from_arrays(
    cu: np.ndarray,
    cv: np.ndarray,
    radius: np.ndarray,
    depth: np.ndarray,
    gidx: np.ndarray,
    n_az: int,
    n_el: int,
) -> TileIndex:
    """Shared tile construction: rectangle cover of each disc, key sort, ranges."""
    if np.any(depth < 0.0):
        raise AssertionError("negative depth reached the tile index")
    tiles_u = (n_az + TILE_SIZE - 1) // TILE_SIZE
    tiles_v = (n_el + TILE_SIZE - 1) // TILE_SIZE
    n_tiles = tiles_u * tiles_v
    m = cu.shape[0]

    v_lo = np.clip(np.floor(cv - radius).astype(np.int64), 0, n_el - 1)
    v_hi = np.clip(np.floor(cv + radius).astype(np.int64), -1, n_el - 1)
    off_grid = (np.floor(cv + radius) < 0) | (np.floor(cv - radius) > n_el - 1)
    tv_lo = v_lo // TILE_SIZE
    tv_hi = np.where(off_grid, np.int64(-1), v_hi // TILE_SIZE)

    u_lo = np.floor(cu - radius).astype(np.int64)
    u_hi = np.floor(cu + radius).astype(np.int64)
    span_all = (u_hi - u_lo + 1) >= n_az
    a = np.mod(u_lo, n_az)
    b = a + (u_hi - u_lo)
    wrap = b > n_az - 1
    s1_lo = a // TILE_SIZE
    s1_hi = np.where(wrap, np.int64(tiles_u - 1), np.minimum(b, n_az - 1) // TILE_SIZE)
    s2_lo = np.zeros(m, dtype=np.int64)
    s2_hi = np.where(wrap, (b - n_az) // TILE_SIZE, np.int64(-1))
    # merged wraparound segments degenerate to full cover
    full = span_all | (wrap & (s2_hi >= s1_lo))
    s1_lo = np.where(full, np.int64(0), s1_lo)
    s1_hi = np.where(full, np.int64(tiles_u - 1), s1_hi)
    s2_hi = np.where(full, np.int64(-1), s2_hi)

    codes = (
        np.asarray(depth, dtype=np.float32).view(np.uint32).astype(np.uint64)
    )
    keys, flat_idx = _kernels.expand_tile_rects(
        s1_lo, s1_hi, s2_lo, s2_hi, tv_lo, tv_hi, codes,
        np.asarray(gidx, dtype=np.int64), tiles_u,
    )
    order = np.argsort(keys, kind="stable")
    keys = keys[order]
    flat_idx = flat_idx[order]
    ranges = np.zeros((n_tiles, 2), dtype=np.int64)
    tile_of = (keys >> np.uint64(32)).astype(np.int64)
    ranges[:, 0] = np.searchsorted(tile_of, np.arange(n_tiles), side="left")
    ranges[:, 1] = np.searchsorted(tile_of, np.arange(n_tiles), side="right")
    return TileIndex(n_az, n_el, tiles_u, tiles_v, keys, flat_idx, ranges)


def build_tiles(
    splats: list[Splat2D],
    n_az: int,
    n_el: int,
    radii: np.ndarray | None = None,
) -> TileIndex:
    """Build the sorted tile index from projected splats.

    A splat is registered with every tile whose 16x16 ray block overlaps the
    bounding box of its disc (wrapping in azimuth). `radii` optionally
    overrides the per-splat disc radius; the render path passes its
    conservative radii here.
    """
    if radii is not None and len(radii) != len(splats):
        raise ShapeError("radius override length must match the splat list")
    cu = np.array([s.center_u for s in splats], dtype=np.float64)
    cv = np.array([s.center_v for s in splats], dtype=np.float64)
    depth = np.array([s.depth for s in splats], dtype=np.float64)
    gidx = np.array([s.gaussian_index for s in splats], dtype=np.int64)
    r = (
        np.asarray(radii, dtype=np.float64)
        if radii is not None
        else np.array([s.radius_px for s in splats], dtype=np.float64)
    )
    return _tiles_from_arrays(cu, cv, r, depth, gidx, n_az, n_el)


def build_tiles_for_render(scene: RFScene, proj: SceneProjection) -> TileIndex:
    """Tile index over the active primitives using conservative radii."""
    idx = np.nonzero(proj.active)[0]
    return _tiles_from_arrays(
        proj.center_u[idx], proj.center_v[idx], proj.tile_radius[idx],
        proj.depth[idx], idx, scene.n_az, scene.n_el,
    )
