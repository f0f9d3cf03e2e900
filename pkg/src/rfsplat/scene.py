"""Gaussian primitives and the scene container.

Positions are numpy float64 arrays of shape (3,) in scene meters. Complex
values use numpy complex128. A primitive stores its shape as a unit
quaternion plus per-axis log scales, so the assembled covariance
R S S^T R^T is positive definite for every parameter setting, and its
complex transmittance as a logistic-reparameterized magnitude (always in
(0, 1)) plus a free phase.

The scene keeps primitive attributes in struct-of-arrays form so the render
and gradient paths can run vectorized; `primitive(i)` materializes a single
`GaussianPrimitive` view for convenience.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import fle
from .errors import ConfigError, DegenerateCovarianceError, ShapeError

__all__ = [
    "Box",
    "GaussianPrimitive",
    "RFScene",
    "SceneDefaults",
    "quat_to_rotation",
    "quats_to_rotations",
    "covariance",
    "covariances",
    "gaussian_density",
    "cube_init",
    "trans_magnitude",
    "trans_magnitude_raw",
]

_GAUSS_NORM = (2.0 * np.pi) ** (-1.5)


def trans_magnitude(raw: float | np.ndarray):
    """Transmittance magnitude from its unconstrained parameter: logistic(raw)."""
    return expit(raw)


def trans_magnitude_raw(mag: float | np.ndarray):
    """Inverse of `trans_magnitude`; `mag` must lie strictly in (0, 1)."""
    mag = np.asarray(mag, dtype=np.float64)
    if np.any(mag <= 0.0) or np.any(mag >= 1.0):
        raise ValueError("transmittance magnitude must lie strictly in (0, 1)")
    out = np.log(mag) - np.log1p(-mag)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by two corners."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))
        if self.lo.shape != (3,) or self.hi.shape != (3,):
            raise ShapeError("box corners must be 3-vectors")
        if not np.all(self.hi > self.lo):
            raise ConfigError("box is degenerate: hi must exceed lo on every axis")

    @property
    def extents(self) -> np.ndarray:
        return self.hi - self.lo


@dataclass
class GaussianPrimitive:
    """One scene element.

    Fields:
        mean: center position (3,)
        quat: rotation quaternion (w, x, y, z), unit length
        log_scale: per-axis log standard deviations (3,)
        trans_mag_raw: logit of the transmittance magnitude
        trans_phase: transmittance phase in radians
        coeffs: complex directional-response coefficients, (L+1)^2 entries
    """

    mean: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    trans_mag_raw: float
    trans_phase: float
    coeffs: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.coeffs = np.asarray(self.coeffs, dtype=np.complex128).reshape(-1)

    @property
    def trans_magnitude(self) -> float:
        return float(trans_magnitude(self.trans_mag_raw))

    def copy(self) -> "GaussianPrimitive":
        return GaussianPrimitive(
            self.mean.copy(),
            self.quat.copy(),
            self.log_scale.copy(),
            self.trans_mag_raw,
            self.trans_phase,
            self.coeffs.copy(),
        )


def quats_to_rotations(quats: np.ndarray) -> np.ndarray:
    """Rotation matrices from quaternions (w, x, y, z), shape (n, 4) -> (n, 3, 3).

    Quaternions are normalized first, so the forward map is well defined for
    any nonzero input.
    """
    q = np.asarray(quats, dtype=np.float64)
    squeeze = q.ndim == 1
    q = np.atleast_2d(q)
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("zero quaternion")
    q = q / norm
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r[0] if squeeze else r


def quat_to_rotation(quat: np.ndarray) -> np.ndarray:
    """Single-quaternion convenience wrapper around `quats_to_rotations`."""
    return quats_to_rotations(np.asarray(quat, dtype=np.float64).reshape(4))


def covariance(p: GaussianPrimitive) -> np.ndarray:
    """Covariance R S S^T R^T of one primitive; symmetric positive definite."""
    r = quat_to_rotation(p.quat)
    d = np.exp(2.0 * p.log_scale)
    return (r * d) @ r.T


def covariances(quats: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    """Batched covariance assembly, (n, 4) and (n, 3) -> (n, 3, 3)."""
    r = quats_to_rotations(quats)
    d = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    return np.einsum("nij,nj,nkj->nik", r, d, r)


def gaussian_density(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Normalized 3D Gaussian PDF value at x.

    Raises:
        DegenerateCovarianceError: condition number above 1e12.
    """
    x = np.asarray(x, dtype=np.float64).reshape(3)
    mean = np.asarray(mean, dtype=np.float64).reshape(3)
    cov = np.asarray(cov, dtype=np.float64).reshape(3, 3)
    eigvals = np.linalg.eigvalsh(cov)
    if eigvals[0] <= 0.0 or eigvals[-1] / eigvals[0] > 1e12:
        raise DegenerateCovarianceError(
            f"covariance condition number {eigvals[-1] / max(eigvals[0], 1e-300):.3e}"
        )
    delta = x - mean
    inv = np.linalg.inv(cov)
    det = np.linalg.det(cov)
    return float(_GAUSS_NORM / np.sqrt(det) * np.exp(-0.5 * delta @ inv @ delta))


@dataclass
class SceneDefaults:
    """Scene-level configuration used by cube initialization.

    `c00` seeds the isotropic directional coefficient of every primitive; a
    small nonzero value keeps the first backward pass non-degenerate. All
    higher-order coefficients start at zero.
    """

    rx: np.ndarray = field(default_factory=lambda: np.zeros(3))
    carrier_freq: float = 2.4e9
    n_az: int = 360
    n_el: int = 180
    fle_degree: int = 3
    ress_radius: float = 1.0
    c00: complex = 0.1 + 0.0j

    def __post_init__(self):
        self.rx = np.asarray(self.rx, dtype=np.float64).reshape(3)


class RFScene:
    """The full primitive set plus receiver geometry and grid configuration.

    Attribute arrays (all float64 / complex128):
        means (n, 3), quats (n, 4), log_scales (n, 3),
        trans_mag_raw (n,), trans_phase (n,), coeffs (n, (L+1)^2)

    The scene is read-shared during rendering and mutated only between
    renders by the optimizer; all attribute arrays are plain numpy buffers
    and safe to hand across threads.
    """

    def __init__(
        self,
        means: np.ndarray,
        quats: np.ndarray,
        log_scales: np.ndarray,
        trans_mag_raw: np.ndarray,
        trans_phase: np.ndarray,
        coeffs: np.ndarray,
        rx: np.ndarray,
        ress_radius: float,
        carrier_freq: float,
        bounds: Box,
        n_az: int,
        n_el: int,
        fle_degree: int = 3,
    ):
        n = len(means)
        self.means = np.asarray(means, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(log_scales, dtype=np.float64).reshape(n, 3)
        self.trans_mag_raw = np.asarray(trans_mag_raw, dtype=np.float64).reshape(n)
        self.trans_phase = np.asarray(trans_phase, dtype=np.float64).reshape(n)
        k = fle.num_coeffs(fle_degree)
        self.coeffs = np.asarray(coeffs, dtype=np.complex128).reshape(n, k)
        self.rx = np.asarray(rx, dtype=np.float64).reshape(3)
        self.ress_radius = float(ress_radius)
        self.carrier_freq = float(carrier_freq)
        self.bounds = bounds
        self.n_az = int(n_az)
        self.n_el = int(n_el)
        self.fle_degree = int(fle_degree)
        self._validate()

    def _validate(self):
        if self.ress_radius <= 0.0:
            raise ConfigError("ress_radius must be positive")
        if not (1 <= self.n_az <= 360):
            raise ConfigError("n_az must lie in 1..360")
        if not (1 <= self.n_el <= 180):
            raise ConfigError("n_el must lie in 1..180")

    @property
    def n(self) -> int:
        return self.means.shape[0]

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.means[i].copy(),
            self.quats[i].copy(),
            self.log_scales[i].copy(),
            float(self.trans_mag_raw[i]),
            float(self.trans_phase[i]),
            self.coeffs[i].copy(),
        )

    @property
    def primitives(self) -> list[GaussianPrimitive]:
        return [self.primitive(i) for i in range(self.n)]

    @classmethod
    def from_primitives(
        cls,
        prims: list[GaussianPrimitive],
        rx,
        ress_radius: float,
        carrier_freq: float,
        bounds: Box,
        n_az: int,
        n_el: int,
        fle_degree: int = 3,
    ) -> "RFScene":
        k = fle.num_coeffs(fle_degree)
        n = len(prims)
        means = np.zeros((n, 3))
        quats = np.zeros((n, 4))
        log_scales = np.zeros((n, 3))
        raw = np.zeros(n)
        phase = np.zeros(n)
        coeffs = np.zeros((n, k), dtype=np.complex128)
        for i, p in enumerate(prims):
            if p.coeffs.shape[0] != k:
                raise ShapeError(
                    f"primitive {i} has {p.coeffs.shape[0]} coefficients, expected {k}"
                )
            means[i] = p.mean
            quats[i] = p.quat
            log_scales[i] = p.log_scale
            raw[i] = p.trans_mag_raw
            phase[i] = p.trans_phase
            coeffs[i] = p.coeffs
        return cls(
            means, quats, log_scales, raw, phase, coeffs,
            rx, ress_radius, carrier_freq, bounds, n_az, n_el, fle_degree,
        )

    def keep(self, mask: np.ndarray) -> None:
        """Drop primitives where mask is False (in place)."""
        mask = np.asarray(mask, dtype=bool)
        self.means = self.means[mask]
        self.quats = self.quats[mask]
        self.log_scales = self.log_scales[mask]
        self.trans_mag_raw = self.trans_mag_raw[mask]
        self.trans_phase = self.trans_phase[mask]
        self.coeffs = self.coeffs[mask]

    def append(
        self,
        means: np.ndarray,
        quats: np.ndarray,
        log_scales: np.ndarray,
        trans_mag_raw: np.ndarray,
        trans_phase: np.ndarray,
        coeffs: np.ndarray,
    ) -> None:
        """Add primitives (in place)."""
        self.means = np.concatenate([self.means, means], axis=0)
        self.quats = np.concatenate([self.quats, quats], axis=0)
        self.log_scales = np.concatenate([self.log_scales, log_scales], axis=0)
        self.trans_mag_raw = np.concatenate([self.trans_mag_raw, trans_mag_raw])
        self.trans_phase = np.concatenate([self.trans_phase, trans_phase])
        self.coeffs = np.concatenate([self.coeffs, coeffs], axis=0)

    def copy(self) -> "RFScene":
        return RFScene(
            self.means.copy(), self.quats.copy(), self.log_scales.copy(),
            self.trans_mag_raw.copy(), self.trans_phase.copy(), self.coeffs.copy(),
            self.rx.copy(), self.ress_radius, self.carrier_freq, self.bounds,
            self.n_az, self.n_el, self.fle_degree,
        )

    def covariances(self) -> np.ndarray:
        return covariances(self.quats, self.log_scales)

    def trans_values(self) -> np.ndarray:
        """Complex transmittance per primitive, |rho| * e^{j angle(rho)}."""
        return trans_magnitude(self.trans_mag_raw) * np.exp(1j * self.trans_phase)


def cube_init(bounds: Box, cube_edge: float, defaults: SceneDefaults) -> RFScene:
    """Partition the bounds into equal cubes and seed one primitive per cube.

    Each primitive sits at a cube center with isotropic log scale
    ln(cube_edge / 2), identity rotation, transmittance magnitude 0.5 at
    phase 0, and only the isotropic directional coefficient set.

    Raises:
        ConfigError: cube_edge is not positive or exceeds the smallest extent.
    """
    if cube_edge <= 0.0:
        raise ConfigError("cube_edge must be positive")
    ext = bounds.extents
    counts = np.floor(ext / cube_edge + 1e-12).astype(int)
    if np.any(counts < 1):
        raise ConfigError(
            f"cube_edge {cube_edge} exceeds the smallest bounds extent {ext.min()}"
        )
    axes = [bounds.lo[a] + cube_edge * (np.arange(counts[a]) + 0.5) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    means = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    n = means.shape[0]
    quats = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1))
    log_scales = np.full((n, 3), np.log(cube_edge / 2.0))
    raw = np.zeros(n)
    phase = np.zeros(n)
    k = fle.num_coeffs(defaults.fle_degree)
    coeffs = np.zeros((n, k), dtype=np.complex128)
    coeffs[:, 0] = defaults.c00
    return RFScene(
        means, quats, log_scales, raw, phase, coeffs,
        defaults.rx, defaults.ress_radius, defaults.carrier_freq,
        bounds, defaults.n_az, defaults.n_el, defaults.fle_degree,
    )
