"""Ground-truth generators and reference implementations.

Three independent oracles live here:

* a multipath physics simulator (coherent sum of per-path complex gains
  from geometric path lengths) used to manufacture synthetic datasets,
* a naive renderer that tests every Gaussian against every ray with a
  comparison sort, the reference the tiled renderer is checked against,
* a central-finite-difference engine over scene parameters, the reference
  for the analytic gradients.

Path amplitudes are explicit per path; an optional free-space rolloff
divides each amplitude by the traveled distance for more realistic data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import render, splat
from .errors import GeometryError
from .render import SpectrumFrame
from .scene import RFScene

__all__ = [
    "SPEED_OF_LIGHT",
    "PathSpec",
    "SyntheticScene",
    "path_length",
    "multipath_signal",
    "spectrum_oracle",
    "rssi_oracle",
    "csi_oracle",
    "naive_render",
    "finite_diff",
    "param_get",
    "param_set",
    "PARAM_CLASSES",
]

#: RF propagation speed in m/s. The idealized 3e8 value makes the canonical
#: quarter-wavelength geometry (2.4 GHz, path lengths 3 m and 3.0625 m) land
#: exactly on opposite phases.
SPEED_OF_LIGHT = 3.0e8


@dataclass
class PathSpec:
    """One propagation path: direct (reflector=None) or single-bounce.

    extra_phase models the phase change picked up at the reflection;
    amplitude is the explicit path gain.
    """

    reflector: np.ndarray | None = None
    amplitude: float = 1.0
    extra_phase: float = 0.0

    def __post_init__(self):
        if self.reflector is not None:
            self.reflector = np.asarray(self.reflector, dtype=np.float64).reshape(3)
        if self.amplitude < 0.0:
            raise ValueError("path amplitude must be non-negative")


@dataclass
class SyntheticScene:
    """Transmitter positions plus the shared path geometry toward one receiver."""

    tx_positions: list
    rx: np.ndarray
    paths: list[PathSpec]
    carrier_freq: float = 2.4e9
    rolloff: bool = False

    def __post_init__(self):
        self.rx = np.asarray(self.rx, dtype=np.float64).reshape(3)
        self.tx_positions = [
            np.asarray(p, dtype=np.float64).reshape(3) for p in self.tx_positions
        ]


def path_length(path: PathSpec, tx, rx) -> float:
    """Geometric length: direct distance or the two-leg bounce distance."""
    tx = np.asarray(tx, dtype=np.float64).reshape(3)
    rx = np.asarray(rx, dtype=np.float64).reshape(3)
    if path.reflector is None:
        d = float(np.linalg.norm(tx - rx))
    else:
        d = float(
            np.linalg.norm(tx - path.reflector) + np.linalg.norm(path.reflector - rx)
        )
    if d <= 0.0:
        raise GeometryError("zero-length propagation path")
    return d


def multipath_signal(paths: list[PathSpec], tx, rx, f_c: float, rolloff: bool = False) -> complex:
    """Coherent sum of path gains A_i e^{j phi_i}, phi_i = 2 pi f_c d_i / c + theta_i."""
    total = 0.0 + 0.0j
    for p in paths:
        d = path_length(p, tx, rx)
        amp = p.amplitude / d if rolloff else p.amplitude
        phase = 2.0 * np.pi * f_c * (d / SPEED_OF_LIGHT) + p.extra_phase
        total += amp * np.exp(1j * phase)
    return complex(total)


def _arrival_bearing(path: PathSpec, tx, rx) -> tuple[float, float]:
    """Bearing (azimuth, elevation) of the path's last leg into the receiver."""
    src = tx if path.reflector is None else path.reflector
    _, alpha, beta = splat.to_spherical(src, rx)
    return alpha, beta


def spectrum_oracle(
    paths: list[PathSpec],
    tx,
    rx,
    f_c: float,
    n_az: int,
    n_el: int,
    sigma_beam: float = 2.0,
    rolloff: bool = False,
) -> SpectrumFrame:
    """Ground-truth spatial spectrum from explicit paths.

    Each path deposits its complex gain at the grid cell of its arrival
    bearing, spread over neighboring cells by a circular Gaussian kernel of
    angular width sigma_beam (degrees); a cell's power is the squared
    magnitude of its coherent sum. sigma_beam -> 0 degenerates to a delta
    at the arrival cell.
    """
    cell = splat.cell_size_deg(n_az)
    field_sum = np.zeros((n_az, n_el), dtype=np.complex128)
    uu = np.arange(n_az)[:, None]
    vv = np.arange(n_el)[None, :]
    sigma_cells = sigma_beam / cell
    for p in paths:
        alpha, beta = _arrival_bearing(p, tx, rx)
        u0, v0 = splat.to_grid(alpha, beta, n_az, n_el)
        gain = _gain(p, tx, rx, f_c, rolloff)
        if sigma_cells <= 0.0:
            field_sum[u0, v0] += gain
            continue
        du = np.abs(uu - u0)
        du = np.minimum(du, n_az - du)
        dv = vv - v0
        kernel = np.exp(-(du * du + dv * dv) / (2.0 * sigma_cells**2))
        field_sum += gain * kernel
    return SpectrumFrame(np.abs(field_sum) ** 2)


def _gain(path: PathSpec, tx, rx, f_c: float, rolloff: bool) -> complex:
    d = path_length(path, tx, rx)
    amp = path.amplitude / d if rolloff else path.amplitude
    return amp * np.exp(1j * (2.0 * np.pi * f_c * (d / SPEED_OF_LIGHT) + path.extra_phase))


def rssi_oracle(paths, tx, rx, f_c: float, rolloff: bool = False) -> float:
    """Received power in dBm: 10 log10 |sum|^2, floored at -200 dBm."""
    s = multipath_signal(paths, tx, rx, f_c, rolloff)
    p = abs(s) ** 2
    if p <= 1e-20:
        return -200.0
    return float(10.0 * np.log10(p))


def csi_oracle(
    paths, tx, rx, f_c: float, n_subcarriers: int = 26,
    spacing: float = 312.5e3, rolloff: bool = False,
) -> np.ndarray:
    """Per-subcarrier complex response at f_c + k * spacing."""
    return np.array(
        [
            multipath_signal(paths, tx, rx, f_c + k * spacing, rolloff)
            for k in range(n_subcarriers)
        ],
        dtype=np.complex128,
    )


def naive_render(
    scene: RFScene, tx, workers: int = 1,
    ctx: render.RenderContext | None = None,
) -> np.ndarray:
    """Reference renderer: every Gaussian tested against every ray, no tiling.

    Kept bitwise deterministic by fixed per-ray hit ordering (t_mid, then
    primitive index). Returns the complex frame, shape (n_az, n_el).
    """
    return render.render_complex_frame(scene, tx, workers=workers, tiled=False, ctx=ctx)


# parameter access for finite differencing -------------------------------

PARAM_CLASSES = (
    "mean",
    "quat",
    "log_scale",
    "trans_mag",
    "trans_phase",
    "coeff_re",
    "coeff_im",
)


def param_get(scene: RFScene, cls: str, i: int, j: int = 0) -> float:
    """Read one scalar parameter of primitive i (component j where relevant)."""
    if cls == "mean":
        return float(scene.means[i, j])
    if cls == "quat":
        return float(scene.quats[i, j])
    if cls == "log_scale":
        return float(scene.log_scales[i, j])
    if cls == "trans_mag":
        return float(1.0 / (1.0 + np.exp(-scene.trans_mag_raw[i])))
    if cls == "trans_phase":
        return float(scene.trans_phase[i])
    if cls == "coeff_re":
        return float(scene.coeffs[i, j].real)
    if cls == "coeff_im":
        return float(scene.coeffs[i, j].imag)
    raise ValueError(f"unknown parameter class {cls!r}")


def param_set(scene: RFScene, cls: str, i: int, value: float, j: int = 0) -> None:
    """Write one scalar parameter of primitive i (component j where relevant)."""
    if cls == "mean":
        scene.means[i, j] = value
    elif cls == "quat":
        scene.quats[i, j] = value
    elif cls == "log_scale":
        scene.log_scales[i, j] = value
    elif cls == "trans_mag":
        if not 0.0 < value < 1.0:
            raise ValueError("transmittance magnitude must stay in (0, 1)")
        scene.trans_mag_raw[i] = np.log(value) - np.log1p(-value)
    elif cls == "trans_phase":
        scene.trans_phase[i] = value
    elif cls == "coeff_re":
        scene.coeffs[i, j] = value + 1j * scene.coeffs[i, j].imag
    elif cls == "coeff_im":
        scene.coeffs[i, j] = scene.coeffs[i, j].real + 1j * value
    else:
        raise ValueError(f"unknown parameter class {cls!r}")


def finite_diff(loss_fn, scene: RFScene, selector, h: float) -> float:
    """Central difference of a scalar loss along one scene parameter.

    selector is (class, primitive index) or (class, primitive index,
    component). Non-finite losses at the perturbed points are reported via
    ValueError naming the parameter.
    """
    if h <= 0.0:
        raise ValueError("step must be positive")
    cls, i, *rest = selector
    j = rest[0] if rest else 0
    base = param_get(scene, cls, i, j)
    try:
        param_set(scene, cls, i, base + h, j)
        hi = loss_fn(scene)
        param_set(scene, cls, i, base - h, j)
        lo = loss_fn(scene)
    finally:
        param_set(scene, cls, i, base, j)
    if not (np.isfinite(hi) and np.isfinite(lo)):
        raise ValueError(f"non-finite loss while differencing {selector}")
    return (hi - lo) / (2.0 * h)
