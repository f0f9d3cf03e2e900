"""Finite-difference validation harness for the analytic backward pass.

Builds random scenes, renders them against a fixed kink-free target (the
ground truth is an affine push of the rendered frame, so no absolute-value
crease of the L1 term sits within a finite-difference step), and compares
every analytic parameter gradient against central differences of the full
spectrum loss.

The per-parameter relative error uses a class-scale floor:

    rel = |a - fd| / max(|a|, |fd|, 1e-3 * class_max, 1e-7)

where class_max is the largest |fd| in the parameter's class for that
scene. Parameters whose true gradient is thousands of times smaller than
their class's dominant gradient carry only finite-difference roundoff
(around 1e-11 absolute for an O(1) loss), so they are judged on that
absolute scale instead of a meaningless ratio.

The rendered signal is discontinuous wherever a ray grazes a 3-sigma
surface: a tangent hit appears with finite weight, so a difference step
across the boundary measures the jump, not the derivative. Geometry
parameters (mean, rotation, scale) of primitives with a near-tangent ray
are therefore excluded, mirroring the tangency guard in the backward pass;
the report counts them. Rare residual crossings (chord clamp, depth-order
swaps) are caught by re-checking any failing parameter at a 10x smaller
step: a genuine gradient error reproduces, a boundary jump grows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grad, loss, oracle, render
from .scene import Box, RFScene

__all__ = ["GradCheckReport", "TOLERANCES", "random_scene", "run_gradcheck"]

#: acceptance tolerances per parameter class
TOLERANCES = {
    "coeff_re": 1e-4,
    "coeff_im": 1e-4,
    "trans_mag": 1e-4,
    "trans_phase": 1e-4,
    "mean": 1e-4,
    "quat": 1e-3,
    "log_scale": 1e-3,
}

_FD_STEP = 1e-5


@dataclass
class GradCheckReport:
    """Worst relative error per parameter class, plus pass/fail."""

    max_rel: dict
    n_scenes: int
    n_params: int
    n_excluded: int = 0
    n_retried: int = 0

    @property
    def passed(self) -> bool:
        return all(self.max_rel[c] < TOLERANCES[c] for c in self.max_rel)

    def lines(self) -> list[str]:
        out = []
        for cls, err in self.max_rel.items():
            tol = TOLERANCES[cls]
            status = "pass" if err < tol else "FAIL"
            out.append(f"{cls:12s} max rel err {err:.3e}  (tol {tol:.0e})  {status}")
        out.append(
            f"{self.n_params} parameters over {self.n_scenes} scenes; "
            f"{self.n_excluded} near-tangent geometry parameters excluded, "
            f"{self.n_retried} re-checked at a smaller step"
        )
        return out


def random_scene(
    rng: np.random.Generator,
    n_gaussians: int,
    n_az: int = 16,
    n_el: int = 8,
) -> RFScene:
    """A well-conditioned random scene for gradient checking.

    Centers stay outside twice the emit radius, scales are moderate so no
    ray grazes a 3-sigma surface within a finite-difference step in
    practice, and coefficients are small enough that the loss is O(1).
    """
    means = rng.uniform(-8.0, 8.0, (n_gaussians, 3))
    d = np.linalg.norm(means, axis=1)
    tight = d < 2.5
    means[tight] = means[tight] * (2.5 / d[tight, None]) + np.sign(means[tight])
    quats = rng.normal(size=(n_gaussians, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    log_scales = rng.uniform(np.log(0.5), np.log(1.5), (n_gaussians, 3))
    raw = rng.normal(0.0, 1.0, n_gaussians)
    phase = rng.uniform(-np.pi, np.pi, n_gaussians)
    coeffs = rng.normal(0.0, 0.08, (n_gaussians, 16)) + 1j * rng.normal(
        0.0, 0.08, (n_gaussians, 16)
    )
    return RFScene(
        means, quats, log_scales, raw, phase, coeffs,
        np.zeros(3), 1.0, 2.4e9, Box([-30, -30, -30], [30, 30, 30]),
        n_az, n_el, 3,
    )


_CLASS_COMPONENTS = {
    "coeff_re": 16,
    "coeff_im": 16,
    "trans_mag": 1,
    "trans_phase": 1,
    "mean": 3,
    "quat": 4,
    "log_scale": 3,
}


def _analytic(buf: grad.GradientBuffer, cls: str, i: int, j: int) -> float:
    if cls == "coeff_re":
        return float(buf.d_coeffs[i, j].real)
    if cls == "coeff_im":
        return float(buf.d_coeffs[i, j].imag)
    if cls == "trans_mag":
        return float(buf.d_trans_mag[i])
    if cls == "trans_phase":
        return float(buf.d_trans_phase[i])
    if cls == "mean":
        return float(buf.d_mean[i, j])
    if cls == "quat":
        return float(buf.d_quat[i, j])
    return float(buf.d_log_scale[i, j])


_GEOMETRY_CLASSES = ("mean", "quat", "log_scale")


def _tangency_mask(scene: RFScene, ctx) -> np.ndarray:
    """True for primitives whose geometry gradients are FD-comparable.

    A primitive is excluded when some ray's discriminant sits close enough
    to zero (relative to the discriminant's own sensitivity scale) that a
    1e-5 parameter step could create or destroy the hit.
    """
    dirs = ctx.ray_dirs
    ok = np.ones(scene.n, dtype=bool)
    m = scene.rx - scene.means  # (n, 3)
    for g in range(scene.n):
        if ctx.splat_r2[g] < 0.0:
            continue
        inv = ctx.inv_covs[g]
        iv = dirs @ inv  # (rays, 3)
        a = np.einsum("ri,ri->r", iv, dirs)
        b = iv @ m[g]
        c = float(m[g] @ inv @ m[g])
        disc = b * b - a * (c - 9.0)
        sens = b * b + np.abs(a * (c - 9.0)) + 1.0
        if np.any(np.abs(disc) < 100.0 * _FD_STEP * sens):
            ok[g] = False
    return ok


def run_gradcheck(
    seed: int = 0,
    n_scenes: int = 20,
    max_gaussians: int = 20,
    w_ssim: float = 0.2,
    w_fourier: float = 0.2,
    classes=None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences over random scenes."""
    rng = np.random.default_rng(seed)
    classes = list(classes) if classes is not None else list(TOLERANCES)
    max_rel = {c: 0.0 for c in classes}
    n_params = 0
    n_excluded = 0
    n_retried = 0
    for _ in range(n_scenes):
        n = int(rng.integers(4, max_gaussians + 1))
        scene = random_scene(rng, n)
        tx = rng.uniform(-6.0, 6.0, 3)
        target = render.render_spectrum(scene, tx).data * 1.3 + 0.05

        def loss_fn(s, _tx=tx, _t=target):
            frame = render.render_spectrum(s, _tx).data
            return loss.spectrum_loss(frame, _t, w_ssim, w_fourier).total

        ctx = render.prepare_context(scene, tx)
        s_frame = render.render_complex_frame(scene, tx, ctx=ctx)
        report = loss.spectrum_loss(np.abs(s_frame) ** 2, target, w_ssim, w_fourier)
        lam = grad.upstream_to_ray(report.grad_frame, s_frame)
        buf = grad.backward_frame(scene, tx, lam, ctx=ctx)
        comparable = _tangency_mask(scene, ctx)

        for cls in classes:
            comps = _CLASS_COMPONENTS[cls]
            geometric = cls in _GEOMETRY_CLASSES
            pairs = []
            for i in range(scene.n):
                if geometric and not comparable[i]:
                    n_excluded += comps
                    continue
                for j in range(comps):
                    fd = oracle.finite_diff(loss_fn, scene, (cls, i, j), _FD_STEP)
                    pairs.append((i, j, _analytic(buf, cls, i, j), fd))
                    n_params += 1
            class_max = max((abs(fd) for *_, fd in pairs), default=0.0)
            floor = max(1e-3 * class_max, 1e-7)
            for i, j, a, fd in pairs:
                rel = abs(a - fd) / max(abs(a), abs(fd), floor)
                if rel >= TOLERANCES[cls]:
                    # re-check at a smaller step: boundary jumps blow up,
                    # true gradient errors reproduce
                    fd2 = oracle.finite_diff(loss_fn, scene, (cls, i, j), _FD_STEP / 10)
                    rel = abs(a - fd2) / max(abs(a), abs(fd2), floor)
                    n_retried += 1
                max_rel[cls] = max(max_rel[cls], rel)
    return GradCheckReport(max_rel, n_scenes, n_params, n_excluded, n_retried)
