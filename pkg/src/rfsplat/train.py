"""SGD training loop with adaptive density control.

Every attribute has its own learning rate; the mean's rate decays
exponentially from lr_mean_start to lr_mean_end over the configured
iteration count. Primitive density adapts during the first half of
training only: primitives whose mean-gradient moving average exceeds a
threshold are cloned (small radius) or split (large radius), and
primitives with transmittance magnitude below a floor are pruned.

Threshold conventions are strict: a primitive densifies only when its
gradient average is strictly above the threshold, splits only when its
radius is strictly above the radius threshold (at the boundary it clones),
and is pruned only when its transmittance magnitude is strictly below the
prune floor.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import grad, io, loss, render
from .errors import ConfigError, NonFiniteGradientError
from .grad import GradientBuffer
from .scene import RFScene

__all__ = [
    "TrainConfig",
    "TrainState",
    "DensifyReport",
    "PruneReport",
    "TraceRow",
    "TrainResult",
    "lr_mean",
    "sgd_step",
    "densify",
    "prune",
    "train_loop",
]

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the reference operating point."""

    iterations: int = 30000
    lr_transmittance: float = 0.01
    lr_radiance: float = 0.0025
    lr_scale: float = 0.01
    lr_rotation: float = 0.005
    lr_mean_start: float = 0.00016
    lr_mean_end: float = 1.6e-6
    densify_grad_threshold: float = 0.0002
    densify_radius_threshold: float = 10.0
    prune_threshold: float = 0.004
    densify_every: int = 100
    prune_every: int = 100
    split_factor: float = 1.6
    w_ssim: float = 0.2
    w_fourier: float = 0.2
    ema_decay: float = 0.9
    checkpoint_every: int = 0
    workers: int = 1
    direction_chain: bool = True
    csi_subcarrier: int = 0

    def validate(self) -> None:
        for name in (
            "lr_transmittance", "lr_radiance", "lr_scale", "lr_rotation",
            "lr_mean_start", "lr_mean_end",
        ):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.w_ssim + self.w_fourier < 1.0:
            raise ConfigError("loss weights must satisfy 0 < w_ssim + w_fourier < 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")


def lr_mean(config: TrainConfig, iteration: int) -> float:
    """Exponential schedule from lr_mean_start to lr_mean_end."""
    if config.iterations <= 0:
        return config.lr_mean_start
    frac = min(max(iteration / config.iterations, 0.0), 1.0)
    return config.lr_mean_start * (config.lr_mean_end / config.lr_mean_start) ** frac


@dataclass
class TrainState:
    """Optimizer bookkeeping: per-primitive gradient statistics."""

    grad_ema: np.ndarray
    last_dmean: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "TrainState":
        return cls(np.zeros(n), np.zeros((n, 3)))

    def observe(self, buf: GradientBuffer, decay: float) -> None:
        norms = np.linalg.norm(buf.d_mean, axis=1)
        self.grad_ema = decay * self.grad_ema + (1.0 - decay) * norms
        self.last_dmean = buf.d_mean.copy()

    def keep(self, mask: np.ndarray) -> None:
        self.grad_ema = self.grad_ema[mask]
        self.last_dmean = self.last_dmean[mask]

    def extend(self, count: int) -> None:
        self.grad_ema = np.concatenate([self.grad_ema, np.zeros(count)])
        self.last_dmean = np.concatenate([self.last_dmean, np.zeros((count, 3))])

    def reset(self) -> None:
        self.grad_ema[:] = 0.0
        self.last_dmean[:] = 0.0


@dataclass
class DensifyReport:
    cloned: list[int] = field(default_factory=list)
    split: list[int] = field(default_factory=list)


@dataclass
class PruneReport:
    removed: list[int] = field(default_factory=list)


def _check_finite(buf: GradientBuffer) -> None:
    checks = (
        ("mean", buf.d_mean), ("quat", buf.d_quat), ("log_scale", buf.d_log_scale),
        ("trans_mag", buf.d_trans_mag[:, None]), ("trans_phase", buf.d_trans_phase[:, None]),
        ("coeffs", buf.d_coeffs.view(np.float64).reshape(buf.d_coeffs.shape[0], -1)),
    )
    for name, arr in checks:
        bad = ~np.all(np.isfinite(arr), axis=1)
        if np.any(bad):
            raise NonFiniteGradientError(int(np.nonzero(bad)[0][0]), name)


def sgd_step(scene: RFScene, grads: GradientBuffer, iteration: int, config: TrainConfig) -> None:
    """One descent step: w <- w - lr_w * dL/dw, quaternions renormalized.

    The transmittance magnitude gradient is chained onto the stored logit;
    coefficient real and imaginary parts update independently at the
    radiance rate.

    Raises:
        NonFiniteGradientError: some accumulator is NaN or infinite; the
            scene is left untouched.
    """
    _check_finite(grads)
    scene.means -= lr_mean(config, iteration) * grads.d_mean
    scene.quats -= config.lr_rotation * grads.d_quat
    scene.quats /= np.linalg.norm(scene.quats, axis=1, keepdims=True)
    scene.log_scales -= config.lr_scale * grads.d_log_scale
    mag = 1.0 / (1.0 + np.exp(-scene.trans_mag_raw))
    scene.trans_mag_raw -= config.lr_transmittance * grads.d_trans_mag * mag * (1.0 - mag)
    scene.trans_phase -= config.lr_transmittance * grads.d_trans_phase
    scene.coeffs -= config.lr_radiance * grads.d_coeffs


def densify(
    scene: RFScene,
    state: TrainState,
    iteration: int,
    config: TrainConfig,
    rng: np.random.Generator,
) -> DensifyReport:
    """Clone small / split large primitives whose mean gradient runs hot.

    Selection: gradient moving average strictly above the threshold. The
    radius proxy is the average diagonal of the covariance; strictly above
    the radius threshold splits (children sample the parent's distribution
    and shrink their scales by the split factor), otherwise the primitive
    is cloned with the copy shifted by one mean-rate step down the last
    gradient. The gradient statistics reset afterwards.
    """
    report = DensifyReport()
    hot = state.grad_ema > config.densify_grad_threshold
    if not np.any(hot):
        return report
    covs = scene.covariances()
    radius = np.einsum("nii->n", covs) / 3.0
    clone_mask = hot & (radius <= config.densify_radius_threshold)
    split_mask = hot & (radius > config.densify_radius_threshold)
    report.cloned = np.nonzero(clone_mask)[0].tolist()
    report.split = np.nonzero(split_mask)[0].tolist()

    new_means = []
    new_quats = []
    new_scales = []
    new_raw = []
    new_phase = []
    new_coeffs = []
    step = lr_mean(config, iteration)
    for i in report.cloned:
        new_means.append(scene.means[i] - step * state.last_dmean[i])
        new_quats.append(scene.quats[i].copy())
        new_scales.append(scene.log_scales[i].copy())
        new_raw.append(scene.trans_mag_raw[i])
        new_phase.append(scene.trans_phase[i])
        new_coeffs.append(scene.coeffs[i].copy())
    for i in report.split:
        child_scale = scene.log_scales[i] - np.log(config.split_factor)
        for _ in range(2):
            new_means.append(rng.multivariate_normal(scene.means[i], covs[i]))
            new_quats.append(scene.quats[i].copy())
            new_scales.append(child_scale.copy())
            new_raw.append(scene.trans_mag_raw[i])
            new_phase.append(scene.trans_phase[i])
            new_coeffs.append(scene.coeffs[i].copy())

    keep = ~split_mask  # split parents are replaced by their children
    scene.keep(keep)
    state.keep(keep)
    if new_means:
        scene.append(
            np.asarray(new_means), np.asarray(new_quats), np.asarray(new_scales),
            np.asarray(new_raw), np.asarray(new_phase),
            np.asarray(new_coeffs, dtype=np.complex128),
        )
        state.extend(len(new_means))
    state.reset()
    return report


def prune(scene: RFScene, state: TrainState, iteration: int, config: TrainConfig) -> PruneReport:
    """Remove primitives whose transmittance magnitude sits below the floor."""
    mag = 1.0 / (1.0 + np.exp(-scene.trans_mag_raw))
    remove = mag < config.prune_threshold
    report = PruneReport(removed=np.nonzero(remove)[0].tolist())
    if report.removed:
        scene.keep(~remove)
        state.keep(~remove)
        if scene.n == 0:
            logger.warning(
                "pruning removed every primitive at iteration %d; "
                "training continues on an empty scene", iteration,
            )
    return report


@dataclass
class TraceRow:
    iteration: int
    total: float
    l1: float
    ssim: float
    fourier: float
    n_primitives: int


@dataclass
class TrainResult:
    scene: RFScene
    trace: list[TraceRow]
    densify_reports: list[tuple[int, DensifyReport]]
    prune_reports: list[tuple[int, PruneReport]]


def _loss_and_upstream(scene: RFScene, sample, config: TrainConfig):
    """Forward render in the sample's mode; returns loss parts and upstream frame."""
    ctx = render.prepare_context(scene, sample.tx)
    s_frame = render.render_complex_frame(
        scene, sample.tx, workers=config.workers, ctx=ctx
    )
    if sample.mode == "spectrum":
        rep = loss.spectrum_loss(
            np.abs(s_frame) ** 2, sample.payload, config.w_ssim, config.w_fourier
        )
        lam = grad.upstream_to_ray(rep.grad_frame, s_frame)
        return rep.total, rep.l1, rep.ssim, rep.fourier, lam, ctx
    total = complex(s_frame.sum())
    if sample.mode == "rssi":
        value, lam_scalar = loss.scalar_loss(total, float(sample.payload), "real_power")
    elif sample.mode == "csi":
        target = complex(np.asarray(sample.payload).reshape(-1)[config.csi_subcarrier])
        value, lam_scalar = loss.scalar_loss(total, target, "complex")
    else:
        raise ConfigError(f"unknown sample mode {sample.mode!r}")
    lam = np.full(s_frame.shape, lam_scalar, dtype=np.complex128)
    return value, value, 0.0, 0.0, lam, ctx


def train_loop(
    scene: RFScene,
    dataset: "io.Dataset",
    config: TrainConfig,
    seed: int = 0,
    checkpoint_dir=None,
) -> TrainResult:
    """Optimize the scene against the dataset; returns the loss trace.

    One sample is drawn per iteration. Density control runs on its
    schedule during the first half of training only. Checkpoints (if
    enabled) are written from snapshots by a background writer so the
    loop never blocks on IO; the final state is written synchronously.
    """
    config.validate()
    dataset.check_mode()
    if not dataset.samples:
        raise ConfigError("dataset is empty")
    if dataset.n_az != scene.n_az or dataset.n_el != scene.n_el:
        if dataset.mode == "spectrum":
            raise ConfigError(
                f"dataset grid {dataset.n_az}x{dataset.n_el} does not match "
                f"scene grid {scene.n_az}x{scene.n_el}"
            )
    rng = np.random.default_rng(seed)
    state = TrainState.zeros(scene.n)
    trace: list[TraceRow] = []
    densify_log: list[tuple[int, DensifyReport]] = []
    prune_log: list[tuple[int, PruneReport]] = []
    writer = ThreadPoolExecutor(max_workers=1) if checkpoint_dir else None
    pending = []
    config_echo = io.config_to_dict(config)

    try:
        for it in range(1, config.iterations + 1):
            sample = dataset.samples[int(rng.integers(len(dataset.samples)))]
            if scene.n > 0:
                total, l1v, ssimv, fourierv, lam, ctx = _loss_and_upstream(
                    scene, sample, config
                )
                buf = grad.backward_frame(
                    scene, sample.tx, lam,
                    workers=config.workers,
                    include_direction_chain=config.direction_chain,
                    ctx=ctx,
                )
                sgd_step(scene, buf, it, config)
                state.observe(buf, config.ema_decay)
            else:
                total, l1v, ssimv, fourierv = _empty_scene_loss(sample, config)
            trace.append(TraceRow(it, total, l1v, ssimv, fourierv, scene.n))

            if it < config.iterations / 2:
                if it % config.densify_every == 0 and scene.n > 0:
                    report = densify(scene, state, it, config, rng)
                    if report.cloned or report.split:
                        densify_log.append((it, report))
                if it % config.prune_every == 0 and scene.n > 0:
                    report = prune(scene, state, it, config)
                    if report.removed:
                        prune_log.append((it, report))

            if (
                writer is not None
                and config.checkpoint_every > 0
                and it % config.checkpoint_every == 0
            ):
                snapshot = scene.copy()
                path = io.checkpoint_path(checkpoint_dir, it)
                pending.append(
                    writer.submit(io.save_checkpoint, path, snapshot, it, config_echo)
                )
    finally:
        if writer is not None:
            for fut in pending:
                fut.result()
            writer.shutdown(wait=True)
    return TrainResult(scene, trace, densify_log, prune_log)


def _empty_scene_loss(sample, config: TrainConfig):
    """Loss of the all-zero render, reported while the scene has no primitives."""
    if sample.mode == "spectrum":
        gt = np.asarray(sample.payload, dtype=np.float64)
        rep = loss.spectrum_loss(np.zeros_like(gt), gt, config.w_ssim, config.w_fourier)
        return rep.total, rep.l1, rep.ssim, rep.fourier
    if sample.mode == "rssi":
        value, _ = loss.scalar_loss(0j, float(sample.payload), "real_power")
    else:
        target = complex(np.asarray(sample.payload).reshape(-1)[config.csi_subcarrier])
        value, _ = loss.scalar_loss(0j, target, "complex")
    return value, value, 0.0, 0.0
