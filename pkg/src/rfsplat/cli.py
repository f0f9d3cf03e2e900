"""Command-line entry points.

Commands: generate (synthetic datasets from the multipath oracle), train,
render (one checkpointed scene at one transmitter), eval (metrics report),
gradcheck (analytic-vs-numeric gradient validation), bench (tiled vs naive
render timing). Exit codes: 0 success, 1 usage error, 2 data error.

The --config file is UTF-8 JSON. Top-level keys are training
hyperparameters (every TrainConfig field is accepted); the optional
"generate" object describes the synthetic scene and the optional "scene"
object the cube initialization. Unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import time

import numpy as np

from . import gradcheck as gradcheck_mod
from . import io, loss, oracle, render, splat
from .errors import ConfigError, DataError, RFSplatError
from .scene import Box, RFScene, SceneDefaults, cube_init
from .train import TrainConfig, train_loop

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_config(path):
    if path is None:
        return TrainConfig(), {}, {}
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read config {path}: {e}") from e
    generate = raw.pop("generate", {})
    scene_cfg = raw.pop("scene", {})
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**raw), generate, scene_cfg


def _parse_vec3(text):
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"expected x,y,z but got {text!r}")
    return np.array([float(p) for p in parts])


def _paths_from_config(generate):
    paths = []
    for spec in generate.get("paths", [{"reflector": None, "amplitude": 1.0}]):
        reflector = spec.get("reflector")
        paths.append(
            oracle.PathSpec(
                None if reflector is None else np.asarray(reflector, dtype=np.float64),
                float(spec.get("amplitude", 1.0)),
                float(spec.get("extra_phase", 0.0)),
            )
        )
    return paths


def cmd_generate(args) -> int:
    _, generate, _ = _load_config(args.config)
    mode = generate.get("mode", "spectrum")
    n_samples = int(generate.get("n_samples", 10))
    n_az = int(generate.get("n_az", 90))
    n_el = int(generate.get("n_el", 45))
    f_c = float(generate.get("carrier_freq", 2.4e9))
    rx = np.asarray(generate.get("rx", [0.0, 0.0, 0.0]), dtype=np.float64)
    tx_box = generate.get("tx_box", {"lo": [-8, -8, -3], "hi": [8, 8, 3]})
    sigma_beam = float(generate.get("sigma_beam", 2.0))
    rolloff = bool(generate.get("rolloff", False))
    paths = _paths_from_config(generate)

    rng = np.random.default_rng(args.seed)
    lo = np.asarray(tx_box["lo"], dtype=np.float64)
    hi = np.asarray(tx_box["hi"], dtype=np.float64)
    samples = []
    for i in range(n_samples):
        tx = rng.uniform(lo, hi)
        if mode == "spectrum":
            payload = oracle.spectrum_oracle(
                paths, tx, rx, f_c, n_az, n_el, sigma_beam, rolloff
            ).data
        elif mode == "rssi":
            payload = oracle.rssi_oracle(paths, tx, rx, f_c, rolloff)
        elif mode == "csi":
            payload = oracle.csi_oracle(paths, tx, rx, f_c, rolloff=rolloff)
        else:
            raise ConfigError(f"unknown generate mode {mode!r}")
        samples.append(io.TrainSample(f"sample_{i:05d}", tx, payload, mode))
    dataset = io.Dataset(mode, rx, n_az, n_el, f_c, samples)
    io.write_dataset(args.out, dataset)
    print(f"wrote {n_samples} {mode} samples to {args.out}")
    return 0


def _init_scene(dataset: io.Dataset, scene_cfg: dict) -> RFScene:
    if "bounds" in scene_cfg:
        bounds = Box(
            np.asarray(scene_cfg["bounds"]["lo"], dtype=np.float64),
            np.asarray(scene_cfg["bounds"]["hi"], dtype=np.float64),
        )
    else:
        txs = np.stack([s.tx for s in dataset.samples])
        lo = np.minimum(txs.min(axis=0), dataset.rx) - 2.0
        hi = np.maximum(txs.max(axis=0), dataset.rx) + 2.0
        bounds = Box(lo, hi)
    defaults = SceneDefaults(
        rx=dataset.rx,
        carrier_freq=dataset.carrier_freq,
        n_az=dataset.n_az,
        n_el=dataset.n_el,
        fle_degree=int(scene_cfg.get("fle_degree", 3)),
        ress_radius=float(scene_cfg.get("ress_radius", 1.0)),
        c00=complex(
            float(scene_cfg.get("c00_re", 0.1)), float(scene_cfg.get("c00_im", 0.0))
        ),
    )
    return cube_init(bounds, float(scene_cfg.get("cube_edge", 2.0)), defaults)


def cmd_train(args) -> int:
    config, _, scene_cfg = _load_config(args.config)
    if args.iterations is not None:
        config.iterations = args.iterations
    config.workers = args.workers
    dataset = io.load_dataset(args.dataset)
    scene = _init_scene(dataset, scene_cfg)
    os.makedirs(args.out, exist_ok=True)
    result = train_loop(
        scene, dataset, config, seed=args.seed,
        checkpoint_dir=args.out if config.checkpoint_every > 0 else None,
    )
    echo = io.config_to_dict(config)
    echo["trained_mode"] = dataset.mode
    io.save_checkpoint(
        io.checkpoint_path(args.out, None), result.scene, config.iterations, echo
    )
    io.write_trace_csv(os.path.join(args.out, "loss_trace.csv"), result.trace)
    print(
        f"trained {config.iterations} iterations; {result.scene.n} primitives; "
        f"final checkpoint and loss trace in {args.out}"
    )
    return 0


def cmd_render(args) -> int:
    scene, _, _ = io.load_checkpoint(args.checkpoint)
    tx = _parse_vec3(args.tx)
    if args.mode == "spectrum":
        frame = render.render_spectrum(scene, tx, workers=args.workers)
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            out = os.path.join(args.out, "render.bin")
            with open(out, "wb") as f:
                f.write(np.asarray(frame.data, dtype="<f4").tobytes(order="C"))
            print(f"wrote {scene.n_az}x{scene.n_el} spectrum to {out}")
        else:
            print(f"spectrum peak power {frame.data.max():.6e} at cell "
                  f"{np.unravel_index(frame.data.argmax(), frame.data.shape)}")
    else:
        value = render.render_scalar(scene, tx, workers=args.workers)
        power = abs(value) ** 2
        dbm = 10.0 * math.log10(power) if power > 1e-20 else -200.0
        print(f"scalar: {value.real!r}{value.imag:+}j  rssi_dbm: {dbm!r}")
    return 0


def _split_samples(samples, split):
    if split == "all":
        return samples
    try:
        lo, hi = split.split(":")
        return samples[int(lo) if lo else 0 : int(hi) if hi else len(samples)]
    except ValueError as e:
        raise ConfigError(f"bad split {split!r}; use 'all' or 'start:stop'") from e


def cmd_eval(args) -> int:
    scene, _, config = io.load_checkpoint(args.checkpoint)
    dataset = io.load_dataset(args.dataset)
    trained_mode = config.get("trained_mode")
    if trained_mode is not None and trained_mode != dataset.mode:
        raise DataError(
            f"checkpoint was trained on {trained_mode!r} data, dataset is "
            f"{dataset.mode!r}"
        )
    if dataset.mode == "spectrum" and (
        dataset.n_az != scene.n_az or dataset.n_el != scene.n_el
    ):
        raise DataError("dataset grid does not match the checkpointed scene grid")
    samples = _split_samples(dataset.samples, args.split)
    per_sample = []
    agg = {"mse": [], "psnr": [], "snr": []}
    for sample in samples:
        if dataset.mode == "spectrum":
            pred = render.render_spectrum(scene, sample.tx, workers=args.workers).data
            gt = sample.payload
        elif dataset.mode == "rssi":
            value = render.render_scalar(scene, sample.tx, workers=args.workers)
            power = abs(value) ** 2
            pred = np.array([10.0 * math.log10(power) if power > 1e-20 else -200.0])
            gt = np.array([float(sample.payload)])
        else:
            value = render.render_scalar(scene, sample.tx, workers=args.workers)
            k = int(config.get("csi_subcarrier", 0))
            pred = np.array([value])
            gt = np.array([sample.payload[k]])
        m = loss.metrics(pred, gt)
        m = {k2: _cap_db(v) for k2, v in m.items()}
        per_sample.append({"id": sample.id, **m})
        for k2 in agg:
            agg[k2].append(m[k2])
        if args.plot_data:
            os.makedirs(args.out, exist_ok=True)
            np.savetxt(
                os.path.join(args.out, f"{sample.id}_pred.txt"),
                np.atleast_2d(np.real(pred)),
                fmt="%.8e",
            )
    report = {
        "n_samples": len(per_sample),
        "per_sample": per_sample,
        "aggregate": (
            None
            if not per_sample
            else {k2: float(np.mean(v)) for k2, v in agg.items()}
        ),
    }
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, "eval.json")
    with open(out, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=1)
        f.write("\n")
    print(json.dumps(report["aggregate"]))
    return 0


def _cap_db(value: float) -> float:
    if value == float("inf"):
        return loss.PSNR_CAP_DB
    if value == float("-inf"):
        return -loss.PSNR_CAP_DB
    return value


def cmd_gradcheck(args) -> int:
    report = gradcheck_mod.run_gradcheck(
        seed=args.seed, n_scenes=args.scenes, max_gaussians=args.gaussians
    )
    for line in report.lines():
        print(line)
    print("gradcheck:", "PASS" if report.passed else "FAIL")
    return 0


def _bench_scene(rng, n, n_az, n_el) -> RFScene:
    means = rng.uniform(-15.0, 15.0, (n, 3))
    d = np.linalg.norm(means, axis=1)
    tight = d < 2.0
    means[tight] *= (2.5 / np.maximum(d[tight, None], 1e-6))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    log_scales = rng.uniform(np.log(0.05), np.log(0.3), (n, 3))
    raw = rng.normal(0.0, 1.0, n)
    phase = rng.uniform(-np.pi, np.pi, n)
    coeffs = rng.normal(0.0, 0.1, (n, 16)) + 1j * rng.normal(0.0, 0.1, (n, 16))
    return RFScene(
        means, quats, log_scales, raw, phase, coeffs,
        np.zeros(3), 1.0, 2.4e9, Box([-40, -40, -40], [40, 40, 40]),
        n_az, n_el, 3,
    )


def cmd_bench(args) -> int:
    n_az, n_el = (int(p) for p in args.grid.split("x"))
    rng = np.random.default_rng(args.seed)
    scene = _bench_scene(rng, args.gaussians, n_az, n_el)
    tx = np.array([5.0, 3.0, 1.0])
    ctx = render.prepare_context(scene, tx)

    def time_render(tiled, workers, repeats=args.repeats):
        render.render_complex_frame(scene, tx, workers=workers, tiled=tiled, ctx=ctx)
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            render.render_complex_frame(scene, tx, workers=workers, tiled=tiled, ctx=ctx)
            best = min(best, time.perf_counter() - t0)
        return best

    if scene.n == 0:
        print(json.dumps({"speedup": "n/a", "note": "empty scene"}))
        return 0
    t_tiled_w = time_render(True, args.workers)
    t_naive_w = time_render(False, args.workers)
    t_tiled_1 = time_render(True, 1)
    report = {
        "gaussians": scene.n,
        "grid": f"{n_az}x{n_el}",
        "workers": args.workers,
        "tiled_s": t_tiled_w,
        "naive_s": t_naive_w,
        "speedup_tiled_vs_naive": t_naive_w / t_tiled_w,
        "tiled_1worker_s": t_tiled_1,
        "scaling_1_to_n": t_tiled_1 / t_tiled_w,
    }
    print(json.dumps(report, indent=1))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench.json"), "w", encoding="utf-8") as f:
            json.dump(report, f, indent=1)
            f.write("\n")
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="rfsplat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a scene against a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a checkpointed scene")
    common(p, out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tx", required=True, help="transmitter position x,y,z")
    p.add_argument("--mode", choices=["spectrum", "scalar"], default="spectrum")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="metrics report for a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="all", help="'all' or 'start:stop'")
    p.add_argument("--plot-data", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    common(p, out_required=False)
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--gaussians", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="tiled vs naive render timing")
    common(p, out_required=False)
    p.add_argument("--gaussians", type=int, default=50000)
    p.add_argument("--grid", default="360x90")
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except RFSplatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
