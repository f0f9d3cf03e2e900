"""Dataset and checkpoint serialization.

Datasets are a JSON manifest plus raw little-endian float32 payload files:
diffable metadata, bulk data kept binary. Spectrum payloads are row-major
(azimuth-major) n_az x n_el grids; RSSI payloads hold one scalar; channel
payloads hold interleaved (re, im) pairs for 26 subcarriers.

Checkpoints are a single JSON document carrying every primitive attribute
at full float64 precision (shortest round-trip decimal repr), a config
echo, and the iteration counter. Saving, loading, and saving again yields
byte-identical files; version mismatches fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

try:
    import jsonschema
except ImportError:  # pragma: no cover
    jsonschema = None

from .errors import DataError
from .scene import Box, RFScene

__all__ = [
    "DATASET_VERSION",
    "CHECKPOINT_VERSION",
    "CSI_SUBCARRIERS",
    "TrainSample",
    "Dataset",
    "write_dataset",
    "load_dataset",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_path",
    "write_trace_csv",
    "config_to_dict",
]

DATASET_VERSION = 1
CHECKPOINT_VERSION = 1
CSI_SUBCARRIERS = 26

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["format_version", "mode", "n_az", "n_el", "carrier_freq", "rx", "samples"],
    "properties": {
        "format_version": {"type": "integer"},
        "mode": {"enum": ["spectrum", "rssi", "csi"]},
        "n_az": {"type": "integer", "minimum": 1, "maximum": 360},
        "n_el": {"type": "integer", "minimum": 1, "maximum": 180},
        "carrier_freq": {"type": "number", "exclusiveMinimum": 0},
        "rx": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "samples": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "tx", "payload"],
                "properties": {
                    "id": {"type": "string"},
                    "tx": {
                        "type": "array",
                        "items": {"type": "number"},
                        "minItems": 3,
                        "maxItems": 3,
                    },
                    "payload": {"type": "string"},
                },
            },
        },
    },
}


@dataclass
class TrainSample:
    """One dataset record: a transmitter position and its measured signal."""

    id: str
    tx: np.ndarray
    payload: object
    mode: str

    def __post_init__(self):
        self.tx = np.asarray(self.tx, dtype=np.float64).reshape(3)


@dataclass
class Dataset:
    """A full dataset: mode, receiver geometry, and the sample list."""

    mode: str
    rx: np.ndarray
    n_az: int
    n_el: int
    carrier_freq: float
    samples: list

    def __post_init__(self):
        self.rx = np.asarray(self.rx, dtype=np.float64).reshape(3)

    def check_mode(self) -> None:
        bad = [s.id for s in self.samples if s.mode != self.mode]
        if bad:
            raise DataError(f"samples with inconsistent mode: {bad[:5]}")


def _payload_bytes(sample: TrainSample) -> bytes:
    if sample.mode == "spectrum":
        return np.asarray(sample.payload, dtype="<f4").tobytes(order="C")
    if sample.mode == "rssi":
        return np.asarray([sample.payload], dtype="<f4").tobytes()
    if sample.mode == "csi":
        vec = np.asarray(sample.payload, dtype=np.complex128).reshape(-1)
        inter = np.empty(2 * vec.size, dtype="<f4")
        inter[0::2] = vec.real
        inter[1::2] = vec.imag
        return inter.tobytes()
    raise DataError(f"unknown sample mode {sample.mode!r}")


def _payload_from_bytes(raw: bytes, mode: str, n_az: int, n_el: int, path: str):
    data = np.frombuffer(raw, dtype="<f4")
    if mode == "spectrum":
        if data.size != n_az * n_el:
            raise DataError(
                f"{path}: expected {n_az * n_el} float32 values, found {data.size}"
            )
        return data.reshape(n_az, n_el).astype(np.float64)
    if mode == "rssi":
        if data.size != 1:
            raise DataError(f"{path}: expected 1 float32 value, found {data.size}")
        return float(data[0])
    if data.size != 2 * CSI_SUBCARRIERS:
        raise DataError(
            f"{path}: expected {2 * CSI_SUBCARRIERS} float32 values, found {data.size}"
        )
    return (data[0::2] + 1j * data[1::2]).astype(np.complex128)


def write_dataset(directory, dataset: Dataset) -> None:
    """Write manifest.json plus one payload file per sample."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for sample in dataset.samples:
        name = f"{sample.id}.bin"
        with open(os.path.join(directory, name), "wb") as f:
            f.write(_payload_bytes(sample))
        entries.append({"id": sample.id, "tx": sample.tx.tolist(), "payload": name})
    manifest = {
        "format_version": DATASET_VERSION,
        "mode": dataset.mode,
        "n_az": dataset.n_az,
        "n_el": dataset.n_el,
        "carrier_freq": float(dataset.carrier_freq),
        "rx": dataset.rx.tolist(),
        "samples": entries,
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")


def _validate_manifest(manifest: dict) -> None:
    if jsonschema is not None:
        validator = jsonschema.Draft7Validator(MANIFEST_SCHEMA)
        errors = sorted(validator.iter_errors(manifest), key=lambda e: e.json_path)
        if errors:
            e = errors[0]
            raise DataError(f"manifest invalid at {e.json_path}: {e.message}")
        return
    for key in MANIFEST_SCHEMA["required"]:  # pragma: no cover
        if key not in manifest:
            raise DataError(f"manifest invalid at $.{key}: missing")


def load_dataset(directory) -> Dataset:
    """Load and validate a dataset directory.

    Raises:
        DataError: missing/invalid manifest fields (with their JSON path),
            version mismatch, or payload files that are absent or of the
            wrong size.
    """
    manifest_path = os.path.join(directory, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"no manifest.json in {directory}")
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    _validate_manifest(manifest)
    if manifest["format_version"] != DATASET_VERSION:
        raise DataError(
            f"dataset format version {manifest['format_version']} is not "
            f"{DATASET_VERSION}; refusing to guess"
        )
    mode = manifest["mode"]
    n_az, n_el = manifest["n_az"], manifest["n_el"]
    samples = []
    for entry in manifest["samples"]:
        path = os.path.join(directory, entry["payload"])
        if not os.path.exists(path):
            raise DataError(f"payload file missing: {path}")
        with open(path, "rb") as f:
            payload = _payload_from_bytes(f.read(), mode, n_az, n_el, path)
        samples.append(TrainSample(entry["id"], entry["tx"], payload, mode))
    return Dataset(mode, manifest["rx"], n_az, n_el, manifest["carrier_freq"], samples)


def config_to_dict(config) -> dict:
    """Dataclass config to a JSON-ready dict."""
    return dataclasses.asdict(config)


def checkpoint_path(directory, iteration) -> str:
    name = "checkpoint_final.json" if iteration is None else f"checkpoint_{iteration:07d}.json"
    return os.path.join(directory, name)


def save_checkpoint(path, scene: RFScene, iteration: int, config: dict) -> None:
    """Serialize the scene at full precision; byte-stable across runs."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "iteration": int(iteration),
        "config": config,
        "scene": {
            "rx": scene.rx.tolist(),
            "ress_radius": scene.ress_radius,
            "carrier_freq": scene.carrier_freq,
            "bounds": {"lo": scene.bounds.lo.tolist(), "hi": scene.bounds.hi.tolist()},
            "n_az": scene.n_az,
            "n_el": scene.n_el,
            "fle_degree": scene.fle_degree,
            "primitives": {
                "means": scene.means.tolist(),
                "quats": scene.quats.tolist(),
                "log_scales": scene.log_scales.tolist(),
                "trans_mag_raw": scene.trans_mag_raw.tolist(),
                "trans_phase": scene.trans_phase.tolist(),
                "coeffs_re": scene.coeffs.real.tolist(),
                "coeffs_im": scene.coeffs.imag.tolist(),
            },
        },
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path):
    """Load a checkpoint; returns (scene, iteration, config dict).

    Raises:
        DataError: unreadable file or version mismatch.
    """
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise DataError(
            f"checkpoint format version {version} is not {CHECKPOINT_VERSION}; "
            "refusing to coerce"
        )
    sc = doc["scene"]
    prims = sc["primitives"]
    n = len(prims["means"])
    n_coeffs = (sc["fle_degree"] + 1) ** 2
    if n == 0:
        coeffs = np.zeros((0, n_coeffs), dtype=np.complex128)
    else:
        coeffs = np.asarray(prims["coeffs_re"], dtype=np.float64) + 1j * np.asarray(
            prims["coeffs_im"], dtype=np.float64
        )
    scene = RFScene(
        np.asarray(prims["means"], dtype=np.float64).reshape(n, 3),
        np.asarray(prims["quats"], dtype=np.float64).reshape(n, 4),
        np.asarray(prims["log_scales"], dtype=np.float64).reshape(n, 3),
        np.asarray(prims["trans_mag_raw"], dtype=np.float64).reshape(n),
        np.asarray(prims["trans_phase"], dtype=np.float64).reshape(n),
        coeffs.reshape(n, n_coeffs),
        sc["rx"],
        sc["ress_radius"],
        sc["carrier_freq"],
        Box(np.asarray(sc["bounds"]["lo"]), np.asarray(sc["bounds"]["hi"])),
        sc["n_az"],
        sc["n_el"],
        sc["fle_degree"],
    )
    return scene, doc["iteration"], doc["config"]


def write_trace_csv(path, trace) -> None:
    """Loss trace as CSV: iter,total,l1,ssim,fourier,n_primitives."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("iter,total,l1,ssim,fourier,n_primitives\n")
        for row in trace:
            f.write(
                f"{row.iteration},{row.total!r},{row.l1!r},{row.ssim!r},"
                f"{row.fourier!r},{row.n_primitives}\n"
            )
