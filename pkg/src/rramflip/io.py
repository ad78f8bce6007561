"""Model manifests and CIFAR-10 binary batches.

A manifest is a JSON file describing the architecture, normalisation and
every parameter tensor (name, shape, dtype, byte offset, byte length) inside a
single little-endian raw blob stored next to it.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .nn import LayerSpec, LabeledDataset, Network, ShapeError
from .tensor import Tensor, element_type

MANIFEST_VERSION = 1
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TEST_FILE = "test_batch.bin"


class LoadError(Exception):
    """A model or dataset file is missing, truncated or inconsistent."""


def save_model(net: Network, manifest_path, quant: dict | None = None, extra: dict | None = None) -> Path:
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")
    entries, offset = [], 0
    with open(blob_path, "wb") as fh:
        for name, t in net.params.items():
            raw = t.data.astype(t.data.dtype.newbyteorder("<"), copy=False).tobytes()
            entries.append({"name": name, "shape": list(t.shape), "dtype": t.dtype.kind,
                            "offset": offset, "nbytes": len(raw)})
            fh.write(raw)
            offset += len(raw)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "architecture": net.architecture,
        "dtype": net.dtype.kind,
        "num_classes": net.num_classes,
        "input_shape": list(net.input_shape),
        "normalization": {"mean": list(net.mean), "std": list(net.std)},
        "layers": [l.to_dict() for l in net.layers],
        "blob": blob_path.name,
        "tensors": entries,
    }
    if quant is not None:
        manifest["quant"] = quant
    if extra:
        manifest.update(extra)
    manifest_path.write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest_path


def read_manifest(manifest_path) -> dict:
    manifest_path = Path(manifest_path)
    try:
        return json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise LoadError(f"model manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as e:
        raise LoadError(f"model manifest {manifest_path} is not valid JSON: {e}") from None


def load_model(manifest_path) -> Network:
    manifest_path = Path(manifest_path)
    m = read_manifest(manifest_path)
    for key in ("dtype", "num_classes", "layers", "tensors", "blob"):
        if key not in m:
            raise LoadError(f"{manifest_path}: manifest lacks {key!r}")
    blob_path = manifest_path.parent / m["blob"]
    try:
        blob = blob_path.read_bytes()
    except FileNotFoundError:
        raise LoadError(f"weight blob not found: {blob_path}") from None

    params = {}
    for e in m["tensors"]:
        dt = element_type(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        nbytes = count * dt.bit_width // 8
        start, stop = int(e["offset"]), int(e["offset"]) + nbytes
        if e.get("nbytes", nbytes) != nbytes:
            raise LoadError(f"tensor {e['name']!r}: nbytes {e['nbytes']} disagrees with shape {e['shape']}")
        if stop > len(blob):
            raise LoadError(
                f"tensor {e['name']!r} needs bytes [{start}, {stop}) but {blob_path.name} has only {len(blob)}"
            )
        words = np.frombuffer(blob, dtype=dt.word_dtype.newbyteorder("<"), count=count, offset=start)
        data = words.astype(dt.word_dtype).view(dt.storage_dtype).reshape(e["shape"])
        params[e["name"]] = Tensor(data.copy(), dt)

    norm = m.get("normalization", {})
    try:
        return Network(
            layers=[LayerSpec.from_dict(d) for d in m["layers"]],
            params=params,
            dtype=element_type(m["dtype"]),
            num_classes=int(m["num_classes"]),
            input_shape=tuple(m.get("input_shape", (3, 32, 32))),
            mean=tuple(norm.get("mean", (0.0, 0.0, 0.0))),
            std=tuple(norm.get("std", (1.0, 1.0, 1.0))),
            architecture=m.get("architecture", "custom"),
        )
    except (ShapeError, KeyError) as e:
        raise LoadError(f"{manifest_path}: {e}") from None


def read_cifar10_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Raw ``(images uint8 N x 3 x 32 x 32, labels uint8)`` from one binary batch file."""
    path = Path(path)
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except FileNotFoundError:
        raise LoadError(f"CIFAR-10 batch not found: {path}") from None
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise LoadError(
            f"{path}: {raw.size} bytes is not a whole number of {CIFAR_RECORD}-byte records (truncated?)"
        )
    rec = raw.reshape(-1, CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), rec[:, 0].copy()


def write_cifar10_batch(path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), 3 * 32 * 32)
    rec = np.empty((len(labels), CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = images
    Path(path).write_bytes(rec.tobytes())


def normalize(images_u8: np.ndarray, mean, std) -> np.ndarray:
    x = images_u8.astype(np.float32) / np.float32(255.0)
    mean = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    std = np.asarray(std, dtype=np.float32)[None, :, None, None]
    return (x - mean) / std


def load_cifar10(data_dir, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0), files=(CIFAR_TEST_FILE,),
                 num_classes: int = 10) -> LabeledDataset:
    """Parse CIFAR-10 binary batches from ``data_dir`` and normalise per channel."""
    data_dir = Path(data_dir)
    imgs, labels = [], []
    for f in files:
        x, y = read_cifar10_batch(data_dir / f)
        imgs.append(x)
        labels.append(y)
    y = np.concatenate(labels)
    if y.max() >= num_classes:
        raise LoadError(f"{data_dir}: label {int(y.max())} outside [0, {num_classes})")
    return LabeledDataset(normalize(np.concatenate(imgs), mean, std), y, num_classes)
