"""Experiment orchestration: probability sweeps and their persisted results.

One sweep evaluates one curve (fixed element type, start bit and targets) on a
probability grid with several repetitions.  Results go to ``<out>.csv`` (one
row per probability and repetition) and ``<out>.summary.json`` (logistic fit,
resilience metrics and the full resolved config).
"""
from __future__ import annotations

import csv
import json
import logging
import os
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from . import analysis, quant, synthetic
from .bitnoise import NoiseSpec
from .device import DeviceModel
from .io import load_cifar10, load_model, normalize, read_manifest
from .nn import LabeledDataset, Network, evaluate
from .rng import StreamFactory
from .tensor import INT8, element_type

log = logging.getLogger(__name__)

CSV_COLUMNS = ("p", "repetition", "accuracy", "dtype", "start_bit", "targets", "seed", "wall_time_ms")
DATA_ENV = "RRAMFLIP_DATA"
SYNTHETIC = "synthetic"
DESK_TEST_SEED = 2
DESK_CALIB_SEED = 3
SWEEP_DTYPES = ("float16", "bfloat16", "float32", "float64", "int8")


class ConfigError(ValueError):
    pass


def default_model_path() -> str:
    return str(resources.files("rramflip") / "data" / "reference_cnn.json")


def log_grid(p_min: float = 1e-8, p_max: float = 1e-1, per_decade: int = 8) -> list[float]:
    """Log-spaced grid with ``per_decade`` points per decade, both ends included."""
    lo, hi = np.log10(p_min), np.log10(p_max)
    n = int(round((hi - lo) * per_decade)) + 1
    return [float(v) for v in 10.0 ** np.linspace(lo, hi, n)]


@dataclass
class SweepConfig:
    model: str = field(default_factory=default_model_path)
    dataset: str = field(default_factory=lambda: os.environ.get(DATA_ENV, SYNTHETIC))
    subset: int | None = 2000
    dtype: str = "float32"
    grid: list[float] = field(default_factory=log_grid)
    repetitions: int = 5
    start_bits: list[int] = field(default_factory=lambda: [0])
    targets: list[str] = field(default_factory=lambda: ["activations"])
    seed: int = 0
    output: str = "results/sweep"
    device: dict | None = None
    batch_size: int = 250
    workers: int = 1
    calibration_size: int = 500

    def validate(self) -> SweepConfig:
        if self.dtype not in SWEEP_DTYPES:
            raise ConfigError(f"dtype must be one of {list(SWEEP_DTYPES)}, got {self.dtype!r}")
        g = np.asarray(self.grid, dtype=np.float64)
        if g.size == 0 or np.any(g <= 0) or np.any(g >= 1) or np.any(np.diff(g) <= 0):
            raise ConfigError("grid must be strictly increasing within (0, 1)")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if not self.targets or not set(self.targets) <= {"activations", "weights", "biases"}:
            raise ConfigError(f"invalid noise targets {self.targets}")
        width = element_type(self.dtype).bit_width
        if not self.start_bits or any(not 0 <= b <= width for b in self.start_bits):
            raise ConfigError(f"start bits must lie in [0, {width}] for {self.dtype}")
        if self.subset is not None and (self.subset < 1 or self.subset % 10):
            raise ConfigError("subset must be a positive multiple of the class count (10)")
        if self.batch_size < 1 or self.workers < 1:
            raise ConfigError("batch_size and workers must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.device is not None:
            try:
                DeviceModel.from_config(self.device)
            except (KeyError, TypeError, ValueError) as e:
                raise ConfigError(f"invalid device parameters: {e}") from None
        return self

    @classmethod
    def from_dict(cls, d: dict) -> SweepConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("grid"), dict):
            d["grid"] = log_grid(**d["grid"])
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> SweepConfig:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None

    def to_dict(self) -> dict:
        return asdict(self)


# --- loading -------------------------------------------------------------------------


@lru_cache(maxsize=8)
def _load_model_cached(path: str) -> Network:
    return load_model(path)


@lru_cache(maxsize=8)
def _load_dataset_cached(dataset: str, subset: int | None, mean: tuple, std: tuple, noise: float) -> LabeledDataset:
    if dataset == SYNTHETIC:
        n = subset or 10000
        imgs, labels = synthetic.make_images(n, DESK_TEST_SEED, noise)
        return LabeledDataset(normalize(imgs, mean, std), labels, synthetic.NUM_CLASSES)
    data = load_cifar10(dataset, mean, std)
    return data.balanced_subset(subset // data.num_classes) if subset else data


def _synthetic_noise(model_path: str) -> float:
    return float(read_manifest(model_path).get("training", {}).get("noise", 0.18))


def load_inputs(cfg: SweepConfig) -> tuple[Network, LabeledDataset]:
    net = _load_model_cached(str(cfg.model))
    data = _load_dataset_cached(str(cfg.dataset), cfg.subset, tuple(net.mean), tuple(net.std),
                                _synthetic_noise(str(cfg.model)))
    if data.num_classes != net.num_classes:
        raise ConfigError(f"dataset has {data.num_classes} classes, model {net.num_classes}")
    return net, data


def calibration_data(cfg: SweepConfig, net: Network) -> LabeledDataset:
    if cfg.dataset == SYNTHETIC:
        imgs, labels = synthetic.make_images(cfg.calibration_size, DESK_CALIB_SEED, _synthetic_noise(cfg.model))
        return LabeledDataset(normalize(imgs, net.mean, net.std), labels)
    train = Path(cfg.dataset) / "data_batch_1.bin"
    if train.exists():
        return load_cifar10(cfg.dataset, net.mean, net.std, files=("data_batch_1.bin",)).subset(
            slice(0, cfg.calibration_size))
    return load_cifar10(cfg.dataset, net.mean, net.std).subset(slice(-cfg.calibration_size, None))


@lru_cache(maxsize=4)
def _quantized(model_path: str, dataset: str, calibration_size: int):
    net = _load_model_cached(model_path)
    m = read_manifest(model_path)
    if "quant" in m and dataset == SYNTHETIC:
        qp = quant.deserialize(m["quant"])
    else:
        cfg = SweepConfig(model=model_path, dataset=dataset, calibration_size=calibration_size)
        qp = quant.calibrate(net, calibration_data(cfg, net))
    return quant.quantize_network(net, qp)


@lru_cache(maxsize=8)
def _cast_model(model_path: str, dtype: str) -> Network:
    net = _load_model_cached(model_path)
    return net if net.dtype.kind == dtype else net.astype(dtype)


def runnable(cfg: SweepConfig):
    """The model in the configured element type (int8 means the quantized network)."""
    _, data = load_inputs(cfg)
    if element_type(cfg.dtype) == INT8:
        return _quantized(str(cfg.model), str(cfg.dataset), cfg.calibration_size), data
    return _cast_model(str(cfg.model), cfg.dtype), data


# --- sweeps --------------------------------------------------------------------------


def _p_key(p: float) -> int:
    return struct.unpack("<Q", struct.pack("<d", p))[0]


def point_streams(seed: int, p: float, rep: int) -> StreamFactory:
    return StreamFactory(seed, _p_key(p), rep)


def evaluate_point(cfg: SweepConfig, p: float, rep: int, start_bit: int) -> tuple[float, float]:
    model, data = runnable(cfg)
    spec = NoiseSpec.symmetric(p, model.dtype, start_bit, cfg.targets, cfg.seed)
    t0 = time.perf_counter()
    acc = evaluate(model, data, spec, point_streams(cfg.seed, p, rep), cfg.batch_size)
    return acc, (time.perf_counter() - t0) * 1e3


def _evaluate_job(args):
    cfg, p, rep, start_bit = args
    return evaluate_point(cfg, p, rep, start_bit)


def _map(cfg: SweepConfig, jobs: list) -> list:
    if cfg.workers == 1 or len(jobs) == 1:
        return [_evaluate_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
        return list(ex.map(_evaluate_job, jobs))  # map keeps submission order


def noisy_bits_per_sample(model, start_bit: int) -> dict:
    net = model.net if isinstance(model, quant.QuantizedNetwork) else model
    dt = element_type(model.dtype)
    acts = net.written_activations()
    exp_noisy = max(0, dt.exponent_bits - max(0, start_bit - 1))
    return {"noisy_exponent_bits_total": acts * exp_noisy,
            "noisy_bits_total": acts * (dt.bit_width - start_bit)}


def _format_targets(targets) -> str:
    return "+".join(sorted(targets))


def run_sweep(cfg: SweepConfig, start_bit: int | None = None) -> dict:
    """Evaluate the grid, write CSV and summary, return the summary dict."""
    cfg.validate()
    start_bit = cfg.start_bits[0] if start_bit is None else start_bit
    model, data = runnable(cfg)
    baseline = evaluate(model, data, None, None, cfg.batch_size)

    grid = list(cfg.grid)
    device_info = None
    if cfg.device is not None:
        dev = DeviceModel.from_config(cfg.device)
        device_info = dev.to_dict()
        grid = [dev.p_bf]

    jobs = [(cfg, p, rep, start_bit) for p in grid for rep in range(cfg.repetitions)]
    results = _map(cfg, jobs)
    rows = [
        {"p": p, "repetition": rep, "accuracy": acc, "dtype": cfg.dtype, "start_bit": start_bit,
         "targets": _format_targets(cfg.targets), "seed": cfg.seed, "wall_time_ms": round(ms, 3)}
        for (_, p, rep, _), (acc, ms) in zip(jobs, results)
    ]

    acc = np.array([r["accuracy"] for r in rows]).reshape(len(grid), cfg.repetitions)
    summary = {
        "a_max": baseline,
        "a_min": 1.0 / model.num_classes,
        "num_classes": model.num_classes,
        "n_samples": len(data),
        "dtype": cfg.dtype,
        "start_bit": start_bit,
        "fit_space": analysis.FIT_SPACE,
        **noisy_bits_per_sample(model, start_bit),
    }
    if device_info:
        summary["device"] = device_info
    try:
        curve = analysis.AccuracyCurve.from_samples(grid, acc, model.num_classes, baseline, len(data))
        summary.update(fit_summary(curve))
    except ValueError as e:
        summary.update({"mu": None, "sigma": None, "p99": None, "converged": False, "diagnostic": str(e)})
    summary["config"] = {**cfg.to_dict(), "start_bits": [start_bit]}

    out = Path(cfg.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out.with_suffix(".csv"), rows)
    out.with_suffix(".summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    log.info("sweep %s: a_max=%.4f mu=%s converged=%s", out, baseline, summary["mu"], summary["converged"])
    summary["rows"] = rows
    return summary


def fit_summary(curve: analysis.AccuracyCurve) -> dict:
    fit = analysis.fit_logistic(curve)
    p99 = analysis.noise_at_accuracy_fraction(fit, 0.99) if fit.converged else None
    return {
        "mu": fit.mu if fit.converged else None,
        "sigma": fit.sigma if fit.converged else None,
        "p99": p99,
        "converged": fit.converged,
        "rss": fit.rss,
        "diagnostic": fit.diagnostic,
        "curve": {"p": curve.p.tolist(), "accuracy_mean": curve.accuracy_mean.tolist(),
                  "accuracy_std": curve.accuracy_std.tolist(),
                  "standard_error": curve.standard_error().tolist()},
    }


def write_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "p": repr(float(r["p"]))})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ConfigError(f"{path}: unexpected columns {reader.fieldnames}")
        return [
            {"p": float(r["p"]), "repetition": int(r["repetition"]), "accuracy": float(r["accuracy"]),
             "dtype": r["dtype"], "start_bit": int(r["start_bit"]), "targets": r["targets"],
             "seed": int(r["seed"]), "wall_time_ms": float(r["wall_time_ms"])}
            for r in reader
        ]


def curve_from_rows(rows, num_classes: int, a_max: float, n_samples: int | None = None) -> analysis.AccuracyCurve:
    ps = sorted({r["p"] for r in rows})
    by_p = {p: [r["accuracy"] for r in rows if r["p"] == p] for p in ps}
    reps = {len(v) for v in by_p.values()}
    if len(reps) != 1:
        raise ConfigError("every probability needs the same number of repetitions")
    return analysis.AccuracyCurve.from_samples(ps, [by_p[p] for p in ps], num_classes, a_max, n_samples)


def refit(csv_path) -> dict:
    """Re-fit an existing sweep CSV, taking a_max and K from its summary when present."""
    csv_path = Path(csv_path)
    rows = read_csv(csv_path)
    summary_path = csv_path.with_suffix(".summary.json")
    if summary_path.exists():
        s = json.loads(summary_path.read_text())
        k, a_max, n = s["num_classes"], s["a_max"], s.get("n_samples")
    else:
        k, n = 10, None
        lowest = min(r["p"] for r in rows)
        a_max = float(np.mean([r["accuracy"] for r in rows if r["p"] == lowest]))
    return fit_summary(curve_from_rows(rows, k, a_max, n))


def _variant_output(cfg: SweepConfig, suffix: str) -> str:
    return f"{cfg.output}_{suffix}"


def run_bitmask_sweep(cfg: SweepConfig) -> dict[int, dict]:
    out = {}
    for b in cfg.start_bits:
        out[b] = run_sweep(replace(cfg, output=_variant_output(cfg, f"bit{b}")), b)
    _write_index(cfg, "bitmask", {str(b): _brief(s) for b, s in out.items()})
    return out


def run_dtype_sweep(cfg: SweepConfig, dtypes=("float16", "bfloat16", "float32", "float64")) -> dict[str, dict]:
    out = {}
    for dt in dtypes:
        out[dt] = run_sweep(replace(cfg, dtype=dt, output=_variant_output(cfg, dt)))
    _write_index(cfg, "dtype", {dt: _brief(s) for dt, s in out.items()})
    return out


def run_quant_compare(cfg: SweepConfig) -> dict:
    runs = {dt: run_sweep(replace(cfg, dtype=dt, start_bits=[0], output=_variant_output(cfg, dt)))
            for dt in ("float32", "int8")}
    f, q = runs["float32"], runs["int8"]
    ratio = q["mu"] / f["mu"] if f["mu"] and q["mu"] else None
    p99_ratio = q["p99"] / f["p99"] if f["p99"] and q["p99"] else None
    result = {"float32": _brief(f), "int8": _brief(q), "mu_improvement": ratio, "p99_improvement": p99_ratio,
              "baseline_gap": f["a_max"] - q["a_max"]}
    _write_index(cfg, "quant", result)
    result["runs"] = runs
    return result


def run_device_pipeline(cfg: SweepConfig) -> dict:
    if cfg.device is None:
        raise ConfigError("device pipeline needs device parameters (lrs/hrs lognormals)")
    summary = run_sweep(cfg)
    acc = [r["accuracy"] for r in summary["rows"]]
    summary["accuracy_mean"] = float(np.mean(acc))
    summary["accuracy_std"] = float(np.std(acc, ddof=1)) if len(acc) > 1 else 0.0
    path = Path(cfg.output).with_suffix(".summary.json")
    path.write_text(json.dumps({k: v for k, v in summary.items() if k != "rows"}, indent=1) + "\n")
    return summary


def _brief(s: dict) -> dict:
    keys = ("mu", "sigma", "p99", "converged", "a_max", "a_min", "noisy_exponent_bits_total", "noisy_bits_total")
    return {k: s.get(k) for k in keys}


def _write_index(cfg: SweepConfig, kind: str, content: dict) -> None:
    path = Path(f"{cfg.output}_{kind}.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"kind": kind, "results": content, "config": cfg.to_dict()}, indent=1) + "\n")
