"""Command-line entry point: ``rramflip <subcommand> [--config FILE] [flags]``.

Exit codes: 0 success, 1 configuration error, 2 data or model load error,
3 logistic fit did not converge (``fit`` only).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness, synthetic
from .device import SolverError
from .io import LoadError, write_cifar10_batch
from .tensor import UnsupportedDtypeError

EXIT_OK, EXIT_CONFIG, EXIT_LOAD, EXIT_NOT_CONVERGED = 0, 1, 2, 3

log = logging.getLogger("rramflip")


def _ints(s: str) -> list[int]:
    s = s.strip()
    if "-" in s and "," not in s:
        lo, hi = (int(v) for v in s.split("-"))
        return list(range(lo, hi + 1))
    return [int(v) for v in s.split(",") if v]


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v]


def _strs(s: str) -> list[str]:
    return [v.strip() for v in s.split(",") if v.strip()]


def _add_sweep_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with SweepConfig fields; flags override it")
    p.add_argument("--model", help="model manifest (default: shipped reference CNN)")
    p.add_argument("--dataset", help=f"CIFAR-10 binary directory or '{harness.SYNTHETIC}' "
                                     f"(default: ${harness.DATA_ENV} or synthetic)")
    p.add_argument("--subset", type=int, help="balanced evaluation subset size (0 = full set)")
    p.add_argument("--dtype", help="float16, bfloat16, float32, float64 or int8")
    p.add_argument("--grid", type=_floats, help="comma-separated flip probabilities")
    p.add_argument("--p-min", type=float, help="log grid lower end")
    p.add_argument("--p-max", type=float, help="log grid upper end")
    p.add_argument("--per-decade", type=int, help="log grid density")
    p.add_argument("--repetitions", type=int)
    p.add_argument("--start-bits", type=_ints, help="e.g. 0 or 1-9 or 1,4,8")
    p.add_argument("--targets", type=_strs, help="comma list of activations, weights, biases")
    p.add_argument("--seed", type=int)
    p.add_argument("--output", help="output path prefix (CSV, summary JSON)")
    p.add_argument("--device", help="JSON file with lrs/hrs lognormal parameters")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--calibration-size", type=int)


def build_config(args: argparse.Namespace) -> harness.SweepConfig:
    d = {}
    if args.config:
        d.update(harness.SweepConfig.from_file(args.config).to_dict())
    for name in ("model", "dataset", "dtype", "grid", "repetitions", "start_bits", "targets", "seed",
                 "output", "batch_size", "workers", "calibration_size"):
        v = getattr(args, name)
        if v is not None:
            d[name] = v
    if args.subset is not None:
        d["subset"] = args.subset or None
    if any(v is not None for v in (args.p_min, args.p_max, args.per_decade)):
        if args.grid is not None:
            raise harness.ConfigError("give either --grid or --p-min/--p-max/--per-decade, not both")
        d["grid"] = harness.log_grid(args.p_min or 1e-8, args.p_max or 1e-1, args.per_decade or 8)
    if args.device:
        try:
            d["device"] = json.loads(Path(args.device).read_text())
        except FileNotFoundError:
            raise harness.ConfigError(f"device file not found: {args.device}") from None
        except json.JSONDecodeError as e:
            raise harness.ConfigError(f"device file {args.device} is not valid JSON: {e}") from None
    try:
        cfg = harness.SweepConfig.from_dict(d)
    except TypeError as e:
        raise harness.ConfigError(str(e)) from None
    return cfg.validate()


def _report(obj) -> None:
    print(json.dumps(obj, indent=1, default=str))


def _strip_rows(s: dict) -> dict:
    return {k: v for k, v in s.items() if k not in ("rows", "curve", "config")}


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    _report(_strip_rows(harness.run_sweep(cfg)))
    return EXIT_OK


def cmd_bitmask(args) -> int:
    cfg = build_config(args)
    out = harness.run_bitmask_sweep(cfg)
    _report({b: _strip_rows(s) for b, s in out.items()})
    return EXIT_OK


def cmd_dtype(args) -> int:
    cfg = build_config(args)
    dtypes = args.dtypes or ["float16", "bfloat16", "float32", "float64"]
    out = harness.run_dtype_sweep(cfg, dtypes)
    _report({dt: _strip_rows(s) for dt, s in out.items()})
    return EXIT_OK


def cmd_quant(args) -> int:
    cfg = build_config(args)
    out = harness.run_quant_compare(cfg)
    out.pop("runs")
    _report(out)
    return EXIT_OK


def cmd_device(args) -> int:
    cfg = build_config(args)
    if cfg.device is None:
        raise harness.ConfigError("the device subcommand needs --device or a 'device' entry in --config")
    _report(_strip_rows(harness.run_device_pipeline(cfg)))
    return EXIT_OK


def cmd_fit(args) -> int:
    path = Path(args.csv)
    if not path.exists():
        raise LoadError(f"results file not found: {path}")
    s = harness.refit(path)
    s.pop("curve", None)
    _report(s)
    return EXIT_OK if s["converged"] else EXIT_NOT_CONVERGED


def cmd_make_desk_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    imgs, labels = synthetic.make_images(args.n, args.seed)
    write_cifar10_batch(out / "test_batch.bin", imgs, labels)
    _report({"path": str(out / "test_batch.bin"), "records": len(labels)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rramflip", description="Bit-flip write-noise resilience sweeps.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, text in [
        ("sweep", cmd_sweep, "accuracy over a flip-probability grid, with logistic fit"),
        ("bitmask-sweep", cmd_bitmask, "one sweep per thermometer-mask start bit"),
        ("dtype-sweep", cmd_dtype, "one sweep per floating-point element type"),
        ("quant-compare", cmd_quant, "float32 against int8-quantized sweeps"),
        ("device", cmd_device, "derive p_bf from lognormal HRS/LRS parameters and evaluate at it"),
    ]:
        p = sub.add_parser(name, help=text)
        _add_sweep_flags(p)
        if name == "dtype-sweep":
            p.add_argument("--dtypes", type=_strs, help="comma list (default: all four float types)")
        p.set_defaults(func=fn)

    p = sub.add_parser("fit", help="re-fit an existing sweep CSV")
    p.add_argument("csv")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("make-desk-data", help="write the synthetic desk test set as a CIFAR-10 binary batch")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--seed", type=int, default=harness.DESK_TEST_SEED)
    p.set_defaults(func=cmd_make_desk_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (harness.ConfigError, UnsupportedDtypeError, SolverError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (LoadError, FileNotFoundError) as e:
        print(f"load error: {e}", file=sys.stderr)
        return EXIT_LOAD


if __name__ == "__main__":
    sys.exit(main())
