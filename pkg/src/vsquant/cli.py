"""``vsq`` command line: calibrate, quantize, simulate, sweep, cost.

Exit codes: 0 success, 2 usage, 3 data error, 4 internal invariant failure.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np

from . import calibration as cal
from .cost import COST_COLUMNS, cost_report, effective_bitwidth, memory_overhead
from .datapath import DatapathConfig, OperandRangeError, WidthOverflowError
from .nn import Mode, NetworkSpec, ShapeError, datapath_config_for, mode_of, run_network
from .quant import (
    ELEMENT_BITS,
    SCALE_BITS,
    VECTOR_SIZES,
    QuantConfig,
    dequantized_values,
    error_bound_values,
    quantize,
    reconstruct,
    save_quantized,
)
from .report import ERROR_COLUMNS, ErrorRow, write_rows
from .tensor import Tensor, TensorError, load_tensor, save_tensor

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4
SHORTHAND = re.compile(r"^\s*\d+/\d+/[^/]+/[^/]+\s*$")

CONFIG_KEYS = {
    "n_w": int, "n_a": int, "m_w": str, "m_a": str, "v": int,
    "granularity_w": str, "granularity_a": str, "signed_w": bool, "signed_a": bool,
    "rounding": str, "calib_w": str, "calib_a": str, "q_w": float, "q_a": float,
    "unsigned_full_range": bool, "scale_product_bits": int, "accum_guard_bits": int,
    "seed": int, "strict": bool,
}


class UsageError(Exception):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    if str(text).lower() in ("1", "true", "yes", "on"):
        return True
    if str(text).lower() in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _scale_bits(value) -> Optional[int]:
    if value is None or str(value).lower() in ("-", "fp", "fp32", "none"):
        return None
    return int(value)


def load_run_config(path: Optional[str]) -> dict:
    """Config dict from a JSON file or ``W/A/ws/as`` shorthand, unknown keys rejected."""
    if path is None:
        return {}
    if SHORTHAND.match(path):
        return {"shorthand": path.strip()}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(doc) - set(CONFIG_KEYS) - {"shorthand"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return doc


def build_config(args: argparse.Namespace) -> tuple[QuantConfig, dict]:
    """Merge config file/shorthand with ``--key value`` flags into a QuantConfig."""
    doc = load_run_config(getattr(args, "config", None))
    for key in CONFIG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            doc[key] = val
    v = int(doc.get("v", 16))
    base: dict = {}
    if "shorthand" in doc:
        sh = QuantConfig.from_shorthand(doc["shorthand"], v=v, strict=False)
        base = {k: getattr(sh, k) for k in
                ("n_w", "n_a", "m_w", "m_a", "granularity_w", "granularity_a")}
    kw = dict(base, v=v)
    if "n_w" in doc:
        kw["n_w"] = int(doc["n_w"])
    if "n_a" in doc:
        kw["n_a"] = int(doc["n_a"])
    for op in ("w", "a"):
        if f"m_{op}" in doc:
            kw[f"m_{op}"] = _scale_bits(doc[f"m_{op}"])
        if f"granularity_{op}" in doc:
            kw[f"granularity_{op}"] = cal.parse_granularity(doc[f"granularity_{op}"], v)
        elif f"granularity_{op}" not in kw:
            kw[f"granularity_{op}"] = cal.PerVector(v)
        if f"signed_{op}" in doc:
            kw[f"signed_{op}"] = _bool(doc[f"signed_{op}"])
        if f"calib_{op}" in doc:
            kw[f"calib_{op}"] = cal.parse_method(doc[f"calib_{op}"], doc.get(f"q_{op}"))
    for key in ("rounding",):
        if key in doc:
            kw[key] = doc[key]
    if "unsigned_full_range" in doc:
        kw["unsigned_full_range"] = _bool(doc["unsigned_full_range"])
    kw["strict"] = _bool(doc.get("strict", True))
    extras = {k: doc[k] for k in ("scale_product_bits", "accum_guard_bits", "seed") if k in doc}
    try:
        return QuantConfig(**kw), extras
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file or W/A/ws/as shorthand (e.g. 4/4/4/4)")
    for key, typ in CONFIG_KEYS.items():
        flag = "--" + key.replace("_", "-")
        p.add_argument(flag, dest=key, type=str if typ is bool else typ, default=None,
                       help=argparse.SUPPRESS)


# -- subcommands ------------------------------------------------------------


def cmd_calibrate(args) -> int:
    t = load_tensor(args.tensor)
    g = cal.parse_granularity(args.granularity, args.v)
    m = cal.parse_method(args.method, args.q)
    alphas = cal.calibrate(t, g, m, args.bits)
    _emit(alphas.to_json() + "\n", args.output)
    return EXIT_OK


def quantize_row(name: str, t: Tensor, cfg: QuantConfig, operand: str):
    qt = quantize(t, cfg, operand)
    recon = dequantized_values(qt)
    n = cfg.n_w if operand == "w" else cfg.n_a
    m = cfg.effective_scale_bits(operand) or 0
    label = mode_of(cfg)
    row = ErrorRow.compare(name, label, t.numpy(), recon, v=cfg.v, n_w=cfg.n_w, n_a=cfg.n_a,
                           m_w=cfg.shorthand().split("/")[2], m_a=cfg.shorthand().split("/")[3])
    out = {c: getattr(row, c) for c in ERROR_COLUMNS}
    out["memory_overhead"] = float(memory_overhead(n, m, cfg.v))
    out["effective_bitwidth"] = float(effective_bitwidth(n, m, cfg.v))
    return out, qt


def cmd_quantize(args) -> int:
    cfg, _ = build_config(args)
    t = load_tensor(args.tensor)
    name = os.path.splitext(os.path.basename(args.tensor))[0]
    row, qt = quantize_row(name, t, cfg, args.operand)
    if args.output:
        save_quantized(qt, args.output)
    if args.reconstructed:
        save_tensor(reconstruct(qt), args.reconstructed)
    columns = (*ERROR_COLUMNS, "memory_overhead", "effective_bitwidth")
    _write_csv(columns, [row], args.report)
    return EXIT_OK


def _load_input(args, net: NetworkSpec, seed: int) -> np.ndarray:
    if args.input:
        return load_tensor(args.input).numpy()
    from .fixtures import random_activation, rng
    if len(net.input_shape) != 3:
        raise UsageError("--input is required for non (C,H,W) networks")
    return random_activation(rng(seed), *net.input_shape)


def _load_datapath(path: Optional[str]) -> Optional[DatapathConfig]:
    if not path:
        return None
    try:
        with open(path) as fh:
            return DatapathConfig.from_json(fh.read())
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise UsageError(f"bad datapath config {path}: {exc}") from exc


def cmd_simulate(args) -> int:
    dcfg = _load_datapath(args.datapath)
    if dcfg is not None and args.config is None:
        ws = str(dcfg.m_w) if dcfg.m_w else "-"
        as_ = str(dcfg.m_a) if dcfg.m_a else "-"
        args.config = f"{dcfg.n_w}/{dcfg.n_a}/{ws}/{as_}"
        if args.v is None:
            args.v = dcfg.v
    cfg, extras = build_config(args)
    if dcfg is not None and (dcfg.n_w, dcfg.n_a, dcfg.v) != (cfg.n_w, cfg.n_a, cfg.v):
        raise UsageError("datapath config disagrees with quantization config")
    sp = dcfg.scale_product_bits if dcfg is not None else None
    if "scale_product_bits" in extras:
        sp = int(extras["scale_product_bits"])
    net = NetworkSpec.load(args.network, cfg)
    x = _load_input(args, net, int(extras.get("seed", 0)))
    mode = None if args.mode == "config" else Mode.parse(args.mode)
    out, report = run_network(net, x, mode, cfg, scale_product_bits=sp)
    if args.output_dir:
        os.makedirs(args.output_dir, exist_ok=True)
        save_tensor(Tensor.from_array(out.astype(np.float32)),
                    os.path.join(args.output_dir, "output.vst"))
        with open(os.path.join(args.output_dir, "report.csv"), "w") as fh:
            fh.write(report.to_csv())
    else:
        sys.stdout.write(report.to_csv())
    return EXIT_OK


SWEEP_COLUMNS = ("config", *ERROR_COLUMNS, "err_bound_mean", *COST_COLUMNS)


def _grid_values(values: Sequence[str], allowed, name: str, scale: bool = False):
    out = []
    for v in values:
        if scale and str(v).lower() in ("-", "fp"):
            out.append(str(v).lower())
            continue
        try:
            iv = int(v)
        except ValueError as exc:
            raise UsageError(f"bad {name} value {v!r}") from exc
        if iv not in allowed:
            raise UsageError(f"{name} value {iv} not in design space {allowed}")
        out.append(iv)
    if not out:
        raise UsageError(f"empty {name} grid")
    return out


def sweep_grid(args) -> list[tuple[str, int]]:
    w = _grid_values(args.w_bits, ELEMENT_BITS, "weight bits")
    a = _grid_values(args.a_bits, ELEMENT_BITS, "activation bits")
    ws = _grid_values(args.ws_bits, SCALE_BITS, "weight scale bits", scale=True)
    as_ = _grid_values(args.as_bits, SCALE_BITS, "activation scale bits", scale=True)
    vs = _grid_values(args.vector_sizes, VECTOR_SIZES, "vector size")
    return [(f"{n_w}/{n_a}/{m_w}/{m_a}", v)
            for n_w, n_a, m_w, m_a, v in itertools.product(w, a, ws, as_, vs)]


def sweep_row(net: NetworkSpec, x: np.ndarray, shorthand: str, v: int,
              base: QuantConfig) -> dict:
    cfg = QuantConfig.from_shorthand(shorthand, v=v, calib_w=base.calib_w,
                                     rounding=base.rounding)
    out, report = run_network(net, x, None, cfg)
    row = {c: getattr(report.final, c) for c in ERROR_COLUMNS}
    row["layer"] = "output"
    bounds = np.concatenate([error_bound_values(quantize(layer.weights, cfg, "w")).reshape(-1)
                             for layer in net.layers])
    row["err_bound_mean"] = float(bounds.mean())
    row["config"] = shorthand
    row.update(cost_report(datapath_config_for(cfg)).to_row())
    return row


def run_sweep(net: NetworkSpec, x: np.ndarray, grid, base: QuantConfig,
              threads: int = 1) -> list[dict]:
    def job(item):
        return sweep_row(net, x, item[0], item[1], base)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(job, grid))
    else:
        rows = [job(g) for g in grid]
    return sorted(rows, key=lambda r: (r["V"], r["N_w"], r["N_a"], r["M_w"], r["M_a"], r["config"]))


def cmd_sweep(args) -> int:
    cfg, extras = build_config(args)
    net = NetworkSpec.load(args.network, cfg)
    x = _load_input(args, net, int(extras.get("seed", 0)))
    grid = sweep_grid(args)
    threads = max(1, int(os.environ.get("VSQ_THREADS", "1") or 1))
    rows = run_sweep(net, x, grid, cfg, threads)
    _write_csv(SWEEP_COLUMNS, rows, args.output)
    return EXIT_OK


def cmd_cost(args) -> int:
    cfg, extras = build_config(args)
    sp = extras.get("scale_product_bits")
    dcfg = datapath_config_for(cfg, sp, int(extras.get("accum_guard_bits", 12)))
    report = cost_report(dcfg)
    if args.format == "json":
        _emit(report.to_json() + "\n", args.output)
    else:
        row = dict(report.to_row(), config=cfg.shorthand(), V=cfg.v)
        _write_csv(("config", "V", *COST_COLUMNS), [row], args.output)
    return EXIT_OK


# -- plumbing ---------------------------------------------------------------


def _emit(text: str, path: Optional[str]) -> None:
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _write_csv(columns, rows, path: Optional[str]) -> None:
    write_rows(path if path else sys.stdout, columns, rows)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vsq", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="select clipping thresholds for a tensor")
    p.add_argument("tensor")
    p.add_argument("--granularity", default="layer", choices=("layer", "channel", "vector"))
    p.add_argument("--vector-size", "--V", dest="v", type=int, default=16)
    p.add_argument("--method", default="max", choices=("max", "percentile", "entropy", "mse"))
    p.add_argument("--q", type=float, default=None, help="percentile fraction in (0, 1]")
    p.add_argument("--bits", type=int, default=8, help="bitwidth for entropy/MSE search")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("quantize", help="quantize one tensor and report its error")
    p.add_argument("tensor")
    add_config_flags(p)
    p.add_argument("--operand", choices=("w", "a"), default="w")
    p.add_argument("-o", "--output", help="VSQ1 output file")
    p.add_argument("--reconstructed", help="write the reconstructed tensor (VST1)")
    p.add_argument("--report", help="CSV report path (default stdout)")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("simulate", help="run a network through the quantized datapath")
    p.add_argument("network")
    p.add_argument("--input")
    p.add_argument("--mode", default="config",
                   help="reference, per_layer, poc, pvao, pvwo, per_vector_single, pvaw, "
                        "or 'config' to use --config as given")
    p.add_argument("--datapath", help="datapath JSON ({\"W\":4,\"A\":4,\"ws\":4,\"as\":4,...})")
    add_config_flags(p)
    p.add_argument("-o", "--output-dir")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="sweep bitwidths and vector sizes, emit CSV")
    p.add_argument("network")
    p.add_argument("--input")
    p.add_argument("--w-bits", nargs="*", default=["4"])
    p.add_argument("--a-bits", nargs="*", default=["4"])
    p.add_argument("--ws-bits", nargs="*", default=["4"])
    p.add_argument("--as-bits", nargs="*", default=["4"])
    p.add_argument("--vector-sizes", nargs="*", default=["16"])
    add_config_flags(p)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("cost", help="storage overhead and datapath widths")
    add_config_flags(p)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vsq: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (WidthOverflowError, AssertionError) as exc:
        print(f"vsq: internal invariant failure: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (TensorError, ShapeError, OperandRangeError, ValueError, KeyError, OSError) as exc:
        print(f"vsq: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
