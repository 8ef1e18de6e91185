"""Command-line entry point: ``compgrad run`` and ``compgrad validate``."""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import algorithms as alg
from .dataset import SYNTHETIC
from .harness import (
    ExperimentError,
    ExperimentSpec,
    atomic_write,
    build_objective,
    make_method,
    run,
    solve_reference,
    trace_to_csv,
)

CONFIG_KEYS = {
    "method": str,
    "methods": list,
    "compressor": str,
    "compressors": list,
    "dataset": str,
    "nodes": int,
    "node_counts": list,
    "lambda": float,
    "seed": int,
    "max_iters": int,
    "max_bits": float,
    "partition": str,
    "diagnostics": bool,
    "out": str,
    "overrides": dict,
    "regularizer": str,
    "count_shift_message": bool,
    "sum_bits_over_nodes": bool,
    "natural_omega": float,
    "reference_iters": int,
}

DEFAULTS = {
    "nodes": 20,
    "lambda": 1e-3,
    "seed": 0,
    "partition": "shuffled",
    "diagnostics": False,
    "out": "runs",
    "overrides": {},
    "regularizer": "none",
    "count_shift_message": True,
    "sum_bits_over_nodes": False,
    "natural_omega": 0.125,
    "reference_iters": 100_000,
}


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its keys")
    p.add_argument("--method", help=f"one of {', '.join(alg.METHODS)}")
    p.add_argument("--compressor", help="identity | randk[:r] | dithering[:s] | natural")
    p.add_argument("--dataset", help=f"LIBSVM file path or name; synthetic: {', '.join(SYNTHETIC)}")
    p.add_argument("--nodes", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--max-bits", type=float)
    p.add_argument("--partition", choices=["contiguous", "shuffled"])
    p.add_argument("--diagnostics", action="store_true", default=None)
    p.add_argument("--out")
    p.add_argument("--regularizer", help="none | l1:<lambda>")
    p.add_argument("--count-shift-message", type=_bool, metavar="{true,false}")
    p.add_argument("--sum-bits-over-nodes", type=_bool, metavar="{true,false}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compgrad", description="Compressed gradient methods on simulated nodes")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("run", help="run experiments and write trace CSVs"))
    _add_common(sub.add_parser("validate", help="print resolved constants and schedules without running"))
    return parser


def load_config(args: argparse.Namespace) -> dict:
    cfg: dict = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(cfg) - set(CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        base = Path(args.config).resolve().parent
        # relative dataset/out paths in a config file are relative to that file
        for key in ("dataset", "out"):
            if key in cfg and isinstance(cfg[key], str) and cfg[key] not in SYNTHETIC:
                cand = base / cfg[key]
                if key == "out" or cand.exists():
                    cfg[key] = str(cand)
    flags = {
        "method": args.method,
        "compressor": args.compressor,
        "dataset": args.dataset,
        "nodes": args.nodes,
        "lambda": args.lam,
        "seed": args.seed,
        "max_iters": args.max_iters,
        "max_bits": args.max_bits,
        "partition": args.partition,
        "diagnostics": args.diagnostics,
        "out": args.out,
        "regularizer": args.regularizer,
        "count_shift_message": args.count_shift_message,
        "sum_bits_over_nodes": args.sum_bits_over_nodes,
    }
    for key, val in flags.items():
        if val is not None:
            cfg[key] = val
            # a single-valued flag replaces the matching sweep list
            plural = {"method": "methods", "compressor": "compressors", "nodes": "node_counts"}.get(key)
            if plural:
                cfg.pop(plural, None)
    return resolve(cfg)


def resolve(cfg: dict) -> dict:
    out = dict(DEFAULTS)
    out.update(cfg)
    for key, typ in CONFIG_KEYS.items():
        if key in out and out[key] is not None:
            val = out[key]
            if typ is float and isinstance(val, int) and not isinstance(val, bool):
                val = float(val)
            if typ is int and isinstance(val, float) and val.is_integer():
                val = int(val)
            if not isinstance(val, typ) or (typ is int and isinstance(val, bool)):
                raise ConfigError(f"{key} must be {typ.__name__}, got {val!r}")
            out[key] = val
    out["methods"] = list(out.pop("methods", None) or ([out["method"]] if out.get("method") else []))
    out["compressors"] = list(out.pop("compressors", None) or ([out["compressor"]] if out.get("compressor") else []))
    out["node_counts"] = [int(v) for v in (out.pop("node_counts", None) or [out["nodes"]])]
    out.pop("method", None)
    out.pop("compressor", None)
    out.pop("nodes", None)
    if not out["methods"]:
        raise ConfigError("no method given")
    if not out["compressors"]:
        raise ConfigError("no compressor given")
    if not out.get("dataset"):
        raise ConfigError("no dataset given")
    for m in out["methods"]:
        if m not in alg.METHODS:
            raise ConfigError(f"unknown method {m!r}; expected one of {', '.join(alg.METHODS)}")
    if out.get("max_iters") is None and out.get("max_bits") is None:
        raise ConfigError("need max_iters or max_bits")
    ds = out["dataset"]
    if ds not in SYNTHETIC and Path(ds).exists():
        out["dataset"] = str(Path(ds).resolve())
    out["out"] = str(Path(out["out"]).resolve())
    return out


def cell_specs(cfg: dict) -> list[ExperimentSpec]:
    specs = []
    for n, method, comp in itertools.product(cfg["node_counts"], cfg["methods"], cfg["compressors"]):
        specs.append(
            ExperimentSpec(
                method=method,
                compressor=comp,
                dataset=cfg["dataset"],
                n=n,
                lam=cfg["lambda"],
                seed=cfg["seed"],
                max_iters=cfg.get("max_iters"),
                max_bits=cfg.get("max_bits"),
                partition=cfg["partition"],
                diagnostics=cfg["diagnostics"],
                overrides=dict(cfg["overrides"]),
                regularizer=cfg["regularizer"],
                count_shift_message=cfg["count_shift_message"],
                sum_bits_over_nodes=cfg["sum_bits_over_nodes"],
                natural_omega=cfg["natural_omega"],
                reference_iters=cfg["reference_iters"],
            )
        )
    for s in specs:
        s.validate()
    return specs


def trace_name(spec: ExperimentSpec, multi_n: bool) -> str:
    comp = spec.compressor.replace(":", "-")
    suffix = f"_n{spec.n}" if multi_n else ""
    return f"{spec.method}_{comp}{suffix}.csv"


def _problem_key(spec: ExperimentSpec) -> tuple:
    return (spec.dataset, spec.n, spec.lam, spec.partition, spec.seed, spec.regularizer)


def threads() -> int:
    try:
        return max(1, int(os.environ.get("COMPGRAD_THREADS", "1")))
    except ValueError:
        return 1


def cmd_run(cfg: dict) -> int:
    specs = cell_specs(cfg)
    problems: dict = {}
    for spec in specs:
        key = _problem_key(spec)
        if key not in problems:
            obj = build_objective(spec)
            problems[key] = (obj, solve_reference(obj, max_iters=spec.reference_iters))
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    atomic_write(outdir / "resolved.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    multi_n = len(cfg["node_counts"]) > 1

    def one(spec):
        obj, ref = problems[_problem_key(spec)]
        trace = run(spec, obj, ref)
        atomic_write(outdir / trace_name(spec, multi_n), trace_to_csv(trace, spec.diagnostics))
        return spec, trace

    with ThreadPoolExecutor(max_workers=threads()) as pool:
        results = list(pool.map(one, specs))

    print(f"{'method':<10} {'compressor':<14} {'n':>4} {'iters':>9} {'bits':>14} {'final_f_gap':>24}")
    for spec, trace in results:
        last = trace[-1]
        print(
            f"{spec.method:<10} {spec.compressor:<14} {spec.n:>4} {last.iter:>9d} "
            f"{last.cumulative_bits:>14.6g} {last.f_gap:>24.17g}"
        )
    return 0


def cmd_validate(cfg: dict) -> int:
    specs = cell_specs(cfg)
    objs: dict = {}
    for spec in specs:
        key = _problem_key(spec)
        if key not in objs:
            objs[key] = build_objective(spec)
        obj = objs[key]
        m = make_method(spec, obj)
        s = m.schedule
        vals = {"L": obj.L, "mu": obj.mu, "omega": m.omega}
        if isinstance(s, alg.AdianaSchedule):
            for f in ("eta", "theta1", "theta2", "alpha", "beta", "gamma", "p"):
                vals[f] = getattr(s, f)
        elif isinstance(s, alg.AcgdSchedule):
            vals.update(eta=s.eta, p=s.p, theta0=s.theta(0), beta0=s.beta(0), gamma0=s.gamma(0))
        else:
            vals["eta"] = s.eta
            if spec.method == "diana":
                vals["alpha"] = s.alpha
        body = " ".join(f"{k}={float(v):.17g}" for k, v in vals.items())
        print(f"{spec.method} {spec.compressor} n={spec.n} {body}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "validate":
            return cmd_validate(cfg)
        return cmd_run(cfg)
    except ConfigError as exc:
        print(f"ERROR config: {exc}", file=sys.stderr)
    except ExperimentError as exc:
        print(f"ERROR {exc.stage}: {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"ERROR io: {exc}", file=sys.stderr)
    except Exception as exc:  # noqa: BLE001
        print(f"ERROR run: {type(exc).__name__}: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
