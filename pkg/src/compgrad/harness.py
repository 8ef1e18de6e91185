"""Simulated multi-node experiment runs with bit metering and traces."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import algorithms as alg
from .compressors import parse_compressor
from .dataset import partition, resolve_dataset
from .objectives import Objective, Regularizer, logistic_objective

log = logging.getLogger(__name__)

GAP_FLOOR = -1e-10
TRACE_POINTS = 10_000


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, msg: str):
        super().__init__(msg)
        self.stage = stage


@dataclass
class ExperimentSpec:
    method: str
    compressor: str
    dataset: str
    n: int = 20
    lam: float = 1e-3
    seed: int = 0
    max_iters: int | None = None
    max_bits: float | None = None
    partition: str = "shuffled"
    diagnostics: bool = False
    overrides: dict = field(default_factory=dict)
    regularizer: str = "none"  # "none" or "l1:<lambda>"
    count_shift_message: bool = True
    sum_bits_over_nodes: bool = False
    natural_omega: float = 0.125
    reference_iters: int = 100_000

    def validate(self) -> None:
        if self.n < 1:
            raise ExperimentError("config", "n must be >= 1")
        if self.lam < 0:
            raise ExperimentError("config", "lambda must be >= 0")
        if self.max_iters is None and self.max_bits is None:
            raise ExperimentError("config", "need max_iters or max_bits")
        if (self.max_iters is not None and self.max_iters <= 0) or (
            self.max_bits is not None and self.max_bits <= 0
        ):
            raise ExperimentError("config", "budget must be positive")
        if self.method not in alg.METHODS:
            raise ExperimentError("config", f"unknown method {self.method!r}; expected one of {', '.join(alg.METHODS)}")
        if self.partition not in ("contiguous", "shuffled"):
            raise ExperimentError("config", f"unknown partition scheme {self.partition!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TraceRecord:
    iter: int
    cumulative_bits: float
    f_gap: float
    grad_norm: float
    dist_to_opt: float
    lyapunov: alg.LyapunovSnapshot | None = None


@dataclass(frozen=True)
class ReferenceSolution:
    x_star: np.ndarray
    f_star: float
    meta: dict


# -- objective construction --------------------------------------------------


def parse_regularizer(text: str) -> Regularizer:
    if text in ("none", "zero", ""):
        return Regularizer()
    kind, _, val = text.partition(":")
    try:
        return Regularizer(kind, float(val))
    except ValueError as exc:
        raise ExperimentError("config", f"bad regularizer {text!r}: {exc}") from None


def build_objective(spec: ExperimentSpec) -> Objective:
    try:
        ds, _ = resolve_dataset(spec.dataset)
    except (OSError, ValueError) as exc:
        raise ExperimentError("dataset", str(exc)) from None
    try:
        parts = partition(ds.m, spec.n, spec.partition, spec.seed)
    except ValueError as exc:
        raise ExperimentError("dataset", str(exc)) from None
    return logistic_objective(ds.to_csr(), ds.labels, parts.node_sample_indices, spec.lam, parse_regularizer(spec.regularizer))


# -- reference optimum -------------------------------------------------------


def _drive(method: alg.Method, x0, max_iters: int, tol: float):
    state = method.init(x0)
    best = (math.inf, None, 0)
    obj = method.obj
    for k in range(max_iters):
        out = method.step(state)
        res = _residual(obj, out.query, out.grad)
        if res < best[0]:
            best = (res, out.query, k)
        if res <= tol:
            break
        state = out.state
    return best


def _residual(obj: Objective, x: np.ndarray, g: np.ndarray) -> float:
    if obj.regularizer.kind == "zero":
        return float(np.linalg.norm(g))
    eta = 1.0 / obj.L
    return float(np.linalg.norm(x - obj.prox(eta, x - eta * g)) / eta)


def solve_reference(obj: Objective, x0=None, max_iters: int = 100_000, tol: float = 1e-12) -> ReferenceSolution:
    """Best of uncompressed ADIANA, DIANA and DCGD run to ``tol`` or ``max_iters``.

    Uncompressed DIANA and DCGD take identical gradient steps (eta = 1/L), so
    that trajectory is computed once and reported for both.
    """
    if not obj.mu > 0:
        raise ExperimentError("reference", "reference solve needs a strongly convex objective (mu > 0)")
    from .compressors import identity

    x0 = np.zeros(obj.d) if x0 is None else np.asarray(x0, dtype=np.float64)
    c = identity(obj.d)
    g0 = _residual(obj, x0, obj.grad_full(x0))
    runs = {}
    cache = {}
    for name in ("adiana", "diana", "dcgd"):
        m = alg.Method(name, obj, c)
        key = ("gd", m.schedule.eta) if name != "adiana" else ("adiana",)
        if key not in cache:
            cache[key] = _drive(m, x0, max_iters, tol)
        res, x, k = cache[key]
        runs[name] = (obj.value(x), x, res, k)
    best = min(runs, key=lambda nm: runs[nm][0])
    f_star, x_star, res, k = runs[best]
    meta = {
        "winner": best,
        "residual": res,
        "iterations": {nm: v[3] + 1 for nm, v in runs.items()},
        "final_values": {nm: v[0] for nm, v in runs.items()},
        "unconverged": bool(res > 1e-10 * max(1.0, g0)),
    }
    if meta["unconverged"]:
        log.warning("reference solve stopped at residual %.3e", res)
    return ReferenceSolution(x_star, f_star, meta)


# -- diagnostics -------------------------------------------------------------


def lyapunov_snapshot(state: alg.AdianaState, obj: Objective, ref: ReferenceSolution, sched: alg.AdianaSchedule) -> alg.LyapunovSnapshot:
    x_star, f_star = ref.x_star, ref.f_star
    Z = float(np.sum((state.z - x_star) ** 2))
    Y = obj.value(state.y) - f_star
    W = obj.value(state.w) - f_star
    gw = state.w_grads if state.w_grads is not None else obj.node_grads(state.w)
    H = float(np.mean(np.sum((state.h_nodes - gw) ** 2, axis=1)))
    t1, t2, g, b, p = sched.theta1, sched.theta2, sched.gamma, sched.beta, sched.p
    psi = Z + (2 * g * b / t1) * Y + 2 * g * b * t2 * (1 + t1) / (t1 * p) * W
    if sched.omega > 0:
        psi += 8 * g * sched.eta * sched.omega / (sched.alpha * t1 * obj.n) * H
    return alg.LyapunovSnapshot(Z, Y, W, H, psi)


# -- run ---------------------------------------------------------------------


def planned_iterations(spec: ExperimentSpec, round_bits: float) -> int:
    caps = []
    if spec.max_iters is not None:
        caps.append(int(spec.max_iters))
    if spec.max_bits is not None:
        caps.append(int(math.floor(spec.max_bits / round_bits * (1 + 1e-12))))
    return min(caps)


def trace_stride(total: int) -> int:
    return 1 if total < TRACE_POINTS else math.ceil(total / TRACE_POINTS)


def make_method(spec: ExperimentSpec, obj: Objective) -> alg.Method:
    try:
        comp = parse_compressor(spec.compressor, obj.d, spec.natural_omega)
        return alg.Method(spec.method, obj, comp, spec.seed, spec.overrides, spec.count_shift_message)
    except ValueError as exc:
        raise ExperimentError("config", str(exc)) from None


def run(
    spec: ExperimentSpec,
    obj: Objective | None = None,
    ref: ReferenceSolution | None = None,
    x0=None,
    stride: int | None = None,
) -> list[TraceRecord]:
    """Run ``spec`` to its budget and return the (thinned) trace.

    Row ``k`` describes the query point of round ``k`` and the bits spent in the
    ``k`` rounds before it. ``obj`` and ``ref`` may be passed in to skip the
    dataset load and the reference solve.
    """
    spec.validate()
    obj = build_objective(spec) if obj is None else obj
    method = make_method(spec, obj)
    if spec.diagnostics and spec.method != "adiana":
        log.info("diagnostics are recorded for adiana only")
    ref = solve_reference(obj, max_iters=spec.reference_iters) if ref is None else ref

    round_bits = method.bits_per_node() * (method.nodes_communicating() if spec.sum_bits_over_nodes else 1)
    total = planned_iterations(spec, round_bits)
    try:
        method.check(total)
    except ValueError as exc:
        raise ExperimentError("config", str(exc)) from None
    stride = trace_stride(total) if stride is None else stride
    x0 = np.zeros(obj.d) if x0 is None else np.asarray(x0, dtype=np.float64)

    state = method.init(x0)
    trace: list[TraceRecord] = []
    clamped = 0

    def record(k, x, g, st):
        nonlocal clamped
        gap = obj.value(x) - ref.f_star
        if gap < GAP_FLOOR:
            clamped += 1
            gap = GAP_FLOOR
        snap = None
        if spec.diagnostics and isinstance(st, alg.AdianaState):
            snap = lyapunov_snapshot(st, obj, ref, method.schedule)
        trace.append(
            TraceRecord(k, k * round_bits, gap, float(np.linalg.norm(g)), float(np.linalg.norm(x - ref.x_star)), snap)
        )

    for k in range(total):
        try:
            out = method.step(state)
        except (ValueError, FloatingPointError) as exc:
            raise ExperimentError("run", f"iteration {k}: {exc}") from None
        if k % stride == 0:
            record(k, out.query, out.grad, state)
        state = out.state
    xq = method.query(state)
    record(total, xq, obj.grad_full(xq), state)
    if not np.all(np.isfinite(xq)):
        raise ExperimentError("run", f"iterates diverged by iteration {total}")
    if clamped:
        log.warning("%d f-gap values fell below the reference optimum and were clamped", clamped)
    return trace


# -- trace files -------------------------------------------------------------

TRACE_HEADER = ["iter", "bits", "f_gap", "grad_norm", "dist_opt"]
LYAPUNOV_HEADER = ["Z", "Y", "W", "H", "Psi"]


def _fmt(v: float) -> str:
    return format(v, ".17g")


def trace_to_csv(trace: list[TraceRecord], diagnostics: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER + (LYAPUNOV_HEADER if diagnostics else []))
    for r in trace:
        row = [str(r.iter), _fmt(r.cumulative_bits), _fmt(r.f_gap), _fmt(r.grad_norm), _fmt(r.dist_to_opt)]
        if diagnostics:
            if r.lyapunov is None:
                row += [""] * len(LYAPUNOV_HEADER)
            else:
                row += [_fmt(getattr(r.lyapunov, f)) for f in LYAPUNOV_HEADER]
        w.writerow(row)
    return buf.getvalue()


def atomic_write(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
