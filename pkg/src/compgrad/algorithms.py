"""Compressed first-order methods and their theoretical parameter schedules.

Single machine: CGD and the accelerated ACGD (three sequences x, y, z).
Distributed: DCGD, DIANA (learned shifts h_i) and the accelerated ADIANA
(four sequences x, y, z, w plus shifts).

Every step is a pure function of ``(state, schedule, master seed)``. Random
draws come from streams keyed by ``(node, iteration, channel)``; channel 0
compresses gradients, channel 1 compresses shift updates and channel 2 is the
server coin that refreshes the ADIANA anchor ``w``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .compressors import Compressor, bit_cost, compress_rows, omega as omega_of
from .numerics import CH_ANCHOR, CH_GRADIENT, CH_SHIFT, SERVER, RngStream
from .objectives import Objective

METHODS = ("cgd", "acgd-cvx", "acgd-scvx", "dcgd", "diana", "adiana")


class ScheduleError(ValueError):
    pass


# -- schedules ---------------------------------------------------------------


@dataclass(frozen=True)
class AcgdSchedule:
    mode: str  # "convex" | "strongly_convex"
    L: float
    mu: float
    omega: float
    eta: float
    p: float

    def theta(self, k: int) -> float:
        if self.mode == "convex":
            return k / (k + 2)
        r = math.sqrt(self.mu / self.L)
        return self.p / (self.p + r)

    def beta(self, k: int) -> float:
        if self.mode == "convex":
            return 0.0
        return math.sqrt(self.mu / self.L) / self.p

    def gamma(self, k: int) -> float:
        if self.mode == "convex":
            return 2.0 * self.p / (k + 2)
        return math.sqrt(self.mu / self.L)

    def violations(self, k: int, rtol: float = 1e-12) -> list[str]:
        """Conditions of the one-step descent lemma that fail at iteration ``k``."""
        th, be, ga, p, eta = self.theta(k), self.beta(k), self.gamma(k), self.p, self.eta
        out = []
        # theta * (1 - beta*gamma/p) = 1 - gamma/p, kept in product form for mu = L
        lhs, rhs = th * (1 - be * ga / p), 1 - ga / p
        if abs(lhs - rhs) > rtol * max(1.0, abs(rhs)) + 1e-15:
            out.append(f"theta_{k}={th!r} violates theta*(1-beta*gamma/p) = 1-gamma/p ({lhs!r} vs {rhs!r})")
        cap = min(self.mu * eta / (ga * p), 1.0)
        if be > cap * (1 + rtol):
            out.append(f"beta_{k}={be!r} exceeds min(mu*eta/(gamma*p), 1)={cap!r}")
        need = (1 + self.L * eta) * (1 + self.omega) / 2
        if p < need * (1 - rtol):
            out.append(f"p={p!r} below (1+L*eta)(1+omega)/2={need!r}")
        return out

    def check(self, k_max: int = 0) -> None:
        ks = range(k_max + 1) if self.mode == "convex" else (0,)
        for k in ks:
            bad = self.violations(k)
            if bad:
                raise ScheduleError("infeasible ACGD schedule: " + "; ".join(bad))


@dataclass(frozen=True)
class AdianaSchedule:
    eta: float
    theta1: float
    theta2: float
    alpha: float
    beta: float
    gamma: float
    p: float
    L: float = math.nan
    mu: float = math.nan
    omega: float = math.nan
    n: int = 1

    def rate(self) -> float:
        """Guaranteed per-step decrease ``c``: ``E Psi^{k+1} <= (1 - c) E Psi^k``."""
        return min(self.alpha / 4, self.p / 8, math.sqrt(self.eta * self.mu * self.p) / 4)

    def validate(self) -> None:
        errs = []
        if not 0 < self.p <= 1:
            errs.append(f"p={self.p} not in (0, 1]")
        if not 0 < self.theta1 <= 0.25:
            errs.append(f"theta1={self.theta1} not in (0, 1/4]")
        if self.theta1 + self.theta2 > 1:
            errs.append("theta1 + theta2 > 1")
        if not 0 < self.beta <= 1:
            errs.append(f"beta={self.beta} not in (0, 1]")
        if not self.eta > 0 or not self.gamma > 0:
            errs.append("eta and gamma must be positive")
        if not 0 < self.alpha <= 1:
            errs.append(f"alpha={self.alpha} not in (0, 1]")
        if errs:
            raise ScheduleError("invalid ADIANA schedule: " + "; ".join(errs))


@dataclass(frozen=True)
class StepSchedule:
    """Constant step size (and shift rate for DIANA)."""

    eta: float
    alpha: float = 0.0


def acgd_schedule(L: float, mu: float, omega: float, mode: str) -> AcgdSchedule:
    if mode == "strongly_convex" and not mu > 0:
        raise ScheduleError("strongly convex ACGD needs mu > 0; use the convex schedule (acgd-cvx)")
    if mode not in ("convex", "strongly_convex"):
        raise ScheduleError(f"unknown ACGD mode {mode!r}")
    return AcgdSchedule(mode, L, mu if mode == "strongly_convex" else 0.0, omega, 1.0 / L, 1.0 + omega)


def adiana_p(omega: float, n: int) -> float:
    if omega == 0:
        return 1.0
    return min(1.0, max(1.0, math.sqrt(n / (32 * omega)) - 1) / (2 * (1 + omega)))


def adiana_schedule(L: float, mu: float, omega: float, n: int) -> AdianaSchedule:
    if not mu > 0:
        raise ScheduleError("ADIANA's schedule requires mu > 0")
    p = adiana_p(omega, n)
    eta = 1 / (2 * L)
    if omega > 0:
        eta = min(eta, n / (64 * omega * (2 * p * (omega + 1) + 1) ** 2 * L))
    theta1 = min(0.25, math.sqrt(eta * mu / p))
    gamma = eta / (2 * (theta1 + eta * mu))
    sched = AdianaSchedule(
        eta=eta,
        theta1=theta1,
        theta2=0.5,
        alpha=1 / (omega + 1),
        beta=1 - gamma * mu,
        gamma=gamma,
        p=p,
        L=L,
        mu=mu,
        omega=omega,
        n=n,
    )
    sched.validate()
    return sched


def build_schedule(method: str, L: float, mu: float, omega: float, n: int = 1, overrides: dict | None = None):
    """Theoretical parameters for ``method``; ``overrides`` replaces fields afterwards.

    ADIANA overrides of ``eta``/``theta1``/``p`` recompute the dependent
    ``gamma`` and ``beta`` unless those are overridden too.
    """
    if not L > 0:
        raise ScheduleError("L must be positive")
    if mu < 0 or omega < 0 or n < 1:
        raise ScheduleError("need mu >= 0, omega >= 0, n >= 1")
    overrides = dict(overrides or {})
    if method == "cgd":
        sched = StepSchedule(eta=1 / ((1 + omega) * L))
    elif method == "dcgd":
        sched = StepSchedule(eta=1 / ((1 + omega / n) * L))
    elif method == "diana":
        sched = StepSchedule(eta=1 / ((1 + 2 * omega / n) * L), alpha=1 / (1 + omega))
    elif method in ("acgd-cvx", "acgd-scvx"):
        mode = "convex" if method == "acgd-cvx" else "strongly_convex"
        sched = acgd_schedule(L, mu, omega, mode)
    elif method == "adiana":
        sched = adiana_schedule(L, mu, omega, n)
        if overrides:
            fields = set(overrides)
            sched = _override(sched, method, overrides)
            if fields & {"eta", "theta1", "p"} and "gamma" not in fields:
                sched = replace(sched, gamma=sched.eta / (2 * (sched.theta1 + sched.eta * mu)))
            if "beta" not in fields:
                sched = replace(sched, beta=1 - sched.gamma * mu)
            sched.validate()
        return sched
    else:
        raise ScheduleError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    return _override(sched, method, overrides) if overrides else sched


def _override(sched, method: str, overrides: dict):
    try:
        return replace(sched, **{k: float(v) for k, v in overrides.items()})
    except TypeError:
        known = ", ".join(sched.__dataclass_fields__)
        raise ScheduleError(f"bad override for {method}: {sorted(overrides)} (known: {known})") from None


# -- states ------------------------------------------------------------------


@dataclass(frozen=True)
class PointState:
    """CGD / DCGD iterate."""

    x: np.ndarray
    k: int = 0


@dataclass(frozen=True)
class DianaState:
    x: np.ndarray
    h_nodes: np.ndarray  # (n, d)
    h: np.ndarray
    k: int = 0


@dataclass(frozen=True)
class AcgdState:
    x: np.ndarray  # query point of the previous step; equals x0 initially
    y: np.ndarray
    z: np.ndarray
    k: int = 0

    @classmethod
    def start(cls, x0) -> "AcgdState":
        x0 = np.asarray(x0, dtype=np.float64)
        return cls(x0, x0, x0, 0)


@dataclass(frozen=True)
class AdianaState:
    y: np.ndarray
    z: np.ndarray
    w: np.ndarray
    h_nodes: np.ndarray  # (n, d)
    h: np.ndarray
    k: int = 0
    # local gradients at w; a pure function of w kept to avoid recomputation
    w_grads: np.ndarray | None = field(default=None, compare=False, repr=False)

    @classmethod
    def start(cls, x0, h_nodes) -> "AdianaState":
        x0 = np.asarray(x0, dtype=np.float64)
        h_nodes = np.asarray(h_nodes, dtype=np.float64)
        return cls(x0, x0, x0, h_nodes, h_nodes.mean(axis=0), 0)


@dataclass(frozen=True)
class LyapunovSnapshot:
    Z: float
    Y: float
    W: float
    H: float
    Psi: float


@dataclass
class StepOutcome:
    state: object
    bits_sent: float  # summed over nodes
    bits_per_node: float
    query: np.ndarray  # point whose gradients were used this round
    grad: np.ndarray  # grad f at ``query``
    diagnostics: LyapunovSnapshot | None = None


# -- single machine ----------------------------------------------------------


def _compress_one(c: Compressor, v: np.ndarray, seed: int, k: int, channel: int = CH_GRADIENT) -> np.ndarray:
    return compress_rows(c, v[None, :], seed, 0, k, channel)[0]


def cgd_step(state: PointState, obj: Objective, c: Compressor, eta: float, seed: int) -> StepOutcome:
    x = state.x
    g = obj.grad_full(x)
    x_new = x - eta * _compress_one(c, g, seed, state.k)
    cost = bit_cost(c)
    return StepOutcome(PointState(x_new, state.k + 1), cost, cost, x, g)


def acgd_query(state: AcgdState, sched: AcgdSchedule) -> np.ndarray:
    th = sched.theta(state.k)
    return th * state.y + (1 - th) * state.z


def acgd_step(state: AcgdState, obj: Objective, c: Compressor, sched: AcgdSchedule, seed: int) -> StepOutcome:
    k, p, eta = state.k, sched.p, sched.eta
    th, be, ga = sched.theta(k), sched.beta(k), sched.gamma(k)
    y, z = state.y, state.z
    x = th * y + (1 - th) * z
    grad = obj.grad_full(x)
    g = _compress_one(c, grad, seed, k)
    y_new = x - (eta / p) * g
    q = 1 - 1 / p
    z_new = (1 / ga) * y_new + (1 / p - 1 / ga) * y + (q * (1 - be)) * z + (q * be) * x
    cost = bit_cost(c)
    return StepOutcome(AcgdState(x, y_new, z_new, k + 1), cost, cost, x, grad)


# -- distributed -------------------------------------------------------------


def _nodes(n: int) -> np.ndarray:
    return np.arange(n)


def dcgd_step(state: PointState, obj: Objective, c: Compressor, eta: float, seed: int) -> StepOutcome:
    x = state.x
    grads = obj.node_grads(x)
    msgs = compress_rows(c, grads, seed, _nodes(obj.n), state.k, CH_GRADIENT)
    g = msgs.mean(axis=0)
    x_new = obj.prox(eta, x - eta * g)
    cost = bit_cost(c)
    return StepOutcome(PointState(x_new, state.k + 1), obj.n * cost, cost, x, grads.mean(axis=0))


def diana_step(state: DianaState, obj: Objective, c: Compressor, eta: float, alpha: float, seed: int) -> StepOutcome:
    x, H, h = state.x, state.h_nodes, state.h
    grads = obj.node_grads(x)
    full = grads.mean(axis=0)
    msgs = compress_rows(c, grads - H, seed, _nodes(obj.n), state.k, CH_GRADIENT)
    # exact messages collapse the shifted estimator to the plain mean
    g = full if c.lossless else msgs.mean(axis=0) + h
    x_new = obj.prox(eta, x - eta * g)
    H_new = H + alpha * msgs
    h_new = h + alpha * msgs.mean(axis=0)
    cost = bit_cost(c)
    return StepOutcome(DianaState(x_new, H_new, h_new, state.k + 1), obj.n * cost, cost, x, full)


def adiana_query(state: AdianaState, sched: AdianaSchedule) -> np.ndarray:
    t1, t2 = sched.theta1, sched.theta2
    return t1 * state.z + t2 * state.w + (1 - t1 - t2) * state.y


def adiana_step(
    state: AdianaState,
    obj: Objective,
    c: Compressor,
    sched: AdianaSchedule,
    seed: int,
    count_shift_message: bool = True,
) -> StepOutcome:
    k, n = state.k, obj.n
    y, z, w, H, h = state.y, state.z, state.w, state.h_nodes, state.h
    x = adiana_query(state, sched)
    gx = obj.node_grads(x)
    gw = state.w_grads if state.w_grads is not None else obj.node_grads(w)
    full = gx.mean(axis=0)

    nodes = _nodes(n)
    msgs = compress_rows(c, gx - H, seed, nodes, k, CH_GRADIENT)
    shift_msgs = compress_rows(c, gw - H, seed, nodes, k, CH_SHIFT)
    g = full if c.lossless else msgs.mean(axis=0) + h
    H_new = H + sched.alpha * shift_msgs
    h_new = h + sched.alpha * shift_msgs.mean(axis=0)

    eta = sched.eta
    y_new = obj.prox(eta, x - eta * g)
    z_new = sched.beta * z + (1 - sched.beta) * x + (sched.gamma / eta) * (y_new - x)
    refresh = RngStream(seed, SERVER, k, CH_ANCHOR).uniform() < sched.p
    w_new, gw_new = (y, None) if refresh else (w, gw)

    per_node = bit_cost(c) * (2 if count_shift_message else 1)
    new = AdianaState(y_new, z_new, w_new, H_new, h_new, k + 1, gw_new)
    return StepOutcome(new, n * per_node, per_node, x, full)


# -- method driver -----------------------------------------------------------


class Method:
    """Uniform ``init``/``step`` interface over the five methods."""

    def __init__(
        self,
        name: str,
        obj: Objective,
        compressor: Compressor,
        seed: int = 0,
        overrides: dict | None = None,
        count_shift_message: bool = True,
        h0: np.ndarray | None = None,
    ):
        if name not in METHODS:
            raise ScheduleError(f"unknown method {name!r}; expected one of {', '.join(METHODS)}")
        if compressor.d != obj.d:
            raise ScheduleError(f"compressor dimension {compressor.d} != objective dimension {obj.d}")
        if name in ("cgd", "acgd-cvx", "acgd-scvx") and obj.regularizer.kind != "zero":
            raise ScheduleError(f"{name} handles smooth problems only (psi must be zero)")
        self.name = name
        self.obj = obj
        self.compressor = compressor
        self.seed = seed
        self.count_shift_message = count_shift_message
        self.omega = omega_of(compressor)
        comm_n = 1 if name in ("cgd", "acgd-cvx", "acgd-scvx") else obj.n
        self.schedule = build_schedule(name, obj.L, obj.mu, self.omega, comm_n, overrides)
        self._h0 = h0

    def init(self, x0):
        x0 = np.asarray(x0, dtype=np.float64)
        n, d = self.obj.n, self.obj.d
        h0 = np.zeros((n, d)) if self._h0 is None else np.asarray(self._h0, dtype=np.float64)
        if self.name in ("cgd", "dcgd"):
            return PointState(x0)
        if self.name == "diana":
            return DianaState(x0, h0, h0.mean(axis=0))
        if self.name == "adiana":
            return AdianaState.start(x0, h0)
        return AcgdState.start(x0)

    def check(self, k_max: int) -> None:
        if isinstance(self.schedule, AcgdSchedule):
            self.schedule.check(k_max)

    def query(self, state) -> np.ndarray:
        if isinstance(state, AcgdState):
            return acgd_query(state, self.schedule)
        if isinstance(state, AdianaState):
            return adiana_query(state, self.schedule)
        return state.x

    def step(self, state) -> StepOutcome:
        s, obj, c, seed = self.schedule, self.obj, self.compressor, self.seed
        if self.name == "cgd":
            return cgd_step(state, obj, c, s.eta, seed)
        if self.name == "dcgd":
            return dcgd_step(state, obj, c, s.eta, seed)
        if self.name == "diana":
            return diana_step(state, obj, c, s.eta, s.alpha, seed)
        if self.name == "adiana":
            return adiana_step(state, obj, c, s, seed, self.count_shift_message)
        return acgd_step(state, obj, c, s, seed)

    def bits_per_node(self) -> float:
        """Bits one node sends per round."""
        mult = 2 if (self.name == "adiana" and self.count_shift_message) else 1
        return mult * bit_cost(self.compressor)

    def nodes_communicating(self) -> int:
        return 1 if self.name in ("cgd", "acgd-cvx", "acgd-scvx") else self.obj.n
