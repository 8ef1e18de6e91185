"""Finite-sum objectives ``P(x) = (1/n) sum_i f_i(x) + psi(x)``.

Node losses are either ridge-regularized logistic regression on a block of
sparse samples, or a quadratic given by a matrix-free operator. All nodes of a
logistic objective are stacked into one CSR matrix so that the ``n`` local
gradients cost two sparse products per call.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .numerics import as_vector

log = logging.getLogger(__name__)

# above this dimension L comes from power iteration instead of a dense eigensolve
DENSE_EIG_MAX_D = 2048


def _log1pexp(t: np.ndarray) -> np.ndarray:
    """Stable log(1 + exp(t))."""
    return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))


def _sigmoid_neg(t: np.ndarray) -> np.ndarray:
    """1 / (1 + exp(t)); exp overflowing to inf correctly yields 0."""
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(t))


# -- node losses -------------------------------------------------------------


@dataclass(frozen=True)
class LogisticLoss:
    """``(1/m) sum_j log(1 + exp(-b_j a_j^T x)) + (lam/2)||x||^2``."""

    A: sp.csr_matrix
    b: np.ndarray
    lam: float = 0.0

    def __post_init__(self):
        if self.A.shape[0] != self.b.shape[0]:
            raise ValueError("sample count mismatch between rows and labels")
        if self.A.shape[0] == 0:
            raise ValueError("a logistic node needs at least one sample")
        if not np.all(np.abs(self.b) == 1.0):
            raise ValueError("logistic labels must be exactly +1 or -1")
        if self.lam < 0:
            raise ValueError("ridge parameter must be non-negative")

    @property
    def d(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def value(self, x: np.ndarray) -> float:
        t = self.b * (self.A @ x)
        return float(np.mean(_log1pexp(-t)) + 0.5 * self.lam * np.dot(x, x))

    def grad(self, x: np.ndarray) -> np.ndarray:
        t = self.b * (self.A @ x)
        r = -self.b * _sigmoid_neg(t) / self.m
        return self.A.T @ r + self.lam * x

    def smoothness(self, tol: float = 1e-6, max_iter: int = 500) -> tuple[float, bool]:
        """``lam + lambda_max(A^T A) / (4m)``.

        Exact via a dense ``d x d`` eigensolve up to ``DENSE_EIG_MAX_D``; power
        iteration beyond that, falling back to the Frobenius bound when it does
        not settle. The second return value says whether the estimate is tight.
        """
        if self.d <= DENSE_EIG_MAX_D:
            gram = (self.A.T @ self.A).toarray()
            return self.lam + float(np.linalg.eigvalsh(gram)[-1]) / (4.0 * self.m), True
        lmax, ok = _power_iteration(self.A, tol, max_iter)
        if not ok:
            lmax = sp.linalg.norm(self.A, "fro") ** 2
        return self.lam + float(lmax) / (4.0 * self.m), ok


@dataclass(frozen=True)
class QuadraticLoss:
    """``0.5 x^T A x - b^T x`` with ``A`` given as a matrix-free apply.

    ``L`` and ``mu`` are the extreme eigenvalues of ``A`` (``mu`` may be 0).
    """

    apply: Callable[[np.ndarray], np.ndarray]
    b: np.ndarray
    L: float
    mu: float = 0.0

    @classmethod
    def from_matrix(cls, A, b=None) -> "QuadraticLoss":
        A = np.asarray(A, dtype=np.float64)
        A = 0.5 * (A + A.T)
        evals = np.linalg.eigvalsh(A)
        b = np.zeros(A.shape[0]) if b is None else as_vector(b, A.shape[0])
        tol = 1e-12 * max(abs(evals[-1]), 1.0)
        if evals[0] < -tol:
            raise ValueError(f"quadratic is not convex: smallest eigenvalue {evals[0]:.3e}")
        # eigenvalues within rounding of zero mark flat directions
        mu = float(evals[0]) if evals[0] > tol else 0.0
        return cls(lambda x, A=A: A @ x, b, float(evals[-1]), mu)

    @property
    def d(self) -> int:
        return self.b.shape[0]

    def value(self, x: np.ndarray) -> float:
        return float(0.5 * np.dot(x, self.apply(x)) - np.dot(self.b, x))

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self.apply(x) - self.b

    def smoothness(self, tol: float = 1e-6, max_iter: int = 500) -> tuple[float, bool]:
        return self.L, True


def _power_iteration(A: sp.spmatrix, tol: float, max_iter: int) -> tuple[float, bool]:
    d = A.shape[1]
    # deterministic start with no zero components
    v = 1.0 + np.arange(d) / max(d, 1)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = A.T @ (A @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, True
        new = float(np.dot(v, w))
        v = w / nw
        if abs(new - lam) <= tol * max(new, 1e-300):
            # ||M v|| >= v^T M v for unit v; both approach lambda_max from below
            return nw, True
        lam = new
    return lam, False


# -- regularizers ------------------------------------------------------------


@dataclass(frozen=True)
class Regularizer:
    kind: str = "zero"  # zero | ridge | l1
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in ("zero", "ridge", "l1"):
            raise ValueError(f"unknown regularizer {self.kind!r}")
        if self.kind != "zero" and not self.lam > 0:
            raise ValueError(f"{self.kind} regularizer needs lam > 0")

    def value(self, x: np.ndarray) -> float:
        if self.kind == "ridge":
            return 0.5 * self.lam * float(np.dot(x, x))
        if self.kind == "l1":
            return self.lam * float(np.sum(np.abs(x)))
        return 0.0


def prox(reg: Regularizer, eta: float, v) -> np.ndarray:
    """``argmin_u 0.5||u - v||^2 + eta * psi(u)``."""
    if not eta > 0:
        raise ValueError("prox step must be positive")
    if reg.kind == "zero":
        return v
    if reg.kind == "ridge":
        return v / (1.0 + eta * reg.lam)
    t = eta * reg.lam
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


# -- objective ---------------------------------------------------------------


@dataclass
class Objective:
    node_losses: Sequence
    regularizer: Regularizer = field(default_factory=Regularizer)
    L: float | None = None
    mu: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.node_losses) < 1:
            raise ValueError("an objective needs at least one node")
        dims = {loss.d for loss in self.node_losses}
        if len(dims) != 1:
            raise ValueError(f"node losses disagree on dimension: {sorted(dims)}")
        self._stack = _LogisticStack.build(self.node_losses)
        if self.L is None or self.mu is None:
            L, mu = estimate_constants(self)
            self.L = L if self.L is None else self.L
            self.mu = mu if self.mu is None else self.mu
        if self.mu > 0 and self.mu > self.L * (1 + 1e-12):
            raise ValueError(f"mu={self.mu} exceeds L={self.L}")

    @property
    def n(self) -> int:
        return len(self.node_losses)

    @property
    def d(self) -> int:
        return self.node_losses[0].d

    def grad_node(self, i: int, x) -> np.ndarray:
        if not 0 <= i < self.n:
            raise IndexError(f"node {i} out of range for n={self.n}")
        return self.node_losses[i].grad(as_vector(x, self.d))

    def node_grads(self, x: np.ndarray) -> np.ndarray:
        """All local gradients as an ``(n, d)`` array."""
        if self._stack is not None:
            return self._stack.grads(x)
        return np.stack([loss.grad(x) for loss in self.node_losses])

    def grad_full(self, x) -> np.ndarray:
        x = as_vector(x, self.d)
        if self.n == 1:
            return self.node_losses[0].grad(x)
        return self.node_grads(x).mean(axis=0)

    def smooth_value(self, x) -> float:
        x = as_vector(x, self.d)
        if self._stack is not None:
            return self._stack.value(x)
        return float(np.mean([loss.value(x) for loss in self.node_losses]))

    def value(self, x) -> float:
        """``P(x) = f(x) + psi(x)``."""
        x = as_vector(x, self.d)
        return self.smooth_value(x) + self.regularizer.value(x)

    def prox(self, eta: float, v) -> np.ndarray:
        return prox(self.regularizer, eta, v)

    def optimality_residual(self, x, eta: float | None = None) -> float:
        """Norm of the prox-gradient mapping; equals ``||grad f(x)||`` when psi = 0."""
        x = as_vector(x, self.d)
        g = self.grad_full(x)
        if self.regularizer.kind == "zero":
            return float(np.linalg.norm(g))
        eta = 1.0 / self.L if eta is None else eta
        return float(np.linalg.norm(x - self.prox(eta, x - eta * g)) / eta)


def estimate_constants(obj: Objective) -> tuple[float, float]:
    """Uniform smoothness bound over nodes and strong convexity of ``f``.

    Logistic nodes: ``L = lam + max_i lambda_max(A_i^T A_i) / (4 m_i)`` and
    ``mu = lam``. Quadratic nodes: from the supplied spectrum bounds, with
    ``mu`` the smallest node ``mu`` (a lower bound for the average).
    """
    Ls, mus, fallback = [], [], False
    for loss in obj.node_losses:
        L, ok = loss.smoothness()
        fallback |= not ok
        Ls.append(L)
        mus.append(loss.lam if isinstance(loss, LogisticLoss) else loss.mu)
    if fallback:
        log.warning("power iteration did not converge; using Frobenius bound for L")
        obj.meta["L_fallback"] = True
    return float(max(Ls)), float(min(mus))


class _LogisticStack:
    """All logistic nodes in one CSR block; rows grouped by node."""

    def __init__(self, losses):
        self.n = len(losses)
        self.A = sp.vstack([l.A for l in losses], format="csr")
        self.b = np.concatenate([l.b for l in losses])
        self.lam = losses[0].lam
        counts = np.array([l.m for l in losses])
        self.counts = counts
        self.node_of_row = np.repeat(np.arange(self.n), counts)
        self.weight = 1.0 / counts[self.node_of_row]
        self.starts = np.concatenate([[0], np.cumsum(counts)])
        AT = self.A.T.tocsr()
        # block-diagonal of the per-node A_i^T: one product yields all n gradients
        self.blocks = sp.block_diag(
            [AT[:, self.starts[i] : self.starts[i + 1]] for i in range(self.n)], format="csr"
        )

    @classmethod
    def build(cls, losses):
        if not all(isinstance(l, LogisticLoss) for l in losses):
            return None
        if len({l.lam for l in losses}) != 1:
            return None
        return cls(losses)

    def grads(self, x: np.ndarray) -> np.ndarray:
        t = self.b * (self.A @ x)
        r = -self.b * _sigmoid_neg(t) * self.weight
        out = (self.blocks @ r).reshape(self.n, x.shape[0])
        if self.lam:
            out += self.lam * x
        return out

    def value(self, x: np.ndarray) -> float:
        t = self.b * (self.A @ x)
        per_node = np.bincount(self.node_of_row, weights=_log1pexp(-t), minlength=self.n) / self.counts
        return float(per_node.mean() + 0.5 * self.lam * np.dot(x, x))


# -- constructors ------------------------------------------------------------


def logistic_objective(A, b, parts, lam: float = 0.0, regularizer: Regularizer | None = None) -> Objective:
    """Build a logistic objective from a sample matrix and per-node row indices."""
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=np.float64)
    losses = [LogisticLoss(A[idx], b[idx], lam) for idx in parts]
    return Objective(losses, regularizer or Regularizer())
