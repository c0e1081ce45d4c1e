"""Local objectives, consensus regularizers, synthetic data and reference optima.

A local objective exposes ``value(x)``, ``gradient(x)`` and
``solve(zhat, u, rho, x0)``; the latter returns the minimizer (exact or
inexact) of ``f(x) + rho/2 * ||x - zhat + u||^2``. A regularizer exposes
``value(z)`` and ``consensus(mean, rho, n)``, the minimizer of
``h(z) + rho*n/2 * ||z - mean||^2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .numkit import CholeskyFactor, RngStream, as_vector, sample_gaussian, soft_threshold


class LassoLocal:
    """``f(x) = ||A x - b||^2`` (no 1/2 factor) with an exact primal solve."""

    def __init__(self, A, b):
        self.A = np.ascontiguousarray(A, dtype=np.float64)
        self.b = as_vector(b, self.A.shape[0])
        self._gram2 = 2.0 * (self.A.T @ self.A)
        self._atb2 = 2.0 * (self.A.T @ self.b)
        self._rho = None
        self._factor = None

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def factor(self, rho: float) -> CholeskyFactor:
        if rho != self._rho:
            G = self._gram2 + rho * np.eye(self.dim)
            self._factor = CholeskyFactor(G)
            self._rho = rho
        return self._factor

    def value(self, x) -> float:
        r = self.A @ x - self.b
        return float(r @ r)

    def gradient(self, x) -> np.ndarray:
        return 2.0 * (self.A.T @ (self.A @ x - self.b))

    def subproblem_value(self, x, zhat, u, rho: float) -> float:
        d = x - zhat + u
        return self.value(x) + 0.5 * rho * float(d @ d)

    def solve(self, zhat, u, rho: float, x0=None) -> np.ndarray:
        return lasso_primal_solve(self, zhat, u, rho)


def lasso_primal_solve(p: LassoLocal, zhat, u, rho: float) -> np.ndarray:
    """Exact minimizer via ``(2A^T A + rho I) x = 2A^T b + rho (zhat - u)``."""
    return p.factor(rho).solve(p._atb2 + rho * (zhat - u))


class SmoothLocal:
    """Ridge-regularized logistic loss, solved inexactly by gradient descent.

    ``f(x) = sum_j log(1 + exp(-y_j a_j^T x)) + mu/2 ||x||^2``. Each primal
    update runs ``steps`` gradient steps of size ``eta`` from a warm start.
    """

    def __init__(self, A, y, mu: float = 0.25, steps: int = 10, eta: float = 0.05):
        if steps < 1:
            raise ValueError("steps must be >= 1")
        if eta <= 0:
            raise ValueError("eta must be positive")
        self.A = np.ascontiguousarray(A, dtype=np.float64)
        self.y = as_vector(y, self.A.shape[0])
        self.mu = mu
        self.steps = steps
        self.eta = eta
        self.halvings = 0

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def value(self, x) -> float:
        margins = self.y * (self.A @ x)
        return float(np.sum(np.logaddexp(0.0, -margins)) + 0.5 * self.mu * (x @ x))

    def gradient(self, x) -> np.ndarray:
        margins = self.y * (self.A @ x)
        # d/dm log(1 + e^-m) = -sigmoid(-m)
        weights = -self.y * _sigmoid(-margins)
        return self.A.T @ weights + self.mu * x

    def hessian(self, x) -> np.ndarray:
        s = _sigmoid(self.y * (self.A @ x))
        return (self.A.T * (s * (1.0 - s))) @ self.A + self.mu * np.eye(self.dim)

    def subproblem_value(self, x, zhat, u, rho: float) -> float:
        d = x - zhat + u
        return self.value(x) + 0.5 * rho * float(d @ d)

    def subproblem_gradient(self, x, zhat, u, rho: float) -> np.ndarray:
        return self.gradient(x) + rho * (x - zhat + u)

    def solve(self, zhat, u, rho: float, x0=None) -> np.ndarray:
        if x0 is None:
            x0 = np.asarray(zhat) - np.asarray(u)
        return inexact_primal_solve(self, zhat, u, rho, x0)


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def inexact_primal_solve(p: SmoothLocal, zhat, u, rho: float, x0) -> np.ndarray:
    """Run ``p.steps`` gradient steps on the primal subproblem from ``x0``.

    Three consecutive increases of the subproblem objective halve ``p.eta``
    (counted in ``p.halvings``). The returned point never has a larger
    objective than ``x0``.
    """
    x0 = as_vector(x0)
    x = x0.copy()
    start = prev = p.subproblem_value(x, zhat, u, rho)
    best_x, best = x, start
    rises = 0
    for _ in range(p.steps):
        x = x - p.eta * p.subproblem_gradient(x, zhat, u, rho)
        cur = p.subproblem_value(x, zhat, u, rho)
        rises = rises + 1 if cur > prev else 0
        if rises == 3:
            p.eta *= 0.5
            p.halvings += 1
            rises = 0
        if cur < best:
            best_x, best = x, cur
        prev = cur
    if prev > start:
        return best_x
    return x


@dataclass(frozen=True)
class L1Regularizer:
    theta: float

    def __post_init__(self):
        if self.theta < 0:
            raise ValueError("theta must be non-negative")

    def value(self, z) -> float:
        return self.theta * float(np.sum(np.abs(z)))

    def consensus(self, mean, rho: float, n: int) -> np.ndarray:
        return soft_threshold(mean, self.theta / (rho * n))


@dataclass(frozen=True)
class ZeroRegularizer:
    def value(self, z) -> float:
        return 0.0

    def consensus(self, mean, rho: float, n: int) -> np.ndarray:
        return np.array(mean, dtype=np.float64)


def consensus_objective(locals_, regularizer, z) -> float:
    """``sum_i f_i(z) + h(z)`` at a single point."""
    return sum(p.value(z) for p in locals_) + regularizer.value(z)


@dataclass(frozen=True)
class SyntheticLassoSpec:
    M: int = 200
    N: int = 16
    H: int = 100
    sparsity: float = 0.2
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("M", "N", "H"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.sparsity <= 1.0:
            raise ValueError("sparsity must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @property
    def nonzeros(self) -> int:
        return math.floor(self.sparsity * self.M)


def generate_lasso(spec: SyntheticLassoSpec) -> tuple[list[LassoLocal], np.ndarray]:
    """Per-node ``(A_i, b_i)`` with ``b_i = A_i z0 + n_i``; returns ``(locals, z0)``."""
    rng = RngStream(spec.seed, "lasso-data")
    z0 = np.zeros(spec.M)
    support = np.sort(rng.choice(spec.M, spec.nonzeros))
    z0[support] = sample_gaussian(rng, spec.nonzeros)
    locals_ = []
    for _ in range(spec.N):
        A = sample_gaussian(rng, (spec.H, spec.M))
        noise = sample_gaussian(rng, spec.H, 0.0, spec.noise_std)
        locals_.append(LassoLocal(A, A @ z0 + noise))
    return locals_, z0


@dataclass(frozen=True)
class SyntheticLogisticSpec:
    M: int = 10
    N: int = 4
    H: int = 50
    mu: float = 1.0
    steps: int = 10
    eta: float = 0.05
    seed: int = 0


def generate_logistic(spec: SyntheticLogisticSpec) -> list[SmoothLocal]:
    """Noisy linearly-labelled Gaussian features; the ridge weight ``mu`` is split evenly across nodes."""
    rng = RngStream(spec.seed, "logistic-data")
    w = sample_gaussian(rng, spec.M)
    locals_ = []
    for _ in range(spec.N):
        A = sample_gaussian(rng, (spec.H, spec.M))
        score = A @ w + sample_gaussian(rng, spec.H, 0.0, 1.0)
        y = np.where(score >= 0, 1.0, -1.0)
        locals_.append(SmoothLocal(A, y, mu=spec.mu / spec.N, steps=spec.steps, eta=spec.eta))
    return locals_


class ReferenceSolverError(RuntimeError):
    def __init__(self, message: str, best_value: float, best_x: np.ndarray):
        super().__init__(message)
        self.best_value = best_value
        self.best_x = best_x
        self.converged = False


@dataclass
class ReferenceResult:
    F_star: float
    x_star: np.ndarray = field(repr=False)
    iterations: int
    polished: bool


def lasso_objective(locals_, theta: float, x) -> float:
    return consensus_objective(locals_, L1Regularizer(theta), x)


def reference_optimum(locals_, theta: float, *, rtol: float = 1e-14, patience: int = 50,
                      max_iter: int = 1_000_000) -> ReferenceResult:
    """Centralized LASSO optimum by FISTA with function-value restarts.

    Stops once the relative objective change stays at or below ``rtol`` for
    ``patience`` consecutive iterations, then re-solves the stationarity
    system on the detected support and keeps that point when it is
    sign-consistent and no worse.
    """
    A = np.vstack([p.A for p in locals_])
    b = np.concatenate([p.b for p in locals_])
    gram2 = 2.0 * (A.T @ A)
    atb2 = 2.0 * (A.T @ b)
    step = 1.0 / np.linalg.norm(gram2, 2)
    obj = lambda v: lasso_objective(locals_, theta, v)

    x = np.zeros(A.shape[1])
    y = x.copy()
    t = 1.0
    f_old = obj(x)
    calm = 0
    for it in range(1, max_iter + 1):
        x_new = soft_threshold(y - step * (gram2 @ y - atb2), step * theta)
        f_new = obj(x_new)
        calm = calm + 1 if abs(f_old - f_new) <= rtol * max(abs(f_old), 1e-300) else 0
        if f_new > f_old:
            # restart momentum from the last accepted point
            y, t = x.copy(), 1.0
        else:
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            y = x_new + ((t - 1.0) / t_new) * (x_new - x)
            t = t_new
            x, f_old = x_new, f_new
        if calm >= patience:
            break
    else:
        raise ReferenceSolverError(f"reference solver hit the {max_iter}-iteration cap", f_old, x)

    cand = _polish_support(gram2, atb2, theta, x)
    polished = False
    if cand is not None:
        f_cand = obj(cand)
        # the exact-support point may evaluate a few ulps above the FISTA iterate
        if f_cand <= f_old + 64 * np.finfo(float).eps * abs(f_old):
            x, f_old, polished = cand, f_cand, True
    return ReferenceResult(F_star=f_old, x_star=x, iterations=it, polished=polished)


def _polish_support(gram2, atb2, theta, x):
    """Active-set refinement: solve stationarity on the support, fixing signs.

    Coordinates whose sign flips are dropped and zero coordinates violating
    ``|grad| <= theta`` are added, until the point is sign-consistent and
    satisfies the optimality conditions (or the sweep budget runs out).
    """
    sign = np.sign(x)
    for _ in range(2 * x.shape[0]):
        support = np.flatnonzero(sign)
        cand = np.zeros_like(x)
        if support.size:
            cand[support] = np.linalg.solve(gram2[np.ix_(support, support)], atb2[support] - theta * sign[support])
        flipped = support[np.sign(cand[support]) != sign[support]]
        if flipped.size:
            sign[flipped] = 0.0
            continue
        grad = gram2 @ cand - atb2
        slack = np.where(sign == 0, np.abs(grad) - theta, -np.inf)
        worst = int(np.argmax(slack))
        if slack[worst] > 0:
            sign[worst] = -np.sign(grad[worst])
            continue
        return cand
    return None


def lasso_certificate(locals_, theta: float, x) -> float:
    """Largest violation of the LASSO subgradient optimality conditions at ``x``."""
    grad = sum(p.gradient(x) for p in locals_)
    nz = x != 0
    viol_nz = np.abs(grad[nz] + theta * np.sign(x[nz]))
    viol_z = np.maximum(np.abs(grad[~nz]) - theta, 0.0)
    return float(max(viol_nz.max(initial=0.0), viol_z.max(initial=0.0)))


def smooth_reference_optimum(locals_) -> ReferenceResult:
    """Centralized optimum of ``sum_i f_i`` for smooth plugins (trust-region Newton)."""
    M = locals_[0].dim
    res = minimize(
        lambda v: sum(p.value(v) for p in locals_),
        np.zeros(M),
        jac=lambda v: sum(p.gradient(v) for p in locals_),
        hess=lambda v: sum(p.hessian(v) for p in locals_),
        method="trust-exact",
        options={"gtol": 1e-12},
    )
    return ReferenceResult(F_star=float(res.fun), x_star=res.x, iterations=int(res.nit), polished=False)
