"""Dense vector kernels shared by every other module.

Vectors are plain 1-D ``float64`` numpy arrays and matrices are 2-D ``float64``
arrays in C (row-major) order. Random streams wrap ``numpy.random.Generator``
on a PCG64 bit generator; Gaussian draws use numpy's ziggurat transform
(``Generator.standard_normal``), which is fixed for a given numpy release.
"""
from __future__ import annotations

import hashlib

import numpy as np
from scipy.linalg import solve_triangular

_MASK64 = (1 << 64) - 1


class NotPositiveDefiniteError(ValueError):
    """Raised when a Cholesky pivot is non-positive."""

    def __init__(self, pivot: int, value: float):
        super().__init__(f"matrix is not positive definite: pivot {pivot} has value {value!r}")
        self.pivot = pivot
        self.value = value


def as_vector(v, length: int | None = None) -> np.ndarray:
    out = np.ascontiguousarray(v, dtype=np.float64)
    if out.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {out.shape}")
    if length is not None and out.shape[0] != length:
        raise ValueError(f"expected length {length}, got {out.shape[0]}")
    return out


def max_norm(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        return 0.0
    return float(np.max(np.abs(v)))


def soft_threshold(v, kappa: float) -> np.ndarray:
    """Elementwise ``sign(v) * max(|v| - kappa, 0)``, the prox of ``kappa*|.|_1``."""
    if kappa < 0:
        raise ValueError(f"threshold must be non-negative, got {kappa}")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - kappa, 0.0)


class CholeskyFactor:
    """Lower-triangular factor ``L`` with ``G = L L^T`` for an SPD matrix ``G``.

    The factorization is computed once; :meth:`solve` then costs two
    triangular solves.
    """

    def __init__(self, G):
        G = np.asarray(G, dtype=np.float64)
        if G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {G.shape}")
        n = G.shape[0]
        L = np.zeros_like(G)
        for j in range(n):
            row = L[j, :j]
            pivot = G[j, j] - row @ row
            if not pivot > 0.0:
                raise NotPositiveDefiniteError(j, float(pivot))
            L[j, j] = np.sqrt(pivot)
            if j + 1 < n:
                L[j + 1:, j] = (G[j + 1:, j] - L[j + 1:, :j] @ row) / L[j, j]
        self.L = L
        self.n = n

    def solve(self, rhs) -> np.ndarray:
        rhs = as_vector(rhs, self.n)
        y = solve_triangular(self.L, rhs, lower=True, check_finite=False)
        return solve_triangular(self.L.T, y, lower=False, check_finite=False)


def spd_solve(G, rhs) -> np.ndarray:
    """Solve ``G x = rhs`` for symmetric positive definite ``G``."""
    return CholeskyFactor(G).solve(rhs)


def _label_key(label: str) -> int:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(master: int, *parts) -> int:
    """Deterministic 64-bit seed from a master seed and extra identifying parts."""
    text = "/".join([str(int(master) & _MASK64), *map(str, parts)])
    return _label_key(text)


class RngStream:
    """A named, seeded random stream.

    Equal ``(seed, label)`` pairs produce identical draws on every run.
    A stream is single-owner; never draw from one concurrently.
    """

    def __init__(self, seed: int, label: str = ""):
        self.seed = int(seed) & _MASK64
        self.label = label
        ss = np.random.SeedSequence([self.seed, _label_key(label)])
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, label: str) -> "RngStream":
        sub = f"{self.label}/{label}" if self.label else label
        return RngStream(self.seed, sub)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` draws from U[0, 1)."""
        return self._gen.random(n)

    def standard_normal(self, n) -> np.ndarray:
        return self._gen.standard_normal(n)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, uniformly without replacement."""
        return self._gen.choice(n, size=k, replace=False)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, label={self.label!r})"


def sample_gaussian(rng: RngStream, n, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Independent draws from Normal(mean, std**2); ``n`` may be a shape tuple."""
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    z = rng.standard_normal(n)
    if std == 0:
        return np.full(z.shape, float(mean))
    return mean + std * z
