"""Scalar and operator-valued kernels with Gram-matrix helpers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

VARIANTS = ("KroneckerDelta", "PureStateOverlap", "RPowerOverlap", "SquaredCosine", "Rbf", "Matern")
QUANTUM_VARIANTS = ("KroneckerDelta", "PureStateOverlap", "RPowerOverlap", "SquaredCosine")
PSD_TOL = 1e-8


def amplitude_state(x) -> np.ndarray:
    """Normalized amplitude vector of ``x`` padded to a power-of-two length."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size == 0:
        return np.ones(1)
    nrm = np.linalg.norm(x)
    if nrm == 0:
        raise ContractError("cannot amplitude-encode the zero vector")
    dim = 1 << int(np.ceil(np.log2(x.size))) if x.size > 1 else 1
    out = np.zeros(dim)
    out[: x.size] = x / nrm
    return out


@dataclass(frozen=True)
class ScalarKernel:
    variant: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown kernel variant {self.variant!r}; choose from {VARIANTS}")
        p = dict(self.params)
        if self.variant == "RPowerOverlap":
            r = p.setdefault("r", 1)
            if int(r) != r or r < 1:
                raise ConfigError("RPowerOverlap needs a positive integer r")
        elif self.variant == "SquaredCosine":
            if p.setdefault("bandwidth", 1.0) <= 0:
                raise ConfigError("bandwidth must be positive")
        elif self.variant in ("Rbf", "Matern"):
            if p.setdefault("lengthscale", 1.0) <= 0:
                raise ConfigError("lengthscale must be positive")
            if self.variant == "Matern" and p.setdefault("nu", 1.5) not in (0.5, 1.5, 2.5):
                raise ConfigError("Matern nu must be one of 0.5, 1.5, 2.5")
        object.__setattr__(self, "params", p)

    @property
    def is_quantum(self) -> bool:
        return self.variant in QUANTUM_VARIANTS

    @property
    def kappa_max(self) -> float:
        return 1.0

    def __call__(self, x, y) -> float:
        return eval_kernel(self, x, y)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalarKernel":
        return cls(d["variant"], dict(d.get("params", {})))


def _pairwise(kernel: ScalarKernel, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    v = kernel.variant
    p = kernel.params
    if X.shape[1] == 0:
        return np.ones((X.shape[0], Y.shape[0]))
    if v == "KroneckerDelta":
        return np.all(X[:, None, :] == Y[None, :, :], axis=2).astype(float)
    if v in ("PureStateOverlap", "RPowerOverlap"):
        A = np.stack([amplitude_state(x) for x in X])
        B = np.stack([amplitude_state(y) for y in Y])
        ov = np.clip((A @ B.T) ** 2, 0.0, 1.0)
        return ov ** int(p["r"]) if v == "RPowerOverlap" else ov
    diff = X[:, None, :] - Y[None, :, :]
    if v == "SquaredCosine":
        return np.prod(np.cos(p["bandwidth"] * diff / 2.0) ** 2, axis=2)
    dist = np.sqrt(np.sum(diff**2, axis=2)) / p["lengthscale"]
    if v == "Rbf":
        return np.exp(-0.5 * dist**2)
    nu = p["nu"]
    if nu == 0.5:
        return np.exp(-dist)
    if nu == 1.5:
        s = np.sqrt(3.0) * dist
        return (1.0 + s) * np.exp(-s)
    s = np.sqrt(5.0) * dist
    return (1.0 + s + s**2 / 3.0) * np.exp(-s)


def _as_points(x) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    return a.reshape(1, -1) if a.ndim <= 1 else a


def eval_kernel(kernel: ScalarKernel, x, y) -> float:
    """Kernel value between two vectors of equal length."""
    X, Y = _as_points(x), _as_points(y)
    if X.shape[1] != Y.shape[1]:
        raise ContractError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    k = _pairwise(kernel, X, Y)[0, 0]
    return float(k)


def cross_gram(kernel: ScalarKernel, X, Y) -> np.ndarray:
    """Matrix ``K[i, j] = kernel(X[i], Y[j])``."""
    X, Y = np.asarray(X, dtype=float), np.asarray(Y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[1] != Y.shape[1]:
        raise ContractError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    return _pairwise(kernel, X, Y)


def gram(kernel: ScalarKernel, points) -> np.ndarray:
    """Symmetric Gram matrix over ``points`` (shape n x d)."""
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    if P.shape[0] < 1:
        raise ContractError("gram needs at least one point")
    K = _pairwise(kernel, P, P)
    return 0.5 * (K + K.T)


def is_psd(K: np.ndarray, tol: float = PSD_TOL) -> bool:
    return bool(np.linalg.eigvalsh(0.5 * (K + K.T)).min() >= -tol)


@dataclass(frozen=True)
class OperatorKernel:
    """Operator-valued kernel ``K(x, y) = kappa(x, y) * M``."""

    scalar: ScalarKernel
    output_matrix: np.ndarray = field(default=None)

    def __post_init__(self):
        M = self.output_matrix
        M = np.eye(1) if M is None else np.atleast_2d(np.asarray(M, dtype=float))
        if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, atol=1e-12):
            raise ConfigError("output matrix must be square and symmetric")
        if np.linalg.eigvalsh(M).min() < -PSD_TOL:
            raise ConfigError("output matrix must be positive semi-definite")
        object.__setattr__(self, "output_matrix", M)

    @classmethod
    def identity(cls, scalar: ScalarKernel, dims: int) -> "OperatorKernel":
        return cls(scalar, np.eye(dims))

    @property
    def output_dims(self) -> int:
        return self.output_matrix.shape[0]


def eval_operator(K: OperatorKernel, x, y) -> np.ndarray:
    return eval_kernel(K.scalar, x, y) * K.output_matrix
