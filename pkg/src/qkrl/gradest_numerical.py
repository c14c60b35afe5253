"""Central differencing and the quantum Gevrey gradient estimator.

The quantum estimator prepares a uniform superposition over a ``d``-dimensional
grid of perturbations ``theta'`` in ``[-R/2, R/2)^d``, imprints the phase
``exp(i n sum_l c_l Vn(theta + l theta'))`` (``Vn`` the value normalised to
``[0, 1]``), applies an inverse QFT per dimension and measures. The measured
signed index ``y_j`` of dimension ``j`` estimates ``2 pi y_j / (n R)`` of the
normalised gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from .errors import BudgetError, ConfigError, ContractError
from .gradest_analytical import GradientEstimate
from .qmdp import QueryLedger, TabularMdp, enumerate_trajectories, exact_value, exact_value_batch
from .statevector import MAX_QUBITS, StateVector


# -- differencing schemes -------------------------------------------------------------


def central_diff_coefficients(m: int) -> np.ndarray:
    """First-derivative stencil ``c_{-m..m}`` with ``c_l = (-1)^{l+1} (m!)^2 / (l (m+l)! (m-l)!)``."""
    if not 1 <= m <= 6:
        raise ContractError("m must lie in [1, 6]")
    out = np.zeros(2 * m + 1)
    for l in range(-m, m + 1):
        if l == 0:
            continue
        val = Fraction((1 if (l + 1) % 2 == 0 else -1) * math.factorial(m) ** 2, l * math.factorial(m + l) * math.factorial(m - l))
        out[l + m] = float(val)
    return out


def lagrange_derivative_weights(nodes) -> np.ndarray:
    """Weights ``w`` with ``f'(0) ~ sum_i w_i f(x_i)`` from differentiating the Lagrange interpolant.

    Exact rational arithmetic; independent of the closed form above.
    """
    xs = [Fraction(x) for x in nodes]
    w = []
    for i, xi in enumerate(xs):
        others = [xj for j, xj in enumerate(xs) if j != i]
        denom = Fraction(1)
        for xj in others:
            denom *= xi - xj
        # derivative at 0 of prod_j (x - x_j)
        num = Fraction(0)
        for k in range(len(others)):
            term = Fraction(1)
            for j, xj in enumerate(others):
                if j != k:
                    term *= -xj
            num += term
        w.append(num / denom)
    return np.array([float(v) for v in w])


@dataclass(frozen=True)
class DifferencingScheme:
    m: int
    h: float = 1e-3
    coefficients: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.h > 0:
            raise ContractError("step must be positive")
        object.__setattr__(self, "coefficients", central_diff_coefficients(self.m))

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.m, self.m + 1)


def smoothed_value(value_fn: Callable[[np.ndarray], float], theta, direction, scheme: DifferencingScheme) -> float:
    """``sum_l c_l V(theta + l h u) / h`` along unit direction ``u``."""
    theta = np.asarray(theta, dtype=float)
    u = np.asarray(direction, dtype=float)
    total = 0.0
    for l, c in zip(scheme.offsets, scheme.coefficients):
        if c != 0.0:
            total += c * value_fn(theta + l * scheme.h * u)
    return total / scheme.h


def stencil_remainder_bound(m: int, h: float, G: float) -> float:
    """Lagrange remainder ``G h^{2m} sum_l |c_l| |l|^{2m+1} / (2m+1)!`` of the first-derivative stencil."""
    c = central_diff_coefficients(m)
    l = np.arange(-m, m + 1)
    return G * h ** (2 * m) * float(np.sum(np.abs(c) * np.abs(l) ** (2 * m + 1))) / math.factorial(2 * m + 1)


# -- Gevrey parameters ------------------------------------------------------------------


@dataclass(frozen=True)
class GevreyParams:
    M: float
    c: float
    sigma: float = 0.0


def gevrey_params(mdp: TabularMdp, policy=None, D: float = 1.0) -> GevreyParams:
    """``M = 4 r_max / (1 - gamma)``, ``c = D T^2``, ``sigma = 0``."""
    return GevreyParams(4.0 * mdp.r_max / (1.0 - mdp.gamma), D * mdp.horizon**2, 0.0)


# -- value evaluation helpers --------------------------------------------------------


def _batch_values(mdp: TabularMdp, policy, thetas: np.ndarray) -> np.ndarray:
    if hasattr(policy, "probs_batch"):
        out = np.empty(thetas.shape[0])
        step = 1 << 14
        for i in range(0, thetas.shape[0], step):
            out[i:i + step] = exact_value_batch(mdp, policy.probs_batch(thetas[i:i + step]))
        return out
    return np.array([exact_value(mdp, policy.with_params(t)) for t in thetas])


def value_grad_bound(mdp: TabularMdp, D: float = 1.0) -> float:
    """Gevrey bound on any first partial of the value: ``(M/2) c``."""
    g = gevrey_params(mdp, D=D)
    return 0.5 * g.M * g.c


# -- classical central differencing -------------------------------------------------


def _mc_value(mdp: TabularMdp, policy, n: int, rng: np.random.Generator) -> float:
    """Mean return of ``n`` sampled rollouts, drawn as multinomial counts over trajectories."""
    traj = enumerate_trajectories(mdp, policy)
    counts = rng.multinomial(n, traj.probs / traj.probs.sum())
    return float(counts @ traj.returns / n)


def classical_cd_gradient(mdp: TabularMdp, policy, eps: float, delta: float, m: int = 2, h: float | None = None,
                          D: float = 1.0, exact_values: bool = False, rng: np.random.Generator | None = None,
                          max_queries: int | None = None) -> GradientEstimate:
    """Per-coordinate stencil with Monte-Carlo value estimates.

    Each of the ``2m`` stencil points of each coordinate is estimated to
    precision ``eps h / (k |c_l|)`` (``k = 2m`` points) with the Hoeffding
    count for returns in ``[0, V_max]`` and a union bound over all points.
    ``h`` defaults to ``1 / (2 D T^2)``, the same edge the quantum grid uses,
    so the sample count scales as ``1 / eps^2``. ``h="gevrey"`` instead picks
    the step from the Gevrey remainder bound so the stencil bias stays below
    ``eps / 2`` (which costs an extra ``eps^{-1/m}``).
    """
    rng = rng or np.random.default_rng(0)
    theta = np.asarray(policy.params, dtype=float)
    d = theta.size
    coeffs = central_diff_coefficients(m)
    offsets = np.arange(-m, m + 1)
    k = 2 * m
    if h is None:
        h = 1.0 / (2.0 * max(gevrey_params(mdp, D=D).c, 1.0))
    elif h == "gevrey":
        g = gevrey_params(mdp, D=D)
        order = 2 * m + 1
        G = 0.5 * g.M * g.c**order * math.factorial(order) ** g.sigma
        rem_unit = stencil_remainder_bound(m, 1.0, G)
        h = (eps / (2.0 * rem_unit)) ** (1.0 / (2 * m)) if rem_unit > 0 else 1.0
        h = min(h, 1.0)
    ledger = QueryLedger()
    vmax = max(mdp.value_max, 1e-12)
    n_points = d * k
    est = np.zeros(d)
    per_point = []
    for l, c in zip(offsets, coeffs):
        if c == 0.0:
            continue
        prec = eps * h / (k * abs(c))
        per_point.append(math.ceil(vmax**2 * math.log(2.0 * n_points / delta) / (2.0 * prec**2)))
    total = d * sum(per_point) * mdp.horizon
    if max_queries is not None and total > max_queries:
        raise BudgetError(f"classical differencing needs {total} queries, cap is {max_queries}")
    for i in range(d):
        acc = 0.0
        j = 0
        for l, c in zip(offsets, coeffs):
            if c == 0.0:
                continue
            th = theta.copy()
            th[i] += l * h
            pol = policy.with_params(th)
            n = per_point[j]
            j += 1
            val = exact_value(mdp, pol) if exact_values else _mc_value(mdp, pol, n, rng)
            acc += c * val
            ledger.add("classical_steps", n * mdp.horizon)
        est[i] = acc / h
    return GradientEstimate(est, ledger, eps, delta, "exact-value" if exact_values else "sampling",
                            "classical-cd", info={"h": h, "m": m, "samples_per_point": per_point})


# -- quantum Gevrey estimator -------------------------------------------------------------


def grid_offsets(k_grid: int, R: float) -> np.ndarray:
    """Perturbation values ``R (j / 2^k - 1/2)`` for ``j in [0, 2^k)``."""
    N = 1 << k_grid
    return R * (np.arange(N) / N - 0.5)


def signed_index(y: np.ndarray, k_grid: int) -> np.ndarray:
    N = 1 << k_grid
    y = np.asarray(y)
    return np.where(y >= N // 2, y - N, y)


class GevreyPhaseField:
    """The phase imprinted on every grid point, for one base parameter ``theta``.

    ``backend`` "exact-phase" uses the exact value; "probability-oracle"
    reads each needed value off the ancilla of a simulated return-controlled
    rotation circuit. ``value_fn`` overrides both (used for synthetic checks).
    """

    def __init__(self, mdp: TabularMdp | None, policy, theta, m: int, R: float, k_grid: int, n: float,
                 backend: str = "exact-phase", value_fn: Callable | None = None, scale: float | None = None):
        self.theta = np.asarray(theta, dtype=float)
        d = self.theta.size
        self.d, self.k_grid, self.R, self.n, self.m = d, k_grid, R, n, m
        if d * k_grid > MAX_QUBITS:
            raise ConfigError(f"{d} parameters x {k_grid} qubits exceed the {MAX_QUBITS}-qubit cap")
        coeffs = central_diff_coefficients(m)
        offs = grid_offsets(k_grid, R)
        N = 1 << k_grid
        ids = np.arange(N**d)
        # dimension 0 least significant
        digits = np.stack([(ids // N**j) % N for j in range(d)], axis=1)
        pert = offs[digits]  # (N^d, d)
        if scale is None:
            scale = 1.0 if mdp is None else mdp.value_max
        self.scale = scale
        phase = np.zeros(ids.size)
        self.value_calls = 0
        for l, c in zip(range(-m, m + 1), coeffs):
            if c == 0.0:
                continue
            pts = self.theta[None, :] + l * pert
            if value_fn is not None:
                vals = np.array([value_fn(p) for p in pts])
            elif backend == "exact-phase":
                vals = _batch_values(mdp, policy, pts)
            elif backend == "probability-oracle":
                vals = np.array([probability_oracle_value(mdp, policy.with_params(p)) for p in pts])
            else:
                raise ConfigError(f"unknown phase backend {backend!r}")
            self.value_calls += ids.size
            phase += c * vals / scale
        self.phase = n * phase

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """One run of superposition, phase, inverse QFTs, measurement; returns signed indices."""
        regs = [(f"g{j}", self.k_grid) for j in range(self.d)]
        sv = StateVector(regs)
        sv.amplitudes[:] = 1.0 / math.sqrt(sv.amplitudes.size)
        sv.apply_joint_phase([f"g{j}" for j in range(self.d)], self.phase)
        for j in range(self.d):
            sv.inverse_qft(f"g{j}")
        # phase exp(2 pi i x y / N) with x the grid digit -> inverse QFT peaks at y
        out = np.zeros(self.d, dtype=np.int64)
        for j in range(self.d):
            y, sv = sv.measure(f"g{j}", rng)
            out[j] = y
        return signed_index(out, self.k_grid)

    def to_gradient(self, y: np.ndarray) -> np.ndarray:
        # the digit x maps to theta' = R x / N - R/2, so a phase g.theta' n gives peak y = n R g / (2 pi)
        return 2.0 * np.pi * np.asarray(y, dtype=float) / (self.n * self.R) * self.scale


def probability_oracle_value(mdp: TabularMdp, policy, return_bits: int | None = None) -> float:
    """Value read from a return-controlled ancilla rotation on the trajectory state.

    Builds ``U_P`` and ``U_R``, then rotates an ancilla so that its ``|1>``
    probability equals the normalised return; the estimate is ``V_max P(1)``.
    Exact when every return lies on the return register's grid.
    """
    from .policies import build_policy_evaluation_oracle
    from .qmdp import TrajectoryRegisters, oracle_return, oracle_trajectory, return_grid

    regs = TrajectoryRegisters.allocate(mdp.horizon)
    bits = return_bits or 4
    grid = return_grid(mdp, bits)
    sv = StateVector(regs.specs(mdp.layout) + [("ret", bits), ("anc", 1)])
    oracle_trajectory(sv, regs, mdp, build_policy_evaluation_oracle(policy))
    oracle_return(sv, regs, "ret", mdp, grid)
    anc = sv.qubit("anc")
    for code in range(1, 1 << bits):
        frac = (code * grid.spacing[0]) / grid.hi[0]
        sv.apply_multicontrolled_ry(anc, {sv.qubit("ret", b): (code >> b) & 1 for b in range(bits)},
                                    2.0 * math.asin(math.sqrt(min(frac, 1.0))))
    return float(sv.probabilities("anc")[1] * grid.hi[0])


def quantum_gevrey_gradient(mdp: TabularMdp, policy, eps: float, delta: float, backend: str = "exact-phase",
                            m: int = 2, k_grid: int = 6, R: float | None = None, D: float = 1.0,
                            repetitions: int | None = None, rng: np.random.Generator | None = None,
                            value_fn: Callable | None = None, theta=None, scale: float = 1.0,
                            field_cache: dict | None = None) -> GradientEstimate:
    """Grid-phase gradient estimate with coordinate-wise median over repetitions.

    ``n`` is chosen so the index resolution ``2 pi V_max / (n R)`` equals
    ``eps / 2``; ``R`` defaults to ``1 / (2 c)`` with ``c = D T^2``.
    With ``mdp=None`` a synthetic ``value_fn`` on ``[0, scale]`` is
    differentiated at ``theta``.
    """
    if backend not in ("exact-phase", "probability-oracle"):
        raise ConfigError(f"backend must be exact-phase or probability-oracle, got {backend!r}")
    rng = rng or np.random.default_rng(0)
    theta = np.asarray(policy.params if theta is None else theta, dtype=float).reshape(-1)
    d = theta.size
    gp = gevrey_params(mdp, D=D) if mdp is not None else GevreyParams(1.0, 1.0)
    if R is None:
        R = 1.0 / (2.0 * max(gp.c, 1.0))
    if mdp is not None:
        scale = mdp.value_max
    n = 4.0 * math.pi * scale / (R * eps)
    n = float(math.ceil(n))
    reps = repetitions or (2 * math.ceil(math.log(max(d, 2) / delta)) + 1)
    key = (tuple(theta), m, k_grid, R, n, backend)
    fld = None if field_cache is None else field_cache.get(key)
    if fld is None:
        fld = GevreyPhaseField(mdp, policy, theta, m, R, k_grid, n, backend, value_fn, scale)
        if field_cache is not None:
            field_cache[key] = fld
    samples = np.array([fld.sample(rng) for _ in range(reps)])
    est = np.median(fld.to_gradient(samples), axis=0)
    ledger = QueryLedger()
    coeffs = central_diff_coefficients(m)
    per_rep = int(sum(math.ceil(n * abs(c)) for c in coeffs))
    ledger.add("phase_oracle", reps * per_rep)
    return GradientEstimate(est, ledger, eps, delta, backend, "qpg-numerical",
                            info={"n": n, "R": R, "k_grid": k_grid, "repetitions": reps, "m": m,
                                  "value_calls_per_field": fld.value_calls, "samples": samples})
