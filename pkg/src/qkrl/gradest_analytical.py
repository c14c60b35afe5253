"""Binary oracles for vector random variables, quantum multivariate mean
estimation (bounded and variance-adaptive), the classical Hoeffding baseline
and query-budget formulas.

The quantum estimators use an idealized directional-mean oracle: the phase
``exp(i m E[trunc(zeta <x, X>)])`` at every grid point ``x`` is computed
exactly from the enumerated outcome distribution, and the Fourier
reconstruction then runs on a simulated register.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .qmdp import QueryLedger, TabularMdp, enumerate_trajectories
from .statevector import MAX_QUBITS, StateVector, prepare_amplitudes

PROB_TOL = 1e-12


@dataclass
class GradientEstimate:
    estimate: np.ndarray
    queries: QueryLedger
    eps: float
    delta: float
    backend: str
    estimator: str
    error_vs_exact: float | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.estimate = np.asarray(self.estimate, dtype=float)
        if not np.all(np.isfinite(self.estimate)):
            raise ContractError("estimate has non-finite entries")

    @property
    def n_queries(self) -> int:
        return self.queries.total

    def with_truth(self, truth) -> "GradientEstimate":
        diff = self.estimate - np.asarray(truth, dtype=float).reshape(self.estimate.shape)
        self.error_vs_exact = float(np.max(np.abs(diff))) if diff.size else 0.0
        return self

    def ledger_row(self) -> dict:
        return {
            "estimator": self.estimator,
            "backend": self.backend,
            "eps": self.eps,
            "delta": self.delta,
            "queries": self.n_queries,
            "error_vs_exact": "" if self.error_vs_exact is None else self.error_vs_exact,
        }


# -- binary oracle ----------------------------------------------------------------------


class BinaryOracle:
    """Enumerable random vector ``X(omega)`` with ``P(omega)``.

    ``payload`` has shape (|Omega|, d). Complex payloads are split into real
    and imaginary halves, giving dimension ``2d``.
    """

    def __init__(self, probs, payload, outcomes=None, label: str = "oracle", payload_bits: int = 12,
                 payload_bound: float | None = None, calls_per_query: int = 1):
        probs = np.asarray(probs, dtype=float).reshape(-1)
        payload = np.asarray(payload)
        if payload.ndim == 1:
            payload = payload[:, None]
        if np.iscomplexobj(payload):
            payload = np.concatenate([payload.real, payload.imag], axis=1)
        payload = payload.astype(float)
        if payload.shape[0] != probs.size:
            raise ContractError("payload rows must match the number of outcomes")
        if np.any(probs < -PROB_TOL) or abs(probs.sum() - 1.0) > PROB_TOL:
            raise ContractError("outcome probabilities must sum to 1")
        if not np.all(np.isfinite(payload)):
            raise ContractError("payload must be finite")
        self.probs = np.clip(probs, 0.0, None)
        self.payload = payload
        self.outcomes = list(range(probs.size)) if outcomes is None else list(outcomes)
        self.label = label
        self.payload_bits = int(payload_bits)
        max_abs = float(np.max(np.abs(payload))) if payload.size else 0.0
        self.payload_bound = max(max_abs, 1e-300) if payload_bound is None else float(payload_bound)
        if max_abs > self.payload_bound * (1 + 1e-12):
            raise ConfigError(f"payload magnitude {max_abs:.4g} overflows the bound {self.payload_bound:.4g}")
        self.calls_per_query = int(calls_per_query)
        self.meta: dict = {}

    @property
    def dim(self) -> int:
        return self.payload.shape[1]

    @property
    def size(self) -> int:
        return self.probs.size

    def expectation(self) -> np.ndarray:
        return self.probs @ self.payload

    def covariance(self) -> np.ndarray:
        c = self.payload - self.expectation()
        return (self.probs[:, None] * c).T @ c

    def max_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.payload, axis=1))) if self.size else 0.0

    def scaled(self, c: float, shift=None) -> "BinaryOracle":
        """Oracle for ``c * (X - shift)``."""
        X = self.payload if shift is None else self.payload - np.asarray(shift, dtype=float)
        return BinaryOracle(self.probs, c * X, self.outcomes, self.label, self.payload_bits,
                            calls_per_query=self.calls_per_query)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(self.size, size=n, p=self.probs / self.probs.sum())
        return self.payload[idx]

    # fixed-point payload encoding, two's complement per coordinate
    @property
    def payload_step(self) -> float:
        return self.payload_bound / ((1 << (self.payload_bits - 1)) - 1)

    def encode_payload(self) -> np.ndarray:
        codes = np.rint(self.payload / self.payload_step).astype(np.int64)
        return np.mod(codes, 1 << self.payload_bits)

    def decode_payload(self, codes) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        half = 1 << (self.payload_bits - 1)
        signed = np.where(codes >= half, codes - (1 << self.payload_bits), codes)
        return signed * self.payload_step

    def to_statevector(self) -> StateVector:
        """``sum_omega sqrt(P(omega)) |omega>|code(X(omega))>`` on a simulated register set."""
        k = max(1, math.ceil(math.log2(max(self.size, 2))))
        regs = [("omega", k)] + [(f"x{j}", self.payload_bits) for j in range(self.dim)]
        if k + self.dim * self.payload_bits > MAX_QUBITS:
            raise ConfigError("binary oracle register exceeds the qubit cap")
        sv = StateVector(regs)
        p = np.zeros(1 << k)
        p[: self.size] = self.probs
        prepare_amplitudes(sv, "omega", p)
        codes = self.encode_payload()
        table = np.zeros((1 << k, self.dim), dtype=np.int64)
        table[: self.size] = codes
        for j in range(self.dim):
            col = table[:, j]
            sv.apply_classical_function(["omega"], f"x{j}", lambda v, col=col: col[v[0]])
        return sv


def truncate(x, a: float, b: float) -> np.ndarray:
    """``x`` if ``a <= ||x||_2 <= b``, otherwise the zero vector."""
    if not 0 <= a <= b:
        raise ContractError("truncate needs 0 <= a <= b")
    x = np.asarray(x, dtype=float)
    n = np.linalg.norm(x)
    return x.copy() if a <= n <= b else np.zeros_like(x)


def _truncate_rows(X: np.ndarray, a: float, b: float, lower_open: bool = False) -> np.ndarray:
    n = np.linalg.norm(X, axis=1)
    keep = ((n > a) if lower_open else (n >= a)) & (n <= b)
    return np.where(keep[:, None], X, 0.0)


def reinforce_oracle(mdp: TabularMdp, policy, payload_bound: float | None = None) -> BinaryOracle:
    """Trajectory oracle with payload ``(sum_t grad log pi(a_t|s_t)) * (sum_t gamma^t r_t)``."""
    traj = enumerate_trajectories(mdp, policy)
    score = np.asarray(policy.score())
    total_score = score[traj.states, traj.actions].sum(axis=1)
    payload = total_score * traj.returns[:, None]
    return BinaryOracle(traj.probs / traj.probs.sum(), payload, label="reinforce", payload_bound=payload_bound,
                        calls_per_query=mdp.horizon)


def reinforce_scale(mdp: TabularMdp, B: float = 1.0) -> float:
    """Normaliser ``T r_max B / (1 - gamma)`` that maps REINFORCE payloads into the unit ball."""
    return mdp.horizon * mdp.r_max * B / (1.0 - mdp.gamma)


# -- QBounded ----------------------------------------------------------------------------


def qbounded_grid_size(n: int, d: int, delta: float, B: float = 1.0, alpha: float = 1.0) -> int:
    """``m = 2^ceil(log2(8 pi n / (alpha B ln(d/delta))))`` grid points per dimension."""
    log_term = max(math.log(max(d, 1) / delta), 1e-12)
    return 1 << max(1, math.ceil(math.log2(8.0 * math.pi * n / (alpha * B * log_term))))


def qbounded_zeta(n: int, d: int) -> float:
    return 1.0 / math.sqrt(math.log(400.0 * math.pi * n * max(d, 1)))


def repetitions_for(d: int, delta: float) -> int:
    """Odd ``N_x = 2 ceil(ln(d/delta)) + 1``."""
    return 2 * math.ceil(math.log(max(d, 2) / delta)) + 1


def _directional_phases_separable(oracle: BinaryOracle, m: int, zeta: float) -> np.ndarray:
    """Per-dimension phases ``m zeta E[X_j] x_j``; valid when truncation never binds."""
    x = np.arange(m) / m - 0.5
    mu = oracle.expectation()
    return m * zeta * mu[:, None] * x[None, :]


def _directional_phases_joint(oracle: BinaryOracle, m: int, zeta: float) -> np.ndarray:
    d = oracle.dim
    x = np.arange(m) / m - 0.5
    ids = np.arange(m**d)
    grid = np.stack([x[(ids // m**j) % m] for j in range(d)], axis=1)  # (m^d, d)
    proj = zeta * grid @ oracle.payload.T  # (m^d, |Omega|)
    proj = np.where(np.abs(proj) <= 1.0, proj, 0.0)
    return m * proj @ oracle.probs


def qbounded(oracle: BinaryOracle, n: int, delta: float, rng: np.random.Generator | None = None,
             scale: float = 1.0, repetitions: int | None = None, eps: float | None = None) -> GradientEstimate:
    """Bounded quantum multivariate mean estimate of ``E[X]``.

    The payload divided by ``scale`` must lie in the unit ball. The grid has
    ``m`` points per dimension; each repetition prepares the uniform grid
    superposition, applies the directional phase, an inverse QFT per
    dimension and measures; the estimate is ``2 pi y / zeta`` (times
    ``scale``), and repetitions are combined by coordinate-wise median.
    """
    rng = rng or np.random.default_rng(0)
    if n < 1:
        raise ContractError("n must be at least 1")
    if not 0 < delta < 1:
        raise ContractError("delta must lie in (0, 1)")
    norm_oracle = oracle if scale == 1.0 else oracle.scaled(1.0 / scale)
    if norm_oracle.max_norm() > 1.0 + 1e-9:
        raise ContractError(f"payload norm {norm_oracle.max_norm():.4g} exceeds 1; normalise first")
    d = norm_oracle.dim
    m = qbounded_grid_size(n, d, delta)
    k = int(math.log2(m))
    zeta = qbounded_zeta(n, d)
    reps = repetitions or repetitions_for(d, delta)
    binds = zeta * math.sqrt(d) / 2.0 * norm_oracle.max_norm() > 1.0
    samples = np.zeros((reps, d))
    if not binds:
        # the phase is linear in x, so the grid state is a product over dimensions
        if k > MAX_QUBITS:
            raise ConfigError(f"{k} grid qubits per dimension exceed the {MAX_QUBITS}-qubit cap")
        phases = _directional_phases_separable(norm_oracle, m, zeta)
        for j in range(d):
            sv = StateVector([("g", k)])
            sv.amplitudes[:] = 1.0 / math.sqrt(m)
            sv.apply_diagonal_phase("g", phases[j])
            sv.inverse_qft("g")
            p = sv.probabilities("g")
            ys = rng.choice(m, size=reps, p=p / p.sum())
            samples[:, j] = np.where(ys >= m // 2, ys - m, ys) / m
        mode = "separable"
    else:
        if d * k > MAX_QUBITS:
            raise ConfigError(f"joint grid needs {d * k} qubits, cap is {MAX_QUBITS}")
        phases = _directional_phases_joint(norm_oracle, m, zeta)
        names = [f"g{j}" for j in range(d)]
        for r in range(reps):
            sv = StateVector([(nm, k) for nm in names])
            sv.amplitudes[:] = 1.0 / math.sqrt(sv.amplitudes.size)
            sv.apply_joint_phase(names, phases)
            for nm in names:
                sv.inverse_qft(nm)
            for j, nm in enumerate(names):
                y, sv = sv.measure(nm, rng)
                samples[r, j] = (y - m if y >= m // 2 else y) / m
        mode = "joint"
    est = np.median(2.0 * np.pi * samples / zeta, axis=0) * scale
    ledger = QueryLedger()
    ledger.add("binary_oracle", reps * m * oracle.calls_per_query)
    return GradientEstimate(est, ledger, eps if eps is not None else float("nan"), delta, "idealized", "qbounded",
                            info={"m": m, "zeta": zeta, "repetitions": reps, "n": n, "mode": mode,
                                  "theorem_budget": n, "resolution": 2.0 * np.pi / (zeta * m) * scale})


# -- QEstimator -----------------------------------------------------------------------------


def median_of_means(X: np.ndarray, groups: int) -> np.ndarray:
    """Coordinate-wise median of ``groups`` block means."""
    X = np.asarray(X, dtype=float)
    groups = max(1, min(groups, X.shape[0]))
    blocks = np.array_split(X, groups)
    return np.median(np.stack([b.mean(axis=0) for b in blocks]), axis=0)


def upper_quantile(values, probs, level: float) -> float:
    """Smallest ``q`` with ``P(V > q) <= level`` for a discrete distribution."""
    v = np.asarray(values, dtype=float)
    p = np.asarray(probs, dtype=float)
    order = np.argsort(v, kind="stable")
    v, p = v[order], p[order]
    tail = 1.0 - np.cumsum(p)
    idx = int(np.argmax(tail <= level + 1e-15))
    return float(v[idx])


def qestimator(oracle: BinaryOracle, n: int, delta: float, rng: np.random.Generator | None = None,
               levels: int | None = None, eps: float | None = None) -> GradientEstimate:
    """Variance-adaptive estimate ``X' + sum_j q_j Ybar_j``.

    ``X'`` is a median-of-means over ``ceil(8 ln(2/delta))`` classical
    samples. Shell ``j`` holds the deviations ``X - X'`` with norm in
    ``(q_{j-1}, q_j]``, where ``q_j`` is the upper ``2^-j`` quantile of
    ``||X - X'||`` (idealized quantile estimator) and the last shell reaches
    the maximum norm. Each shell, divided by ``q_j``, goes to :func:`qbounded`.
    """
    rng = rng or np.random.default_rng(0)
    ledger = QueryLedger()
    n0 = max(1, math.ceil(8.0 * math.log(2.0 / delta)))
    xs = oracle.sample(n0, rng)
    ledger.add("classical_samples", n0 * oracle.calls_per_query)
    x0 = median_of_means(xs, max(1, math.ceil(math.log(2.0 / delta))))
    dev = oracle.payload - x0
    norms = np.linalg.norm(dev, axis=1)
    support = oracle.probs > 0
    top = float(norms[support].max()) if support.any() else 0.0
    if top <= 1e-15:
        return GradientEstimate(x0, ledger, eps if eps is not None else float("nan"), delta, "idealized", "qestimator",
                                info={"x0": x0, "shells": 0, "fallback": True})
    L = levels or max(1, math.ceil(math.log2(max(n, 2))))
    qs = []
    for j in range(1, L):
        q = upper_quantile(norms[support], oracle.probs[support], 2.0 ** (-j))
        if q > 0 and (not qs or q > qs[-1] + 1e-15):
            qs.append(q)
        ledger.add("quantile_oracle", math.ceil(math.log(2.0 * L / delta) / math.sqrt(2.0 ** (-j))) * oracle.calls_per_query)
    if not qs or qs[-1] < top - 1e-15:
        qs.append(top)
    est = x0.copy()
    lo = 0.0
    shell_info = []
    d_shell = delta / (2.0 * len(qs))
    for j, q in enumerate(qs):
        Y = _truncate_rows(dev, lo, q, lower_open=j > 0) / q
        shell = BinaryOracle(oracle.probs, Y, label=f"shell{j}", calls_per_query=oracle.calls_per_query)
        part = qbounded(shell, n, d_shell, rng)
        ledger.merge(part.queries)
        est += q * part.estimate
        shell_info.append({"q": q, "mass": float(oracle.probs[np.any(Y != 0, axis=1)].sum())})
        lo = q
    return GradientEstimate(est, ledger, eps if eps is not None else float("nan"), delta, "idealized", "qestimator",
                            info={"x0": x0, "shells": shell_info, "fallback": False})


# -- classical baseline ------------------------------------------------------------------------


def hoeffding_samples(eps: float, delta: float, d: int, B: float) -> int:
    """``ceil(2 B^2 / eps^2 * ln(2 d / delta))``."""
    if eps <= 0 or not 0 < delta < 1:
        raise ContractError("need eps > 0 and 0 < delta < 1")
    return math.ceil(2.0 * B**2 / eps**2 * math.log(2.0 * d / delta))


def classical_mvmc(oracle: BinaryOracle, eps: float, delta: float, B: float, rng: np.random.Generator | None = None,
                   n: int | None = None) -> GradientEstimate:
    """Coordinate-wise empirical mean of iid samples, ``n`` from Hoeffding unless given."""
    rng = rng or np.random.default_rng(0)
    n = hoeffding_samples(eps, delta, oracle.dim, B) if n is None else int(n)
    X = oracle.sample(n, rng)
    ledger = QueryLedger()
    ledger.add("classical_samples", n * oracle.calls_per_query)
    return GradientEstimate(X.mean(axis=0), ledger, eps, delta, "sampling", "classical-mvmc", info={"n": n})


# -- query budgets -------------------------------------------------------------------------------


def xi(p: float) -> float:
    """Norm-conversion exponent ``max(0, 1/2 - 1/p)``."""
    if p < 1:
        raise ContractError("p must be at least 1")
    return max(0.0, 0.5 - (0.0 if math.isinf(p) else 1.0 / p))


_BUDGET_SYMBOLS = {
    "softmax_pqc_pg": ("temperature", "r_max", "T", "gamma", "eps", "d", "delta"),
    "numerical_qpg": ("d", "D", "T", "r_max", "gamma", "eps", "delta"),
    "analytical_qpg": ("d", "p", "B_p", "T", "r_max", "gamma", "eps", "delta"),
    "reinforce": ("T", "r_max", "gamma", "eps", "d", "delta"),
    "classical_reinforce": ("B_1", "T", "r_max", "gamma", "eps", "d", "delta"),
    "cqrac": ("d", "p", "eps_Q", "B_p", "gamma", "eps", "delta"),
    "cqrac_variance": ("d", "p", "eps_Q", "sigma_nabla", "gamma", "eps", "delta"),
    "classical_cqrac": ("d", "p", "eps_Q", "B_p", "Sigma_X_norm", "gamma", "eps", "delta"),
    "dcqrac": ("d", "p", "C_p", "gamma", "eps", "delta"),
    "classical_dcqrac": ("C_p", "gamma", "eps", "d", "delta"),
    "classical_cd": ("d", "D", "T", "r_max", "gamma", "eps", "delta"),
    "mvmc": ("B", "eps", "d", "delta"),
}

BUDGET_VARIANTS = tuple(_BUDGET_SYMBOLS)


def budget_symbols(variant: str) -> tuple[str, ...]:
    if variant not in _BUDGET_SYMBOLS:
        raise ContractError(f"unknown budget variant {variant!r}; choose from {BUDGET_VARIANTS}")
    return _BUDGET_SYMBOLS[variant]


def query_budget(variant: str, params: dict) -> int:
    """Query count with constant factor 1 and an explicit ``ln(d/delta)`` factor.

    ``numerical_qpg`` and ``classical_cd`` use ``T^t_power`` with
    ``t_power`` defaulting to 2 (pass 1 for the single-``T`` form). When
    ``N`` and ``A`` are given, ``d`` may be omitted and is taken as ``N A``.
    """
    p = dict(params)
    if "d" not in p and "N" in p and "A" in p:
        p["d"] = p["N"] * p["A"]
    missing = [s for s in budget_symbols(variant) if s not in p]
    if missing:
        raise ContractError(f"budget {variant!r} is missing symbols: {', '.join(missing)}")
    eps, delta = float(p["eps"]), float(p["delta"])
    if eps <= 0 or not 0 < delta < 1:
        raise ContractError("need eps > 0 and 0 < delta < 1")
    d = float(p["d"])
    log_term = math.log(d / delta)
    horizon_eff = 1.0 / (1.0 - p["gamma"]) if "gamma" in p else 1.0
    t_pow = p.get("t_power", 2)
    if variant == "softmax_pqc_pg":
        val = (p["temperature"] * p["r_max"] * p["T"] * horizon_eff / eps) ** 2 * log_term
    elif variant == "numerical_qpg":
        val = math.sqrt(d) * p["D"] * p["T"] ** t_pow * p["r_max"] * horizon_eff / eps * log_term
    elif variant == "analytical_qpg":
        val = d ** xi(p["p"]) * p["B_p"] * p["T"] * p["r_max"] * horizon_eff / eps * log_term
    elif variant == "reinforce":
        val = p["T"] * p["r_max"] * horizon_eff / eps * log_term
    elif variant == "classical_reinforce":
        val = (p["B_1"] * p["T"] * p["r_max"] * horizon_eff * log_term / eps) ** 2
    elif variant == "cqrac":
        val = d ** xi(p["p"]) * p["eps_Q"] * p["B_p"] * horizon_eff / eps * log_term
    elif variant == "cqrac_variance":
        val = d ** xi(p["p"]) * p["eps_Q"] * p["sigma_nabla"] * horizon_eff / eps * log_term
    elif variant == "classical_cqrac":
        x = xi(p["p"])
        val = (d ** (2 * x) * p["eps_Q"] ** 2 * p["B_p"] ** 2 + p["Sigma_X_norm"]) * (horizon_eff / eps) ** 2 * log_term
    elif variant == "dcqrac":
        val = d ** xi(p["p"]) * p["C_p"] * horizon_eff / eps * log_term
    elif variant == "classical_dcqrac":
        val = (p["C_p"] * horizon_eff / eps) ** 2 * log_term
    elif variant == "classical_cd":
        val = d * (p["r_max"] * horizon_eff / eps * p["D"] * p["T"] ** t_pow) ** 2 * log_term
    else:  # mvmc
        return hoeffding_samples(eps, delta, int(d), p["B"])
    return math.ceil(val - 1e-9)
