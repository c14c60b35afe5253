"""Kernel policies, their circuits and smoothness bounds.

Every policy is an immutable snapshot exposing

* ``probs()``: the exact (n_states, n_actions) probability table,
* ``params`` / ``with_params(theta)``: a flat parameter vector,
* ``score()``: the exact ``grad_theta log pi(a|s)`` table, shape (S, A, d),
* ``circuit_probs(s)``: the same row of ``probs()`` read from a simulated circuit.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from .encoding import FixedPointGrid, RegisterLayout
from .errors import ConfigError, ContractError
from .kernels import OperatorKernel, ScalarKernel, amplitude_state, cross_gram
from .statevector import StateVector, pattern_controls, prepare_amplitudes

# -- quantum feature maps ------------------------------------------------------------


def _householder_prep(phi: np.ndarray) -> np.ndarray:
    """Real orthogonal matrix whose first column is ``phi``."""
    dim = phi.size
    e0 = np.zeros(dim)
    e0[0] = 1.0
    v = e0 - phi
    nv = v @ v
    if nv < 1e-30:
        return np.eye(dim)
    return np.eye(dim) - 2.0 * np.outer(v, v) / nv


def _ry(theta: float) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -s], [s, c]])


def feature_prep(kernel: ScalarKernel, x, grid: FixedPointGrid | None = None) -> np.ndarray:
    """Unitary ``U`` with ``U|0> = |phi(x)>`` so that ``kernel(x, y) = |<phi(x)|phi(y)>|^2``.

    KroneckerDelta needs the grid to basis-encode ``x``.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    v = kernel.variant
    if x.size == 0:
        return np.eye(1)
    if v == "KroneckerDelta":
        if grid is None:
            raise ContractError("basis encoding needs the register grid")
        idx = grid.encode(x)
        P = np.eye(grid.size)
        P[:, [0, idx]] = P[:, [idx, 0]]
        return P
    if v in ("PureStateOverlap", "RPowerOverlap"):
        U = _householder_prep(amplitude_state(x))
        if v == "RPowerOverlap":
            out = np.eye(1)
            for _ in range(int(kernel.params["r"])):
                out = np.kron(out, U)
            return out
        return U
    if v == "SquaredCosine":
        out = np.eye(1)
        for xj in x[::-1]:
            out = np.kron(out, _ry(kernel.params["bandwidth"] * xj))
        return out
    raise ContractError(f"kernel {v!r} has no quantum feature map")


def _feature_qubits(U: np.ndarray) -> int:
    return int(round(math.log2(U.shape[0])))


def circuit_kernel(kernel: ScalarKernel, x, y, grid: FixedPointGrid | None = None) -> float:
    """Kernel value read from the |0> probability of an inner-product subcircuit."""
    A, B = feature_prep(kernel, x, grid), feature_prep(kernel, y, grid)
    sv = StateVector([("f", _feature_qubits(A))])
    sv.apply_inner_product_subcircuit("f", A, B)
    return sv.projector_expectation("f", [0])


# -- Kitaev-Webb Gaussian preparation -------------------------------------------------


def jacobi_theta_sum(m: float, v: float) -> float:
    """``F(m, v) = sum_{n in Z} exp(-(n - m)^2 / v^2)``."""
    if not v > 0:
        raise ContractError("v must be positive")
    half = max(50.0, 10.0 * v)
    n = np.arange(math.floor(m - half), math.ceil(m + half) + 1)
    return float(np.sum(np.exp(-((n - m) ** 2) / v**2)))


def _log_theta(m: float, v: float, count: int | None) -> float:
    """log of the theta sum over ``n in Z`` (count None) or ``n in [0, count)``."""
    if count is None:
        half = max(50.0, 10.0 * v)
        n = np.arange(math.floor(m - half), math.ceil(m + half) + 1)
    else:
        n = np.arange(count)
    return float(logsumexp(-((n - m) ** 2) / v**2))


def kitaev_webb_angles(m: float, v: float, k: int, wrap: bool = False) -> list[np.ndarray]:
    """R_Y angles of the recursive ladder, ``angles[j][p]`` for qubit ``j`` given low bits ``p``.

    The target amplitudes on ``x in [0, 2**k)`` are proportional to
    ``exp(-(x - m)^2 / (2 v^2))``. Each qubit splits even from odd values of
    the remaining sub-problem with ``cos^2(angle/2) = F(m'/2, v'/2) / F(m', v')``
    and recurses on ``(m'/2, v'/2)`` or ``((m'-1)/2, v'/2)``. With ``wrap`` the
    sums run over all integers (the periodised Gaussian); otherwise they run
    over the values the register can hold, which yields the truncated Gaussian
    exactly.
    """
    if not v > 0:
        raise ContractError("v must be positive")
    # probabilities carry exp(-(x-m)^2 / v^2), amplitudes half of that exponent
    angles = []
    params = [(float(m), float(v))]
    for j in range(k):
        count = None if wrap else 1 << (k - j)
        sub = None if wrap else 1 << (k - j - 1)
        level = np.zeros(len(params))
        nxt = [None] * (2 * len(params))
        for p, (mm, vv) in enumerate(params):
            lp0 = _log_theta(mm / 2, vv / 2, sub) - _log_theta(mm, vv, count)
            p0 = min(1.0, math.exp(lp0))
            level[p] = 2.0 * math.acos(math.sqrt(p0))
            nxt[p] = (mm / 2, vv / 2)
            nxt[p + len(params)] = ((mm - 1) / 2, vv / 2)
        angles.append(level)
        params = nxt
    return angles


def gaussian_amplitudes(m: float, v: float, k: int, wrap: bool = False) -> np.ndarray:
    """Direct normalized amplitude vector of the target state (the test oracle)."""
    x = np.arange(1 << k, dtype=float)
    if wrap:
        half = max(50.0, 10.0 * v)
        shifts = np.arange(math.floor((m - half) / (1 << k)) - 1, math.ceil((m + half) / (1 << k)) + 2)[:, None] * (1 << k)
        logp = logsumexp(-((x[None, :] + shifts - m) ** 2) / v**2, axis=0)
    else:
        logp = -((x - m) ** 2) / v**2
    logp -= logsumexp(logp)
    return np.exp(0.5 * logp)


def prepare_gaussian_wavefunction(sv: StateVector, a_reg: str, mean, var, bits: int | None = None,
                                  controls: dict | None = None, wrap: bool = False) -> StateVector:
    """Load a product of discretised Gaussians into ``a_reg``.

    ``mean[j]`` and ``var[j]`` are in index units of dimension ``j`` (which
    occupies ``bits`` consecutive qubits of the register); the amplitude of
    index ``x`` is proportional to ``exp(-(x - mean)^2 / (2 var))``.
    """
    reg = sv.register(a_reg)
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    var = np.atleast_1d(np.asarray(var, dtype=float))
    if mean.shape != var.shape:
        raise ContractError("mean and variance must have the same length")
    if np.any(var <= 0):
        raise ContractError("variances must be positive")
    bits = reg.size // max(mean.size, 1) if bits is None else bits
    if bits * mean.size != reg.size:
        raise ContractError("register width does not match dims x bits")
    base = dict(controls or {})
    for d, (m, s2) in enumerate(zip(mean, var)):
        start = reg.start + d * bits
        for j, level in enumerate(kitaev_webb_angles(m, math.sqrt(s2), bits, wrap)):
            for p, ang in enumerate(level):
                if ang == 0.0:
                    continue
                ctl = dict(base)
                for b in range(j):
                    ctl[start + b] = (p >> b) & 1
                sv.apply_multicontrolled_ry(start + j, ctl, ang)
    return sv


# -- policies --------------------------------------------------------------------------


def _centres(centres, dims: int) -> np.ndarray:
    c = np.asarray(centres, dtype=float)
    if c.ndim == 1:
        c = c.reshape(-1, dims) if dims else c.reshape(-1, 0)
    if c.shape[1] != dims:
        raise ConfigError(f"centres must have {dims} columns, got {c.shape}")
    return c


class Policy:
    """Shared plumbing; subclasses implement ``probs``, ``score``, ``params``, ``with_params``."""

    layout: RegisterLayout
    variant: str = "policy"

    @property
    def n_states(self) -> int:
        return self.layout.n_states

    @property
    def n_actions(self) -> int:
        return self.layout.n_actions

    @property
    def n_params(self) -> int:
        return int(np.asarray(self.params).size)

    def prob(self, s: int, a: int) -> float:
        return float(self.probs()[s, a])

    def circuit_probs(self, s: int) -> np.ndarray:
        return self.probs()[s]

    def state_points(self) -> np.ndarray:
        return self.layout.states.points()

    def action_points(self) -> np.ndarray:
        return self.layout.actions.points()

    def _score_from_table(self, dp: np.ndarray) -> np.ndarray:
        pi = self.probs()
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(pi[..., None] > 0, dp / pi[..., None], 0.0)
        return out


@dataclass(frozen=True, eq=False)
class RepresenterRawPqc(Policy):
    """Raw-PQC whose action qubits are rotated inside kernel-overlap branches.

    For state ``s`` every centre ``c_i`` owns an ancilla span that carries
    ``<phi(c_i)|phi(s)>`` on ``|0...0>``; action qubit ``j`` receives
    ``R_Y(theta[i, j])`` controlled on that span being zero. With the
    Kronecker kernel and one centre per state this is the plain per-state
    rotation circuit.
    """

    layout: RegisterLayout
    centres: np.ndarray
    theta: np.ndarray
    kernel: ScalarKernel = field(default_factory=lambda: ScalarKernel("KroneckerDelta"))
    variant: str = "RawPqc"

    def __post_init__(self):
        c = _centres(self.centres, self.layout.state_dims)
        th = np.asarray(self.theta, dtype=float).reshape(c.shape[0], self.layout.n_action_qubits)
        if not self.kernel.is_quantum:
            raise ConfigError("RawPqc needs a quantum kernel")
        object.__setattr__(self, "centres", c)
        object.__setattr__(self, "theta", th)

    @classmethod
    def tabular(cls, layout: RegisterLayout, theta) -> "RepresenterRawPqc":
        """One Kronecker centre per grid state."""
        return cls(layout, layout.states.points(), theta)

    @property
    def params(self) -> np.ndarray:
        return self.theta.reshape(-1).copy()

    def with_params(self, theta) -> "RepresenterRawPqc":
        return replace(self, theta=np.asarray(theta, dtype=float).reshape(self.theta.shape))

    def kappa(self) -> np.ndarray:
        """(S, N) kernel values between grid states and centres."""
        return cross_gram(self.kernel, self.state_points(), self.centres)

    def _table(self, theta: np.ndarray) -> np.ndarray:
        kap = self.kappa()
        N, nq = theta.shape
        branches = np.array(list(itertools.product((0, 1), repeat=N)), dtype=float).reshape(-1, N)
        # branch weights (S, B)
        w = np.prod(np.where(branches[None, :, :] == 1, kap[:, None, :], 1.0 - kap[:, None, :]), axis=2)
        phis = branches @ theta  # (B, nq)
        p1 = np.sin(phis / 2.0) ** 2
        acts = np.arange(self.n_actions)
        bits = (acts[:, None] >> np.arange(nq)[None, :]) & 1  # (A, nq)
        pa = np.prod(np.where(bits[None, :, :] == 1, p1[:, None, :], 1.0 - p1[:, None, :]), axis=2)  # (B, A)
        return w @ pa

    def probs(self) -> np.ndarray:
        return self._table(self.theta)

    def probs_batch(self, thetas: np.ndarray) -> np.ndarray:
        """Probability tables for a stack of flat parameter vectors (B, d) -> (B, S, A)."""
        thetas = np.asarray(thetas, dtype=float).reshape(-1, *self.theta.shape)
        kap = self.kappa()
        N, nq = self.theta.shape
        branches = np.array(list(itertools.product((0, 1), repeat=N)), dtype=float).reshape(-1, N)
        w = np.prod(np.where(branches[None, :, :] == 1, kap[:, None, :], 1.0 - kap[:, None, :]), axis=2)
        phis = np.einsum("kn,bnq->bkq", branches, thetas)
        p1 = np.sin(phis / 2.0) ** 2
        acts = np.arange(self.n_actions)
        bits = (acts[:, None] >> np.arange(nq)[None, :]) & 1
        pa = np.prod(np.where(bits[None, None] == 1, p1[:, :, None, :], 1.0 - p1[:, :, None, :]), axis=3)
        return np.einsum("sk,bka->bsa", w, pa)

    def shifted_probs(self, shifts: np.ndarray) -> np.ndarray:
        return self._table(self.theta + np.asarray(shifts).reshape(self.theta.shape))

    def prob_derivatives(self) -> np.ndarray:
        """``d pi(a|s) / d theta_k`` by the parameter-shift rule, shape (S, A, d)."""
        d = self.theta.size
        out = np.zeros((self.n_states, self.n_actions, d))
        for k in range(d):
            e = np.zeros(d)
            e[k] = np.pi / 2
            out[:, :, k] = 0.5 * (self.shifted_probs(e) - self.shifted_probs(-e))
        return out

    def score(self) -> np.ndarray:
        return self._score_from_table(self.prob_derivatives())

    def circuit_probs(self, s: int) -> np.ndarray:
        grid = self.layout.states
        x = grid.decode(s)
        preps = [feature_prep(self.kernel, c, grid) for c in self.centres]
        target = feature_prep(self.kernel, x, grid)
        specs = [(f"anc{i}", _feature_qubits(P)) for i, P in enumerate(preps)] + [("a", self.layout.n_action_qubits)]
        sv = StateVector(specs)
        for i, P in enumerate(preps):
            sv.apply_inner_product_subcircuit(f"anc{i}", P, target)
        for i in range(len(preps)):
            ctl = pattern_controls(sv, f"anc{i}", 0)
            for j in range(self.layout.n_action_qubits):
                if self.theta[i, j] != 0.0:
                    sv.apply_multicontrolled_ry(sv.qubit("a", j), ctl, self.theta[i, j])
        return sv.probabilities("a")

    def representer_weights(self):
        """Least-squares ``beta`` with ``sum_a a pi(a|s) = sum_i beta_i kappa(s, c_i)``.

        Returns ``(beta, max_residual)``; the residual vanishes whenever the
        kernel matrix between grid states and centres has full row rank.
        """
        mean = self.probs() @ self.action_points()  # (S, A_dims)
        K = self.kappa()
        beta, *_ = np.linalg.lstsq(K, mean, rcond=None)
        return beta, float(np.max(np.abs(K @ beta - mean)))

    def to_dict(self) -> dict:
        return {"variant": self.variant, "centres": self.centres.tolist(), "theta": self.theta.tolist(),
                "kernel": self.kernel.to_dict()}


@dataclass(frozen=True, eq=False)
class RepresenterSoftmaxPqc(Policy):
    """Softmax over action observables ``<O_a>_s = sum_i w[a, i] <P_i>_s``.

    ``P_i = |phi(c_i)><phi(c_i)|`` on the feature register, so
    ``<P_i>_s = kappa(s, c_i)``. The Softmax-1 variant requires the centre
    states to be orthonormal so the projectors (plus the complement) partition
    the identity.
    """

    layout: RegisterLayout
    centres: np.ndarray
    weights: np.ndarray
    kernel: ScalarKernel = field(default_factory=lambda: ScalarKernel("KroneckerDelta"))
    temperature: float = 1.0
    variant: str = "SoftmaxPqc"
    shots: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("SoftmaxPqc", "Softmax1Pqc"):
            raise ConfigError(f"unknown softmax variant {self.variant!r}")
        c = _centres(self.centres, self.layout.state_dims)
        w = np.asarray(self.weights, dtype=float).reshape(self.layout.n_actions, c.shape[0])
        if not self.kernel.is_quantum:
            raise ConfigError("projector observables need a quantum kernel")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        object.__setattr__(self, "centres", c)
        object.__setattr__(self, "weights", w)
        if self.variant == "Softmax1Pqc":
            G = cross_gram(self.kernel, c, c)
            if not np.allclose(G, np.eye(c.shape[0]), atol=1e-10):
                raise ConfigError("Softmax-1 projectors need orthonormal centre states")

    @property
    def params(self) -> np.ndarray:
        return self.weights.reshape(-1).copy()

    def with_params(self, w) -> "RepresenterSoftmaxPqc":
        return replace(self, weights=np.asarray(w, dtype=float).reshape(self.weights.shape))

    def kappa(self) -> np.ndarray:
        kap = cross_gram(self.kernel, self.state_points(), self.centres)
        if self.shots:
            rng = np.random.default_rng(self.seed)
            kap = rng.binomial(self.shots, np.clip(kap, 0, 1)) / self.shots
        return kap

    def observables(self) -> np.ndarray:
        """``f(s, a) = <O_a>_s``, shape (S, A)."""
        return self.kappa() @ self.weights.T

    def probs(self) -> np.ndarray:
        f = self.temperature * self.observables()
        return np.exp(f - logsumexp(f, axis=1, keepdims=True))

    def score(self) -> np.ndarray:
        pi = self.probs()
        kap = self.kappa()
        nA, N = self.weights.shape
        eye = np.eye(nA)
        # d log pi(a|s) / d w[b, i] = T (delta_ab - pi(b|s)) kappa(s, i)
        g = self.temperature * (eye[None, :, :] - pi[:, None, :])[..., None] * kap[:, None, None, :]
        return g.reshape(self.n_states, nA, nA * N)

    def circuit_probs(self, s: int) -> np.ndarray:
        grid = self.layout.states
        x = grid.decode(s)
        target = feature_prep(self.kernel, x, grid)
        kap = np.zeros(self.centres.shape[0])
        for i, c in enumerate(self.centres):
            sv = StateVector([("f", _feature_qubits(target))])
            sv.apply_inner_product_subcircuit("f", feature_prep(self.kernel, c, grid), target)
            kap[i] = sv.projector_expectation("f", [0])
        f = self.temperature * (self.weights @ kap)
        return np.exp(f - logsumexp(f))

    def to_dict(self) -> dict:
        return {"variant": self.variant, "centres": self.centres.tolist(), "weights": self.weights.tolist(),
                "kernel": self.kernel.to_dict(), "temperature": self.temperature}


@dataclass(frozen=True, eq=False)
class SoftmaxStateAction(Policy):
    """``pi(a|s) ∝ exp(T f(s, a))`` with ``f(s, a) = sum_i beta_i K((s_i, a_i), (s, a))``."""

    layout: RegisterLayout
    centres: np.ndarray
    beta: np.ndarray
    kernel: ScalarKernel = field(default_factory=lambda: ScalarKernel("Rbf"))
    temperature: float = 1.0
    variant: str = "SoftmaxStateAction"

    def __post_init__(self):
        dims = self.layout.state_dims + self.layout.action_dims
        c = _centres(self.centres, dims)
        b = np.asarray(self.beta, dtype=float).reshape(c.shape[0])
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        object.__setattr__(self, "centres", c)
        object.__setattr__(self, "beta", b)

    @property
    def params(self) -> np.ndarray:
        return self.beta.copy()

    def with_params(self, beta) -> "SoftmaxStateAction":
        return replace(self, beta=np.asarray(beta, dtype=float))

    def joint_points(self) -> np.ndarray:
        S, A = self.state_points(), self.action_points()
        return np.concatenate([np.repeat(S, len(A), axis=0), np.tile(A, (len(S), 1))], axis=1)

    def features(self) -> np.ndarray:
        """``k(s, a)[i] = K((s_i, a_i), (s, a))``, shape (S, A, N)."""
        K = cross_gram(self.kernel, self.joint_points(), self.centres)
        return K.reshape(self.n_states, self.n_actions, -1)

    def probs(self) -> np.ndarray:
        f = self.temperature * self.features() @ self.beta
        return np.exp(f - logsumexp(f, axis=1, keepdims=True))

    def score(self) -> np.ndarray:
        k = self.features()
        pi = self.probs()
        return self.temperature * (k - np.einsum("sa,san->sn", pi, k)[:, None, :])

    def to_dict(self) -> dict:
        return {"variant": self.variant, "centres": self.centres.tolist(), "beta": self.beta.tolist(),
                "kernel": self.kernel.to_dict(), "temperature": self.temperature}


@dataclass(frozen=True, eq=False)
class GaussQkp(Policy):
    """Gaussian kernel policy ``N(mu(s), Sigma)`` discretised on the action grid.

    ``mu(s) = sum_i kappa(c_i, s) M beta_i``. The prepared wavefunction puts
    probability proportional to ``exp(-(a - mu)^T Sigma^{-1} (a - mu) / 2)``
    on every grid action, so amplitudes carry half that exponent.
    """

    layout: RegisterLayout
    centres: np.ndarray
    beta: np.ndarray
    sigma: np.ndarray
    kernel: OperatorKernel = None
    wrap: bool = False
    variant: str = "GaussQkp"

    def __post_init__(self):
        A = self.layout.action_dims
        c = _centres(self.centres, self.layout.state_dims)
        b = np.asarray(self.beta, dtype=float).reshape(c.shape[0], A)
        sig = np.broadcast_to(np.asarray(self.sigma, dtype=float), (A,)).copy()
        if np.any(sig <= 0):
            raise ContractError("covariance diagonal must be positive")
        K = self.kernel or OperatorKernel.identity(ScalarKernel("KroneckerDelta"), A)
        if K.output_dims != A:
            raise ConfigError("operator kernel output size must equal the action dimension")
        object.__setattr__(self, "centres", c)
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "sigma", sig)
        object.__setattr__(self, "kernel", K)

    @property
    def params(self) -> np.ndarray:
        return self.beta.reshape(-1).copy()

    def with_params(self, beta) -> "GaussQkp":
        return replace(self, beta=np.asarray(beta, dtype=float).reshape(self.beta.shape))

    def with_sigma(self, sigma) -> "GaussQkp":
        return replace(self, sigma=np.asarray(sigma, dtype=float))

    def kappa(self) -> np.ndarray:
        return cross_gram(self.kernel.scalar, self.state_points(), self.centres)

    def means(self) -> np.ndarray:
        """``mu(s)`` for every grid state, shape (S, A)."""
        return self.kappa() @ self.beta @ self.kernel.output_matrix.T

    def mean_action(self, s: int) -> np.ndarray:
        return self.means()[s]

    def _dim_log_probs(self, mu_row: np.ndarray) -> list[np.ndarray]:
        grid = self.layout.actions
        out = []
        for j in range(self.layout.action_dims):
            m = (mu_row[j] - grid.lo[j]) / grid.spacing[j]
            v = math.sqrt(2.0 * self.sigma[j]) / grid.spacing[j]
            out.append(2.0 * np.log(np.maximum(gaussian_amplitudes(m, v, grid.bits, self.wrap), 1e-300)))
        return out

    def probs(self) -> np.ndarray:
        mus = self.means()
        table = np.zeros((self.n_states, self.n_actions))
        for s in range(self.n_states):
            logp = np.zeros(1)
            # dimension 0 is least significant
            for lp in self._dim_log_probs(mus[s]):
                logp = (lp[:, None] + logp[None, :]).reshape(-1)
            table[s] = np.exp(logp)
        return table

    def index_params(self, s: int):
        """(mean, variance) per action dimension in index units for the ladder."""
        grid = self.layout.actions
        mu = self.means()[s]
        return (mu - grid.lo) / grid.spacing, 2.0 * self.sigma / grid.spacing**2

    def circuit_probs(self, s: int) -> np.ndarray:
        sv = StateVector([("a", self.layout.n_action_qubits)])
        m, var = self.index_params(s)
        prepare_gaussian_wavefunction(sv, "a", m, var, self.layout.actions.bits, wrap=self.wrap)
        return sv.probabilities("a")

    def discrete_means(self) -> np.ndarray:
        return self.probs() @ self.action_points()

    def score(self) -> np.ndarray:
        """Exact score of the grid policy: ``kappa(s, c_i) M^T Sigma^{-1} (a - E_pi[a|s])``."""
        A = self.action_points()
        abar = self.discrete_means()
        whitened = (A[None, :, :] - abar[:, None, :]) / self.sigma  # (S, nA, A)
        g = np.einsum("si,sab->saib", self.kappa(), whitened @ self.kernel.output_matrix)
        return g.reshape(self.n_states, self.n_actions, -1)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "centres": self.centres.tolist(), "beta": self.beta.tolist(),
                "sigma": self.sigma.tolist(), "kernel": self.kernel.scalar.to_dict(),
                "output_matrix": self.kernel.output_matrix.tolist(), "wrap": self.wrap}


def mean_action(policy: GaussQkp, s: int) -> np.ndarray:
    return policy.mean_action(s)


def policy_prob(policy: Policy, s: int, a: int, path: str = "closed") -> float:
    """``pi(a|s)`` from the closed form or from the simulated circuit."""
    if path == "closed":
        return policy.prob(s, a)
    if path == "circuit":
        return float(policy.circuit_probs(s)[a])
    raise ContractError(f"unknown path {path!r}")


def log_policy_grad_gaussian(policy: GaussQkp, s: int, a) -> np.ndarray:
    """Continuous-density ``grad_beta log N(a; mu(s), Sigma)``, shape (N, A).

    ``a`` is an action vector in real units.
    """
    if not isinstance(policy, GaussQkp):
        raise ContractError("Gaussian gradient needs a GaussQkp policy")
    if np.any(policy.sigma <= 0):
        raise ContractError("singular covariance")
    a = np.asarray(a, dtype=float).reshape(-1)
    resid = (a - policy.mean_action(s)) / policy.sigma
    return np.outer(policy.kappa()[s], policy.kernel.output_matrix.T @ resid)


def log_policy_grad_softmax(policy, s: int, a: int) -> np.ndarray:
    """``T (k(s, a) - sum_a' pi(a'|s) k(s, a'))`` in the policy's weight coordinates."""
    if isinstance(policy, (SoftmaxStateAction, RepresenterSoftmaxPqc)):
        return policy.score()[s, a]
    raise ContractError("softmax gradient needs a softmax policy")


# -- policy evaluation oracle ---------------------------------------------------------


class PolicyOracle:
    """Coherent ``|s>|0> -> |s> sum_a sqrt(pi(a|s)) |a>`` built from state-controlled ladders."""

    def __init__(self, policy: Policy):
        self.policy = policy
        self.table = policy.probs()
        self.gauss = isinstance(policy, GaussQkp)
        if self.gauss:
            self.ladders = [policy.index_params(s) for s in range(policy.n_states)]

    def __call__(self, sv: StateVector, s_reg: str, a_reg: str) -> StateVector:
        lay = self.policy.layout
        if sv.register(s_reg).size != lay.n_state_qubits or sv.register(a_reg).size != lay.n_action_qubits:
            raise ContractError("register shapes do not match the policy layout")
        if not sv.register_is_zero(a_reg):
            raise ContractError(f"action register {a_reg!r} must start in |0>")
        present = sv.probabilities(s_reg)
        for s in range(self.policy.n_states):
            if present[s] == 0.0:
                continue
            ctl = pattern_controls(sv, s_reg, s)
            if self.gauss:
                m, var = self.ladders[s]
                prepare_gaussian_wavefunction(sv, a_reg, m, var, lay.actions.bits, ctl, self.policy.wrap)
            else:
                prepare_amplitudes(sv, a_reg, self.table[s], ctl)
        return sv


def build_policy_evaluation_oracle(policy: Policy, layout: RegisterLayout | None = None) -> PolicyOracle:
    if layout is not None and (layout.n_states, layout.n_actions) != (policy.n_states, policy.n_actions):
        raise ContractError("policy and MDP layouts differ")
    return PolicyOracle(policy)


# -- bounds -------------------------------------------------------------------------------


def centre_budget(L: float, eps_k: float, a_max: float, kappa_max: float) -> int:
    """Number of centres ``ceil(L eps_k / (a_max kappa_max))``."""
    if min(L, eps_k, a_max, kappa_max) <= 0:
        raise ContractError("all inputs must be positive")
    return int(math.ceil(L * eps_k / (a_max * kappa_max) - 1e-12))


def _row_sum_norm(M: np.ndarray) -> float:
    return float(np.max(np.abs(M).sum(axis=1)))


def bound_B1(policy, delta: float, finite_grid: bool = False) -> float:
    """l1 bound on ``grad log pi`` holding with probability ``1 - delta``.

    Gaussian policies: ``A N Z_{1-delta/(2A)} kappa_max / min_j sqrt(Sigma_jj)``
    (with ``Sigma = I`` this is the familiar ``A N Z kappa_max``); with
    ``finite_grid`` the deterministic bound from the grid's action range is used.
    Softmax-1 policies: ``2 T`` because the projector expectations sum to at most one.
    """
    if isinstance(policy, GaussQkp):
        A, N = policy.layout.action_dims, policy.centres.shape[0]
        kmax = policy.kernel.scalar.kappa_max if N else 0.0
        mnorm = _row_sum_norm(policy.kernel.output_matrix)
        if finite_grid:
            width = policy.layout.actions.hi - policy.layout.actions.lo
            return float(N * kmax * mnorm * np.sum(width / policy.sigma))
        z = norm.ppf(1.0 - delta / (2.0 * A))
        return float(A * N * z * kmax * mnorm / np.sqrt(policy.sigma.min()))
    if isinstance(policy, RepresenterSoftmaxPqc) and policy.variant == "Softmax1Pqc":
        return 2.0 * policy.temperature
    raise ContractError("B1 bound is defined for GaussQkp and Softmax1Pqc policies")


def empirical_B1_violation_rate(policy: GaussQkp, delta: float, n: int, rng: np.random.Generator) -> float:
    """Fraction of continuous Gaussian draws whose ``||grad log pi||_1`` exceeds the bound."""
    bound = bound_B1(policy, delta)
    states = rng.integers(policy.n_states, size=n)
    mus = policy.means()[states]
    a = mus + rng.standard_normal(mus.shape) * np.sqrt(policy.sigma)
    resid = ((a - mus) / policy.sigma) @ policy.kernel.output_matrix  # (n, A)
    kap = policy.kappa()[states]
    l1 = np.abs(kap).sum(axis=1) * np.abs(resid).sum(axis=1)
    return float(np.mean(l1 > bound))


def bound_sigma_nabla(policy: GaussQkp, p: float) -> float:
    """p-norm of the per-coordinate standard-deviation bound ``kappa_max / sqrt(Sigma_jj)``."""
    if not isinstance(policy, GaussQkp):
        raise ContractError("sigma bound needs a GaussQkp policy")
    N = policy.centres.shape[0]
    ent = np.tile(policy.kernel.scalar.kappa_max / np.sqrt(policy.sigma), (N, 1))
    if np.isinf(p):
        return float(ent.max())
    return float(np.sum(ent**p) ** (1.0 / p))


def higher_order_derivative(policy: RepresenterRawPqc, alpha) -> np.ndarray:
    """``d^alpha pi`` via the nested parameter-shift expansion, shape (S, A)."""
    alpha = list(alpha)
    p = len(alpha)
    d = policy.theta.size
    out = np.zeros((policy.n_states, policy.n_actions))
    for signs in itertools.product((1, -1), repeat=p):
        shift = np.zeros(d)
        for sg, k in zip(signs, alpha):
            shift[k] += sg * np.pi / 2
        out += np.prod(signs) * policy.shifted_probs(shift)
    return out / 2**p


def check_higher_order_bound(policy: RepresenterRawPqc, p: int, trials: int, rng: np.random.Generator) -> float:
    """Largest ``sum_a |d^alpha pi(a|s)|`` over random angles, multi-indices and states."""
    if not isinstance(policy, RepresenterRawPqc):
        raise ContractError("the shift-rule bound applies to RawPqc policies")
    if not 0 <= p <= 3:
        raise ContractError("order p must lie in [0, 3]")
    worst = 0.0
    d = policy.theta.size
    for _ in range(trials):
        pol = policy.with_params(rng.uniform(0, 2 * np.pi, d))
        alpha = rng.integers(d, size=p)
        worst = max(worst, float(np.abs(higher_order_derivative(pol, alpha)).sum(axis=1).max()))
    return worst


# -- serialization ------------------------------------------------------------------------


def policy_from_dict(d: dict, layout: RegisterLayout) -> Policy:
    v = d.get("variant")
    kern = ScalarKernel.from_dict(d["kernel"]) if "kernel" in d else None
    try:
        if v == "RawPqc":
            centres = d.get("centres", layout.states.points().tolist())
            return RepresenterRawPqc(layout, centres, d["theta"], kern or ScalarKernel("KroneckerDelta"))
        if v in ("SoftmaxPqc", "Softmax1Pqc"):
            return RepresenterSoftmaxPqc(layout, d["centres"], d["weights"], kern or ScalarKernel("KroneckerDelta"),
                                         float(d.get("temperature", 1.0)), v, d.get("shots"))
        if v == "SoftmaxStateAction":
            return SoftmaxStateAction(layout, d["centres"], d["beta"], kern or ScalarKernel("Rbf"),
                                      float(d.get("temperature", 1.0)))
        if v == "GaussQkp":
            centres = d.get("centres", layout.states.points().tolist())
            N = len(centres)
            beta = d.get("beta", np.zeros((N, layout.action_dims)).tolist())
            M = d.get("output_matrix")
            K = OperatorKernel(kern or ScalarKernel("KroneckerDelta"),
                               np.eye(layout.action_dims) if M is None else np.asarray(M))
            return GaussQkp(layout, centres, beta, d.get("sigma", 1.0), K, bool(d.get("wrap", False)))
    except KeyError as exc:
        raise ConfigError(f"policy spec is missing {exc.args[0]!r}") from None
    raise ConfigError(f"unknown policy variant {v!r}")
