"""Occupancy distributions: exact forward recursion, a classical sampler and
coin-ladder circuit oracles.

Coin convention: each step owns one coin qubit prepared by
``R_Y(2 asin(sqrt(gamma)))``, so ``|1>`` (probability ``gamma``) means
"continue" and ``|0>`` means "stop here". The pair ``(s_t, a_t)`` is copied to
the output register when coins ``0..t-1`` read ``1`` and coin ``t`` reads
``0``. The branch where every coin reads ``1`` copies nothing and leaves the
residual mass ``gamma^T`` on the output value 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BudgetError, ConfigError, ContractError
from .gradest_analytical import BinaryOracle
from .qmdp import QueryLedger, TabularMdp, TrajectoryRegisters, oracle_trajectory, policy_table, state_action_marginals
from .statevector import MAX_QUBITS, StateVector

SUM_TOL = 1e-12


@dataclass(frozen=True)
class OccupancyDistribution:
    """``weights = (1 - gamma) sum_{t<T} gamma^t P_t`` plus the no-return atom ``residual = gamma^T``.

    ``weights`` has shape (S, A) for state-action occupancy or (S,) for state
    occupancy.
    """

    weights: np.ndarray
    residual: float
    horizon: int
    gamma: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < -SUM_TOL):
            raise ContractError("occupancy weights must be non-negative")
        if abs(w.sum() + self.residual - 1.0) > SUM_TOL:
            raise ContractError("occupancy weights plus residual must sum to 1")
        object.__setattr__(self, "weights", w)

    @property
    def measure(self) -> np.ndarray:
        """Discounted visitation ``nu = weights / (1 - gamma)``."""
        return self.weights / (1.0 - self.gamma)

    def state_marginal(self) -> "OccupancyDistribution":
        if self.weights.ndim == 1:
            return self
        return OccupancyDistribution(self.weights.sum(axis=1), self.residual, self.horizon, self.gamma)

    def branch_probs(self) -> np.ndarray:
        """Flat output-register distribution with the residual folded onto index 0."""
        p = self.weights.reshape(-1).copy()
        p[0] += self.residual
        return p


def exact_occupancy(mdp: TabularMdp, policy) -> OccupancyDistribution:
    M = state_action_marginals(mdp, policy)
    disc = (1.0 - mdp.gamma) * mdp.gamma ** np.arange(mdp.horizon)
    w = np.tensordot(disc, M, axes=1) if mdp.horizon else np.zeros((mdp.n_states, mdp.n_actions))
    return OccupancyDistribution(w, mdp.gamma**mdp.horizon, mdp.horizon, mdp.gamma)


def _tail_returns(mdp: TabularMdp, pi: np.ndarray, s: np.ndarray, a: np.ndarray, rng: np.random.Generator,
                  length: int) -> np.ndarray:
    """Discounted return of ``length`` steps that start with the pair ``(s, a)``."""
    nS, nA = mdp.n_states, mdp.n_actions
    cum_pi = np.cumsum(pi, axis=1)
    cum_P = np.cumsum(mdp.P, axis=2)
    ret = np.zeros(s.size)
    s, a = s.copy(), a.copy()
    for k in range(length):
        ret += mdp.gamma**k * mdp.r[s, a]
        if k + 1 < length:
            s = np.minimum((rng.random(s.size)[:, None] > cum_P[s, a]).sum(axis=1), nS - 1)
            a = np.minimum((rng.random(s.size)[:, None] > cum_pi[s]).sum(axis=1), nA - 1)
    return ret


def classical_occupancy_samples(mdp: TabularMdp, policy, n: int, rng: np.random.Generator,
                                ledger: QueryLedger | None = None, tail: bool = True):
    """Vectorised occupancy sampler.

    Returns arrays ``(s, a, returned, tail_return)``. Unreturned samples carry
    ``s = a = 0`` and a zero tail return, mirroring the circuit's residual
    branch. Each sample costs at most ``2T`` environment steps.
    """
    pi = policy_table(policy)
    T = mdp.horizon
    nS, nA = mdp.n_states, mdp.n_actions
    cum_pi = np.cumsum(pi, axis=1)
    cum_P = np.cumsum(mdp.P, axis=2)
    s = rng.choice(nS, size=n, p=mdp.d0)
    out_s = np.zeros(n, dtype=np.int64)
    out_a = np.zeros(n, dtype=np.int64)
    returned = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    steps = 0
    for t in range(T):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        a = np.minimum((rng.random(idx.size)[:, None] > cum_pi[s[idx]]).sum(axis=1), nA - 1)
        steps += idx.size
        stop = rng.random(idx.size) >= mdp.gamma
        hit = idx[stop]
        out_s[hit], out_a[hit] = s[hit], a[stop]
        returned[hit] = True
        active[hit] = False
        go = idx[~stop]
        if t + 1 < T and go.size:
            s[go] = np.minimum((rng.random(go.size)[:, None] > cum_P[s[go], a[~stop]]).sum(axis=1), nS - 1)
    tail_ret = np.zeros(n)
    if tail and returned.any():
        h = np.nonzero(returned)[0]
        tail_ret[h] = _tail_returns(mdp, pi, out_s[h], out_a[h], rng, T)
        steps += h.size * T
    if ledger is not None:
        ledger.add("classical_steps", steps)
    return out_s, out_a, returned, tail_ret


def classical_occupancy_sample(mdp: TabularMdp, policy, rng: np.random.Generator, ledger: QueryLedger | None = None):
    """One draw ``(s, a, returned, tail_return)`` of the occupancy sampler."""
    s, a, ret, tail = classical_occupancy_samples(mdp, policy, 1, rng, ledger)
    return int(s[0]), int(a[0]), bool(ret[0]), float(tail[0])


def empirical_occupancy(s, a, returned, n_states: int, n_actions: int) -> np.ndarray:
    """Flat output-register frequencies, with unreturned samples counted on index 0."""
    counts = np.zeros(n_states * n_actions)
    np.add.at(counts, np.where(returned, s * n_actions + a, 0), 1.0)
    return counts / max(len(s), 1)


# -- circuit oracles -------------------------------------------------------------------


def coin_angle(gamma: float) -> float:
    return 2.0 * math.asin(math.sqrt(gamma))


def occupancy_circuit(mdp: TabularMdp, policy, with_actions: bool = True,
                      ledger: QueryLedger | None = None) -> StateVector:
    """Run the coin-ladder circuit and return the full statevector.

    Output registers are ``zs`` (and ``za`` when ``with_actions``).
    """
    from .policies import build_policy_evaluation_oracle

    lay = mdp.layout
    T = mdp.horizon
    regs = TrajectoryRegisters.allocate(T)
    specs = regs.specs(lay) + [("coin", T), ("zs", lay.n_state_qubits)]
    if with_actions:
        specs.append(("za", lay.n_action_qubits))
    try:
        sv = StateVector(specs, MAX_QUBITS)
    except BudgetError as exc:
        raise ConfigError(f"occupancy circuit exceeds the qubit cap: {exc}") from None
    oracle_trajectory(sv, regs, mdp, build_policy_evaluation_oracle(policy, lay), ledger)
    phi = coin_angle(mdp.gamma)
    for t in range(T):
        sv.apply_multicontrolled_ry(sv.qubit("coin", t), None, phi)
    for t in range(T):
        pattern = {sv.qubit("coin", k): 1 for k in range(t)}
        pattern[sv.qubit("coin", t)] = 0
        pairs = [(regs.states[t], "zs")]
        if with_actions:
            pairs.append((regs.actions[t], "za"))
        for src, dst in pairs:
            for b in range(sv.register(src).size):
                sv.apply_multicontrolled_x(sv.qubit(dst, b), {**pattern, sv.qubit(src, b): 1})
    if ledger is not None:
        ledger.add("occupancy_oracle")
    return sv


def _occupancy_oracle(mdp, policy, payload, with_actions: bool, label: str, ledger) -> BinaryOracle:
    sv = occupancy_circuit(mdp, policy, with_actions, ledger)
    names = ["za", "zs"] if with_actions else ["zs"]
    # first name least significant: index = s * A + a
    probs = sv.probabilities(names)
    if with_actions:
        probs = probs.reshape(1 << mdp.layout.n_state_qubits, 1 << mdp.layout.n_action_qubits)
        probs = probs[: mdp.n_states, : mdp.n_actions].reshape(-1)
    else:
        probs = probs[: mdp.n_states]
    X = np.asarray(payload, dtype=complex if np.iscomplexobj(payload) else float)
    X = X.reshape(probs.size, -1)
    oracle = BinaryOracle(probs / probs.sum(), X, label=label, calls_per_query=mdp.horizon)
    oracle.meta.update({"residual": mdp.gamma**mdp.horizon, "zero_payload": oracle.payload[0].copy(),
                        "gamma": mdp.gamma, "horizon": mdp.horizon, "statevector": sv})
    return oracle


def build_state_action_occupancy_oracle(mdp: TabularMdp, policy, payload, ledger: QueryLedger | None = None) -> BinaryOracle:
    """Binary oracle over output pairs ``(s, a)``; ``payload`` has shape (S, A, d) or (S, A)."""
    X = np.asarray(payload)
    if X.shape[:2] != (mdp.n_states, mdp.n_actions):
        raise ContractError(f"payload must start with shape {(mdp.n_states, mdp.n_actions)}")
    return _occupancy_oracle(mdp, policy, X.reshape(mdp.n_states * mdp.n_actions, -1), True, "state-action-occupancy", ledger)


def build_state_occupancy_oracle(mdp: TabularMdp, policy, payload, ledger: QueryLedger | None = None) -> BinaryOracle:
    """Binary oracle over output states ``s``; ``payload`` has shape (S, d) or (S,)."""
    X = np.asarray(payload)
    if X.shape[0] != mdp.n_states:
        raise ContractError(f"payload must have {mdp.n_states} rows")
    return _occupancy_oracle(mdp, policy, X.reshape(mdp.n_states, -1), False, "state-occupancy", ledger)


def residual_correction(raw, zero_payload, gamma: float, T: int):
    """``(raw - gamma^T X(0)) / (1 - gamma)``: turns a raw oracle mean into ``sum nu X``."""
    if not 0 <= gamma < 1:
        raise ContractError("gamma must lie in [0, 1)")
    return (np.asarray(raw, dtype=float) - gamma**T * np.asarray(zero_payload, dtype=float)) / (1.0 - gamma)


def occupancy_expectation(mdp: TabularMdp, policy, payload) -> np.ndarray:
    """Exact ``sum_z nu(z) X(z)`` for a payload over (S, A, ...) or (S, ...)."""
    occ = exact_occupancy(mdp, policy)
    X = np.asarray(payload, dtype=float)
    w = occ.measure if X.shape[:2] == (mdp.n_states, mdp.n_actions) else occ.measure.sum(axis=1)
    return np.tensordot(w, X, axes=w.ndim)
