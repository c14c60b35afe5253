"""Tabular MDPs with coherent oracle access and exact ground-truth solvers.

Policies are duck-typed: anything with ``probs() -> (n_states, n_actions)``
works for the classical routines; gradient routines additionally use
``params``, ``with_params(theta)`` and ``score() -> (n_states, n_actions, d)``.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .encoding import FixedPointGrid, RegisterLayout
from .errors import ConfigError, ConsistencyError, ContractError, RangeError
from .statevector import StateVector, pattern_controls, prepare_amplitudes

STOCHASTIC_TOL = 1e-12
MAX_TRAJECTORIES = 1 << 20


class QueryLedger:
    """Counts oracle calls by kind; ``interaction`` counts (policy, transition) pairs."""

    def __init__(self):
        self.counts: Counter = Counter()

    def add(self, kind: str, n: int = 1) -> None:
        if n < 0:
            raise ContractError("ledger counts never decrease")
        self.counts[kind] += int(n)

    def merge(self, other: "QueryLedger") -> None:
        for k, v in other.counts.items():
            self.counts[k] += v

    @property
    def total(self) -> int:
        return int(sum(self.counts.values()))

    def __getitem__(self, kind: str) -> int:
        return int(self.counts.get(kind, 0))

    def as_dict(self) -> dict:
        return {k: int(v) for k, v in sorted(self.counts.items())}

    def __repr__(self) -> str:
        return f"QueryLedger({self.as_dict()})"


def _record(ledger: QueryLedger | None, kind: str, n: int = 1) -> None:
    if ledger is not None:
        ledger.add(kind, n)


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite-horizon MDP on the grid of a :class:`RegisterLayout`."""

    layout: RegisterLayout
    P: np.ndarray
    r: np.ndarray
    gamma: float
    horizon: int
    d0: np.ndarray | None = None
    r_max: float | None = None
    name: str = field(default="mdp")

    def __post_init__(self):
        nS, nA = self.layout.n_states, self.layout.n_actions
        P = np.asarray(self.P, dtype=float)
        r = np.asarray(self.r, dtype=float)
        if P.shape != (nS, nA, nS):
            raise ConfigError(f"P must have shape {(nS, nA, nS)}, got {P.shape}")
        if r.shape != (nS, nA):
            raise ConfigError(f"r must have shape {(nS, nA)}, got {r.shape}")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > STOCHASTIC_TOL):
            raise ConfigError("every row P(.|s,a) must be a probability vector")
        d0 = np.zeros(nS) if self.d0 is None else np.asarray(self.d0, dtype=float)
        if self.d0 is None:
            d0[0] = 1.0
        if d0.shape != (nS,) or np.any(d0 < 0) or abs(d0.sum() - 1.0) > STOCHASTIC_TOL:
            raise ConfigError("d0 must be a probability vector over states")
        r_max = self.layout.reward_max if self.r_max is None else float(self.r_max)
        if np.any(r < 0) or np.any(r > r_max + 1e-12):
            raise ConfigError(f"rewards must lie in [0, r_max={r_max}]")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.horizon < 0:
            raise ConfigError("horizon must be non-negative")
        for nm, val in (("P", P), ("r", r), ("d0", d0)):
            val.setflags(write=False)
            object.__setattr__(self, nm, val)
        object.__setattr__(self, "r_max", r_max)
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.layout.n_states

    @property
    def n_actions(self) -> int:
        return self.layout.n_actions

    @property
    def value_max(self) -> float:
        """Largest possible discounted T-step return."""
        return self.r_max * discount_sum(self.gamma, self.horizon)

    def with_horizon(self, T: int) -> "TabularMdp":
        return TabularMdp(self.layout, self.P, self.r, self.gamma, T, self.d0, self.r_max, self.name)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "layout": self.layout.to_dict(),
            "P": self.P.tolist(),
            "r": self.r.tolist(),
            "d0": self.d0.tolist(),
            "gamma": self.gamma,
            "horizon": self.horizon,
            "r_max": self.r_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularMdp":
        missing = [k for k in ("layout", "P", "r", "gamma", "horizon") if k not in d]
        if missing:
            raise ConfigError(f"MDP spec is missing {', '.join(missing)}")
        return cls(
            layout=RegisterLayout.from_dict(d["layout"]),
            P=np.asarray(d["P"], dtype=float),
            r=np.asarray(d["r"], dtype=float),
            gamma=float(d["gamma"]),
            horizon=int(d["horizon"]),
            d0=None if d.get("d0") is None else np.asarray(d["d0"], dtype=float),
            r_max=d.get("r_max"),
            name=str(d.get("name", "mdp")),
        )


def load_mdp(path: str | Path) -> TabularMdp:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"MDP file not found: {path}")
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return TabularMdp.from_dict(spec)


def save_mdp(mdp: TabularMdp, path: str | Path) -> None:
    Path(path).write_text(json.dumps(mdp.to_dict(), indent=2) + "\n")


def discount_sum(gamma: float, T: int) -> float:
    return float(sum(gamma**t for t in range(T)))


def policy_table(policy) -> np.ndarray:
    """Probability table of a policy object, or the argument itself if it is an array."""
    table = policy.probs() if hasattr(policy, "probs") else np.asarray(policy, dtype=float)
    return np.asarray(table, dtype=float)


# -- exact dynamic programming -------------------------------------------------

def q_tables(mdp: TabularMdp, policy) -> np.ndarray:
    """Remaining-horizon action values ``Q[t, s, a]`` for ``t = 0..T-1``."""
    pi = policy_table(policy)
    T = mdp.horizon
    Q = np.zeros((T, mdp.n_states, mdp.n_actions))
    V = np.zeros(mdp.n_states)
    for t in reversed(range(T)):
        Q[t] = mdp.r + mdp.gamma * mdp.P @ V
        V = np.sum(pi * Q[t], axis=1)
    return Q


def exact_value(mdp: TabularMdp, policy) -> float:
    """Expected discounted T-step return from ``d0`` by backward recursion."""
    pi = policy_table(policy)
    V = np.zeros(mdp.n_states)
    for _ in range(mdp.horizon):
        V = np.sum(pi * (mdp.r + mdp.gamma * mdp.P @ V), axis=1)
    return float(mdp.d0 @ V)


def exact_value_batch(mdp: TabularMdp, tables: np.ndarray) -> np.ndarray:
    """``exact_value`` for a stack of probability tables of shape (B, S, A)."""
    tables = np.asarray(tables, dtype=float)
    V = np.zeros((tables.shape[0], mdp.n_states))
    for _ in range(mdp.horizon):
        Q = mdp.r[None] + mdp.gamma * np.einsum("sap,bp->bsa", mdp.P, V)
        V = np.sum(tables * Q, axis=2)
    return V @ mdp.d0


def optimal_value(mdp: TabularMdp) -> float:
    """Finite-horizon optimum by value iteration over deterministic policies."""
    V = np.zeros(mdp.n_states)
    for _ in range(mdp.horizon):
        V = np.max(mdp.r + mdp.gamma * mdp.P @ V, axis=1)
    return float(mdp.d0 @ V)


def state_action_marginals(mdp: TabularMdp, policy) -> np.ndarray:
    """``M[t, s, a] = P(s_t = s, a_t = a)`` for ``t < T`` by forward recursion."""
    pi = policy_table(policy)
    T = mdp.horizon
    M = np.zeros((T, mdp.n_states, mdp.n_actions))
    ps = mdp.d0.copy()
    for t in range(T):
        M[t] = ps[:, None] * pi
        ps = np.einsum("sa,sap->p", M[t], mdp.P)
    return M


# -- trajectory enumeration -----------------------------------------------------

@dataclass
class TrajectoryTable:
    states: np.ndarray  # (M, T)
    actions: np.ndarray  # (M, T)
    probs: np.ndarray  # (M,)
    returns: np.ndarray  # (M,)

    def __len__(self) -> int:
        return self.probs.size


def enumerate_trajectories(mdp: TabularMdp, policy, T: int | None = None, prune: bool = True) -> TrajectoryTable:
    """All length-T trajectories with their probability and discounted return.

    With ``prune`` zero-probability trajectories are dropped.
    """
    pi = policy_table(policy)
    T = mdp.horizon if T is None else T
    nS, nA = mdp.n_states, mdp.n_actions
    if (nS * nA) ** T * nS > MAX_TRAJECTORIES * nS:
        raise ConfigError("trajectory space too large to enumerate")
    states = np.arange(nS)[:, None]
    actions = np.zeros((nS, 0), dtype=np.int64)
    probs = mdp.d0.copy()
    rets = np.zeros(nS)
    for t in range(T):
        if t > 0:
            prev_s, prev_a = states[:, -1], actions[:, -1]
            trans = mdp.P[prev_s, prev_a]  # (M, nS)
            M = probs.size
            states = np.concatenate([np.repeat(states, nS, axis=0), np.tile(np.arange(nS), M)[:, None]], axis=1)
            actions = np.repeat(actions, nS, axis=0)
            probs = (probs[:, None] * trans).reshape(-1)
            rets = np.repeat(rets, nS)
            if prune:
                keep = probs > 0
                states, actions, probs, rets = states[keep], actions[keep], probs[keep], rets[keep]
        s = states[:, -1]
        M = probs.size
        states = np.repeat(states, nA, axis=0)
        actions = np.concatenate([np.repeat(actions, nA, axis=0), np.tile(np.arange(nA), M)[:, None]], axis=1)
        probs = (probs[:, None] * pi[s]).reshape(-1)
        rets = (rets[:, None] + mdp.gamma**t * mdp.r[s]).reshape(-1)
        if prune:
            keep = probs > 0
            states, actions, probs, rets = states[keep], actions[keep], probs[keep], rets[keep]
    if T == 0:
        return TrajectoryTable(np.zeros((1, 0), dtype=np.int64), np.zeros((1, 0), dtype=np.int64), np.ones(1), np.zeros(1))
    return TrajectoryTable(states, actions, probs, rets)


def likelihood_ratio_gradient(mdp: TabularMdp, policy) -> np.ndarray:
    """``sum_tau P(tau) R(tau) sum_t grad log pi(a_t|s_t)`` by full enumeration."""
    traj = enumerate_trajectories(mdp, policy)
    score = np.asarray(policy.score())  # (S, A, d)
    total_score = score[traj.states, traj.actions].sum(axis=1)  # (M, d)
    return (traj.probs * traj.returns) @ total_score


def finite_difference_gradient(mdp: TabularMdp, policy, h: float = 1e-5) -> np.ndarray:
    theta = np.asarray(policy.params, dtype=float)
    g = np.zeros(theta.size)
    for i in range(theta.size):
        e = np.zeros(theta.size)
        e[i] = h
        g[i] = (exact_value(mdp, policy.with_params(theta + e)) - exact_value(mdp, policy.with_params(theta - e))) / (2 * h)
    return g


def exact_policy_gradient(mdp: TabularMdp, policy, h: float = 1e-5, tol: float = 1e-4) -> np.ndarray:
    """Gradient of ``exact_value`` in the policy parameters.

    Central differences and likelihood-ratio enumeration are computed
    independently; a disagreement larger than ``tol`` raises.
    """
    theta = np.asarray(policy.params, dtype=float)
    if theta.size > 64:
        raise ContractError("exact_policy_gradient supports at most 64 parameters")
    fd = finite_difference_gradient(mdp, policy, h)
    lr = likelihood_ratio_gradient(mdp, policy)
    gap = float(np.max(np.abs(fd - lr))) if fd.size else 0.0
    if gap > tol:
        raise ConsistencyError(f"finite differences and likelihood ratio disagree by {gap:.3e}")
    return lr


def sample_trajectories(mdp: TabularMdp, policy, n: int, rng: np.random.Generator, length: int | None = None,
                        ledger: QueryLedger | None = None):
    """Draw ``n`` rollouts; returns integer arrays ``states, actions`` and ``rewards``, each (n, length)."""
    pi = policy_table(policy)
    L = mdp.horizon if length is None else int(length)
    nS, nA = mdp.n_states, mdp.n_actions
    states = np.zeros((n, L), dtype=np.int64)
    actions = np.zeros((n, L), dtype=np.int64)
    cum_pi = np.cumsum(pi, axis=1)
    cum_P = np.cumsum(mdp.P, axis=2)
    s = rng.choice(nS, size=n, p=mdp.d0)
    for t in range(L):
        u = rng.random(n)
        a = np.minimum((u[:, None] > cum_pi[s]).sum(axis=1), nA - 1)
        states[:, t], actions[:, t] = s, a
        if t + 1 < L:
            u = rng.random(n)
            s = np.minimum((u[:, None] > cum_P[s, a]).sum(axis=1), nS - 1)
    _record(ledger, "classical_steps", n * L)
    return states, actions, mdp.r[states, actions]


# -- coherent oracles ---------------------------------------------------------------

def _check_zero(sv: StateVector, name: str) -> None:
    if not sv.register_is_zero(name):
        raise ContractError(f"register {name!r} must start in |0>")


def _check_width(sv: StateVector, name: str, width: int) -> None:
    if sv.register(name).size != width:
        raise ContractError(f"register {name!r} has {sv.register(name).size} qubits, expected {width}")


def oracle_init(sv: StateVector, s_reg: str, mdp: TabularMdp, ledger: QueryLedger | None = None) -> StateVector:
    """``|0> -> sum_s sqrt(d0(s)) |s>``."""
    _check_width(sv, s_reg, mdp.layout.n_state_qubits)
    _check_zero(sv, s_reg)
    prepare_amplitudes(sv, s_reg, mdp.d0)
    _record(ledger, "init")
    return sv


def oracle_transition(sv: StateVector, s_reg: str, a_reg: str, next_reg: str, mdp: TabularMdp,
                      ledger: QueryLedger | None = None) -> StateVector:
    """``|s>|a>|0> -> |s>|a> sum_s' sqrt(P(s'|s,a)) |s'>``."""
    lay = mdp.layout
    _check_width(sv, s_reg, lay.n_state_qubits)
    _check_width(sv, a_reg, lay.n_action_qubits)
    _check_width(sv, next_reg, lay.n_state_qubits)
    _check_zero(sv, next_reg)
    joint = sv.probabilities([s_reg, a_reg]).reshape(mdp.n_actions, mdp.n_states)
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            if joint[a, s] == 0.0:
                continue
            ctl = {**pattern_controls(sv, s_reg, s), **pattern_controls(sv, a_reg, a)}
            prepare_amplitudes(sv, next_reg, mdp.P[s, a], ctl)
    _record(ledger, "transition")
    return sv


def oracle_reward(sv: StateVector, s_reg: str, a_reg: str, r_reg: str, mdp: TabularMdp,
                  ledger: QueryLedger | None = None) -> StateVector:
    """``|s>|a>|0> -> |s>|a>|r(s,a)>`` with ``r`` in the layout's reward fixed point."""
    grid = mdp.layout.rewards
    _check_width(sv, r_reg, grid.n_qubits)
    _check_zero(sv, r_reg)
    if np.any(mdp.r > grid.hi[0] + 1e-12):
        raise ConfigError("reward exceeds the reward register range")
    codes = np.array([[grid.encode([mdp.r[s, a]]) for a in range(mdp.n_actions)] for s in range(mdp.n_states)])
    sv.apply_classical_function([s_reg, a_reg], r_reg, lambda v: codes[v[0], v[1]])
    _record(ledger, "reward")
    return sv


@dataclass(frozen=True)
class TrajectoryRegisters:
    states: tuple[str, ...]
    actions: tuple[str, ...]

    @classmethod
    def allocate(cls, T: int, prefix: str = "") -> "TrajectoryRegisters":
        return cls(tuple(f"{prefix}s{t}" for t in range(T)), tuple(f"{prefix}a{t}" for t in range(T)))

    def specs(self, layout: RegisterLayout) -> list[tuple[str, int]]:
        out = []
        for s, a in zip(self.states, self.actions):
            out += [(s, layout.n_state_qubits), (a, layout.n_action_qubits)]
        return out


def return_grid(mdp: TabularMdp, bits: int) -> FixedPointGrid:
    hi = mdp.value_max if mdp.value_max > 0 else 1.0
    return FixedPointGrid.build(1, bits, (0.0, hi))


def oracle_trajectory(sv: StateVector, regs: TrajectoryRegisters, mdp: TabularMdp, policy_oracle: Callable,
                      ledger: QueryLedger | None = None) -> StateVector:
    """Prepare ``sum_tau sqrt(P(tau)) |tau>`` with T calls to the policy oracle and T-1 transitions.

    ``policy_oracle(sv, s_reg, a_reg)`` must map ``|s>|0> -> |s> sum_a sqrt(pi(a|s)) |a>``.
    """
    T = len(regs.states)
    for nm in regs.states + regs.actions:
        _check_zero(sv, nm)
    if T == 0:
        return sv
    oracle_init(sv, regs.states[0], mdp, ledger)
    for t in range(T):
        if t > 0:
            oracle_transition(sv, regs.states[t - 1], regs.actions[t - 1], regs.states[t], mdp, ledger)
        policy_oracle(sv, regs.states[t], regs.actions[t])
        _record(ledger, "policy")
        _record(ledger, "interaction")
    _record(ledger, "trajectory")
    return sv


def oracle_return(sv: StateVector, regs: TrajectoryRegisters, ret_reg: str, mdp: TabularMdp,
                  grid: FixedPointGrid | None = None, ledger: QueryLedger | None = None) -> StateVector:
    """Write the fixed-point discounted return of every trajectory branch into ``ret_reg``."""
    grid = grid or return_grid(mdp, sv.register(ret_reg).size)
    _check_width(sv, ret_reg, grid.n_qubits)
    _check_zero(sv, ret_reg)
    gam = mdp.gamma ** np.arange(len(regs.states))

    def fn(vals):
        T = len(regs.states)
        s, a = vals[:T], vals[T:]
        R = (gam[:, None] * mdp.r[s, a]).sum(axis=0) if T else np.zeros(vals.shape[1])
        if np.any(R > grid.hi[0] + 1e-9):
            raise ConfigError("discounted return overflows the return register")
        return np.floor((R - grid.lo[0]) / grid.spacing[0] + 0.5).astype(np.int64)

    try:
        sv.apply_classical_function(list(regs.states) + list(regs.actions), ret_reg, fn)
    except RangeError as exc:
        raise ConfigError(str(exc)) from None
    _record(ledger, "return")
    return sv


def trajectory_distribution(sv: StateVector, regs: TrajectoryRegisters, mdp: TabularMdp) -> dict:
    """Map ``(states tuple, actions tuple) -> probability`` read from the statevector."""
    names = []
    for s, a in zip(regs.states, regs.actions):
        names += [s, a]
    p = sv.probabilities(names)
    out = {}
    sq, aq = mdp.layout.n_state_qubits, mdp.layout.n_action_qubits
    for idx in np.nonzero(p > 0)[0]:
        shift, ss, aa = 0, [], []
        for _ in regs.states:
            ss.append((int(idx) >> shift) & ((1 << sq) - 1))
            shift += sq
            aa.append((int(idx) >> shift) & ((1 << aq) - 1))
            shift += aq
        out[(tuple(ss), tuple(aa))] = float(p[idx])
    return out


def mdp_from_arrays(P, r, gamma: float, horizon: int, bits_per_dim: int = 1, state_dims: int | None = None,
                    action_dims: int | None = None, d0=None, **layout_kw) -> TabularMdp:
    """Convenience constructor that infers a one-dimension-per-register layout from array shapes."""
    P = np.asarray(P, dtype=float)
    nS, nA = P.shape[0], P.shape[1]

    def dims_for(n, given):
        if given is not None:
            return given
        if n == 1:
            return 0
        q = int(round(np.log2(n)))
        if 1 << q != n or q % bits_per_dim:
            raise ConfigError(f"{n} is not a power of 2**{bits_per_dim}")
        return q // bits_per_dim

    layout_kw.setdefault("reward_max", float(max(np.max(r), 1.0)))
    layout = RegisterLayout(dims_for(nS, state_dims), dims_for(nA, action_dims), bits_per_dim, **layout_kw)
    return TabularMdp(layout, P, np.asarray(r, dtype=float), gamma, horizon, d0)


def random_mdp(n_states: int, n_actions: int, gamma: float, horizon: int, rng: np.random.Generator,
               deterministic: bool = False, d0: Sequence[float] | None = None) -> TabularMdp:
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    if deterministic:
        P = np.eye(n_states)[rng.integers(n_states, size=(n_states, n_actions))]
    r = rng.random((n_states, n_actions))
    return mdp_from_arrays(P, r, gamma, horizon, d0=d0, reward_max=1.0)
