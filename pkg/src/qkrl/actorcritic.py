"""Compatible kernel critics and the stochastic (CQRAC) and deterministic
(DCQRAC) quantum actor-critic training loops.

Stochastic critic: ``Qhat(s, a) = psi(s, a) . w`` where ``psi`` is the exact
score of the grid Gaussian policy, i.e. ``kappa(s, .) M^T Sigma^{-1} (a - E_pi[a|s])``.
Deterministic critic: ``Qhat(s, a) = sum_i kappa(s, c_i) w_i^T M (a - mu(s)) + v^T phi(s)``
with one-hot state features ``phi``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError
from .gradest_analytical import BinaryOracle, qbounded, qestimator, query_budget
from .kernels import ScalarKernel, cross_gram, eval_kernel
from .occupancy import (build_state_action_occupancy_oracle, build_state_occupancy_oracle,
                        residual_correction)
from .policies import GaussQkp, bound_sigma_nabla
from .qmdp import (QueryLedger, TabularMdp, exact_policy_gradient, exact_value, q_tables, sample_trajectories,
                   state_action_marginals)


# -- kernels and regression -------------------------------------------------------------------


def compatible_kernel(kernel: ScalarKernel, mu, sigma, z1, z2) -> float:
    """``kappa(s, s') (a - mu(s))^T Sigma^{-1} (a' - mu(s'))`` for ``z = (s, a)`` in real units.

    ``mu`` maps a state vector to its mean action.
    """
    (s1, a1), (s2, a2) = z1, z2
    sig = np.asarray(sigma, dtype=float).reshape(-1)
    r1 = np.asarray(a1, dtype=float).reshape(-1) - np.asarray(mu(s1), dtype=float).reshape(-1)
    r2 = np.asarray(a2, dtype=float).reshape(-1) - np.asarray(mu(s2), dtype=float).reshape(-1)
    return eval_kernel(kernel, s1, s2) * float(np.sum(r1 * r2 / sig))


def compatible_gram(policy: GaussQkp, pairs) -> np.ndarray:
    """Gram matrix of :func:`compatible_kernel` over grid pairs ``(s, a)``."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    S, A = policy.state_points(), policy.action_points()
    mus = policy.means()
    kap = cross_gram(policy.kernel.scalar, S[pairs[:, 0]], S[pairs[:, 0]])
    resid = A[pairs[:, 1]] - mus[pairs[:, 0]]
    return kap * ((resid / policy.sigma) @ resid.T)


@dataclass
class KernelRidgeModel:
    inputs: np.ndarray
    beta: np.ndarray
    kernel: object

    def predict(self, X) -> np.ndarray:
        return _gram(self.kernel, np.asarray(X, dtype=float), self.inputs) @ self.beta


def _gram(kernel, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    if isinstance(kernel, ScalarKernel):
        return cross_gram(kernel, X, Y)
    if kernel == "linear":
        return X @ Y.T
    return np.asarray(kernel(X, Y), dtype=float)


def kernel_ridge_fit(X, y, kernel, lam: float) -> KernelRidgeModel:
    """Solve ``beta = (K + n lam I)^{-1} y``.

    ``kernel`` is a :class:`ScalarKernel`, the string ``"linear"`` or a
    callable returning a cross Gram matrix.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    if n < 1:
        raise ContractError("kernel ridge regression needs at least one sample")
    if lam < 0:
        raise ContractError("lambda must be non-negative")
    K = _gram(kernel, X, X)
    system = K + n * lam * np.eye(n)
    if np.linalg.cond(system) > 1e12:
        raise ContractError("kernel system is singular; add regularisation or remove duplicate inputs")
    return KernelRidgeModel(X, np.linalg.solve(system, y), kernel)


def ridge_weights(features: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """Primal form of linear-kernel ridge regression: ``(F^T F + n lam I)^{-1} F^T y``."""
    F = np.asarray(features, dtype=float)
    n, d = F.shape
    if n < 1:
        raise ContractError("ridge regression needs at least one sample")
    return np.linalg.lstsq(F.T @ F + n * lam * np.eye(d), F.T @ y, rcond=None)[0]


def lambda_schedule(lam0: float, n: int, exponent: float = 0.5) -> float:
    """``lam0 * n^{-exponent}``."""
    return lam0 * max(n, 1) ** (-exponent)


@dataclass
class MatchingPursuitResult:
    indices: list
    beta: np.ndarray
    mse: float
    history: list


def matching_pursuit(target, gram_probe_dict, eps_mu: float, n_max: int) -> MatchingPursuitResult:
    """Greedy selection of dictionary atoms with a least-squares refit after every addition.

    ``target`` is (P, A) over probe states and ``gram_probe_dict`` is the
    (P, D) kernel matrix between probes and candidate centres. Stops when the
    MSE improvement drops below ``eps_mu`` or ``n_max`` atoms are chosen.
    Ties go to the lowest dictionary index.
    """
    Y = np.asarray(target, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    G = np.asarray(gram_probe_dict, dtype=float)
    if Y.shape[0] == 0 or G.shape[1] == 0:
        raise ContractError("probe set and dictionary must be non-empty")
    chosen: list[int] = []
    beta = np.zeros((0, Y.shape[1]))
    mse = float(np.mean(Y**2))
    history = [mse]
    while len(chosen) < n_max:
        best = None
        for j in range(G.shape[1]):
            if j in chosen:
                continue
            cols = G[:, chosen + [j]]
            b = np.linalg.lstsq(cols, Y, rcond=None)[0]
            m = float(np.mean((Y - cols @ b) ** 2))
            if best is None or m < best[0] - 1e-15:
                best = (m, j, b)
        if best is None or mse - best[0] < eps_mu:
            break
        mse, j, beta = best
        chosen.append(j)
        history.append(mse)
    return MatchingPursuitResult(chosen, beta, mse, history)


def sparsify_policy(policy: GaussQkp, eps_mu: float, n_max: int | None = None) -> GaussQkp:
    """Matching-pursuit refit of the policy mean over the grid states using the current centres as dictionary."""
    probes = policy.state_points()
    target = policy.means()
    G = cross_gram(policy.kernel.scalar, probes, policy.centres)
    M = policy.kernel.output_matrix
    res = matching_pursuit(target, G, eps_mu, n_max or policy.centres.shape[0])
    if not res.indices:
        return policy
    # means = G beta M^T, so solve in beta-space through M^T
    beta = res.beta @ np.linalg.pinv(M.T)
    return replace(policy, centres=policy.centres[res.indices], beta=beta)


# -- critics ---------------------------------------------------------------------------------


@dataclass
class CompatibleCritic:
    """Weights of a compatible critic; ``mode`` is ``"stochastic"`` or ``"deterministic"``."""

    w: np.ndarray
    v: np.ndarray | None = None
    mode: str = "stochastic"
    lam: float = 1e-3

    def __post_init__(self):
        if self.mode not in ("stochastic", "deterministic"):
            raise ConfigError(f"unknown critic mode {self.mode!r}")
        self.w = np.asarray(self.w, dtype=float).reshape(-1)
        if self.v is not None:
            self.v = np.asarray(self.v, dtype=float).reshape(-1)

    @classmethod
    def zeros(cls, policy: GaussQkp, mode: str = "stochastic", lam: float = 1e-3,
              state_values: bool | None = None) -> "CompatibleCritic":
        if state_values is None:
            state_values = mode == "deterministic"
        v = np.zeros(policy.n_states) if state_values else None
        return cls(np.zeros(policy.params.size), v, mode, lam)

    def features(self, policy: GaussQkp) -> np.ndarray:
        """Critic features per grid pair, shape (S, nA, d) (plus ``phi`` for the deterministic critic)."""
        if self.mode == "stochastic":
            return policy.score()
        return deterministic_features(policy)

    def q_table(self, policy: GaussQkp) -> np.ndarray:
        if self.mode == "stochastic":
            q = policy.score() @ self.w
            return q if self.v is None else q + self.v[:, None]
        return deterministic_features(policy) @ np.concatenate([self.w, self.v])

    def q_value(self, policy: GaussQkp, s: int, a_vec) -> float:
        """Critic at a continuous action (deterministic mode) or the nearest grid action (stochastic)."""
        if self.mode == "stochastic":
            a = policy.layout.actions.encode(np.asarray(a_vec, dtype=float))
            return float(self.q_table(policy)[s, a])
        a = np.asarray(a_vec, dtype=float).reshape(-1)
        resid = a - policy.mean_action(s)
        W = self.w.reshape(policy.beta.shape)
        adv = float(policy.kappa()[s] @ W @ policy.kernel.output_matrix @ resid)
        return adv + float(self.v[s])

    def action_gradient(self, policy: GaussQkp, s: int, step_frac: float = 1e-4) -> np.ndarray:
        """``grad_a Qhat(s, a)`` at ``a = mu(s)`` by central differences."""
        grid = policy.layout.actions
        h = step_frac * float(np.max(grid.hi - grid.lo))
        mu = policy.mean_action(s)
        g = np.zeros(mu.size)
        for j in range(mu.size):
            e = np.zeros(mu.size)
            e[j] = h
            g[j] = (self.q_value(policy, s, mu + e) - self.q_value(policy, s, mu - e)) / (2 * h)
        return g


def deterministic_features(policy: GaussQkp, states=None, actions=None) -> np.ndarray:
    """``[kappa(s, c_i) M (a - mu(s))]_i  ++  onehot(s)``; grid table (S, nA, d + S) by default."""
    S = policy.n_states
    if states is None:
        states = np.repeat(np.arange(S), policy.n_actions)
        actions = np.tile(np.arange(policy.n_actions), S)
        shape = (S, policy.n_actions)
    else:
        shape = (len(states),)
    states = np.asarray(states, dtype=np.int64)
    A = policy.action_points()[np.asarray(actions, dtype=np.int64)] if actions is not None else None
    resid = A - policy.means()[states]
    adv = np.einsum("ni,nb->nib", policy.kappa()[states], resid @ policy.kernel.output_matrix.T)
    phi = np.eye(S)[states]
    return np.concatenate([adv.reshape(len(states), -1), phi], axis=1).reshape(*shape, -1)


def baseline_value(critic: CompatibleCritic, policy: GaussQkp, s: int) -> float:
    """``b(s) = sum_a pi(a|s) Qhat(s, a)`` over the grid actions."""
    return float(policy.probs()[s] @ critic.q_table(policy)[s])


def baselines(critic: CompatibleCritic, policy: GaussQkp) -> np.ndarray:
    return np.sum(policy.probs() * critic.q_table(policy), axis=1)


# -- exact identities ------------------------------------------------------------------------------


def occupancy_averaged_q(mdp: TabularMdp, policy) -> tuple[np.ndarray, np.ndarray]:
    """``(nu, Qbar)`` with ``nu = sum_t gamma^t P_t`` and ``Qbar = sum_t gamma^t P_t Q_t / nu``."""
    M = state_action_marginals(mdp, policy)
    Q = q_tables(mdp, policy)
    g = mdp.gamma ** np.arange(mdp.horizon)
    nu = np.tensordot(g, M, axes=1)
    weighted = np.tensordot(g, M * Q, axes=1)
    Qbar = np.divide(weighted, nu, out=np.zeros_like(nu), where=nu > 0)
    return nu, Qbar


def enumerated_gradient(mdp: TabularMdp, policy, q_table=None, baseline=None) -> np.ndarray:
    """``sum_{s,a} nu(s,a) (Q(s,a) - b(s)) grad log pi(a|s)``; ``Q`` defaults to ``Qbar``."""
    nu, Qbar = occupancy_averaged_q(mdp, policy)
    Q = Qbar if q_table is None else np.asarray(q_table, dtype=float)
    b = np.zeros(mdp.n_states) if baseline is None else np.asarray(baseline, dtype=float)
    psi = np.asarray(policy.score())
    return np.einsum("sa,sad->d", nu * (Q - b[:, None]), psi)


@dataclass
class NaturalGradientReport:
    w_star: np.ndarray
    fisher: np.ndarray
    grad: np.ndarray
    compatibility_gap: float
    natural_gap: float
    oracle_gap: float
    rank_deficient: bool

    def ok(self, tol: float = 1e-6) -> bool:
        return max(self.compatibility_gap, self.natural_gap, self.oracle_gap) <= tol


def natural_gradient_check(mdp: TabularMdp, policy) -> NaturalGradientReport:
    """Fit ``w*`` by occupancy-weighted least squares of ``Qbar`` on the score and verify
    ``sum nu Q psi = sum nu Qhat psi`` and ``F w* = grad V``.

    ``grad V`` comes from :func:`exact_policy_gradient` (value differencing and
    likelihood ratio), independent of the occupancy computation.
    """
    nu, Qbar = occupancy_averaged_q(mdp, policy)
    psi = np.asarray(policy.score())
    d = psi.shape[-1]
    P = psi.reshape(-1, d)
    wts = nu.reshape(-1)
    F = (P * wts[:, None]).T @ P
    rhs = P.T @ (wts * Qbar.reshape(-1))
    rank_def = np.linalg.matrix_rank(F, tol=1e-10 * max(1.0, np.abs(F).max())) < d
    w_star = np.linalg.pinv(F, rcond=1e-12) @ rhs if rank_def else np.linalg.solve(F, rhs)
    Qhat = (P @ w_star).reshape(nu.shape)
    g_q = enumerated_gradient(mdp, policy, Qbar)
    g_hat = enumerated_gradient(mdp, policy, Qhat)
    grad = exact_policy_gradient(mdp, policy)
    return NaturalGradientReport(
        w_star, F, grad,
        float(np.max(np.abs(g_q - g_hat))) if d else 0.0,
        float(np.max(np.abs(F @ w_star - grad))) if d else 0.0,
        float(np.max(np.abs(g_q - grad))) if d else 0.0,
        bool(rank_def),
    )


# -- training state ---------------------------------------------------------------------------------


@dataclass
class ActorCriticConfig:
    eta: float = 0.5
    eps: float = 0.05
    delta: float = 0.05
    lam0: float = 1e-3
    lam_exponent: float = 0.5
    eps_Q: float = 1.0
    shrink_alpha: float | None = None
    shrink_every: int = 10
    sigma_min: float = 1e-3
    eps_mu: float | None = None
    sparsify_every: int = 0
    buffer_max: int = 20000
    replay_batches: int = 1
    trim_every: int = 0
    trim_fraction: float = 0.5
    refresh_n1: bool = True
    n1: int | None = None
    n1_max: int = 2048
    critic_samples: int | None = None
    n2_min: int = 64
    target_sync_every: int = 5
    target_tau: float | None = None
    critic_solver: str = "exact"
    critic_epochs: int = 1
    fd_step_frac: float = 1e-4
    critic_state_values: bool = True
    estimator: str = "quantum"

    def __post_init__(self):
        if self.eta <= 0 or self.eps <= 0 or not 0 < self.delta < 1:
            raise ConfigError("need eta > 0, eps > 0 and delta in (0, 1)")
        if self.critic_solver not in ("exact", "gd"):
            raise ConfigError("critic_solver must be exact or gd")
        if self.estimator not in ("quantum", "exact"):
            raise ConfigError("estimator must be quantum or exact")


@dataclass
class TrainState:
    mdp: TabularMdp
    policy: GaussQkp
    critic: CompatibleCritic
    config: ActorCriticConfig
    rng: np.random.Generator
    ledger: QueryLedger = field(default_factory=QueryLedger)
    iteration: int = 0
    n1: int = 0
    traj_states: np.ndarray | None = None
    traj_actions: np.ndarray | None = None
    traj_rewards: np.ndarray | None = None
    replay: dict | None = None
    target: CompatibleCritic | None = None
    critic_updates: int = 0
    history: list = field(default_factory=list)
    critic_losses: list = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.policy.params.size


def _cap_n1(n: int, cfg: ActorCriticConfig) -> int:
    return int(max(1, min(n, cfg.n1_max)))


def cqrac_budget(state: TrainState) -> int:
    cfg = state.config
    if cfg.n1 is not None:
        return int(cfg.n1)
    sig = bound_sigma_nabla(state.policy, 2)
    n = query_budget("cqrac_variance", {"d": state.d, "p": 2, "eps_Q": max(cfg.eps_Q, 1e-12), "sigma_nabla": sig,
                                        "gamma": state.mdp.gamma, "eps": cfg.eps, "delta": cfg.delta})
    return _cap_n1(n, cfg)


def dcqrac_budget(state: TrainState, C2: float) -> int:
    cfg = state.config
    if cfg.n1 is not None:
        return int(cfg.n1)
    n = query_budget("dcqrac", {"d": state.d, "p": 2, "C_p": max(C2, 1e-12), "gamma": state.mdp.gamma,
                                "eps": cfg.eps, "delta": cfg.delta})
    return _cap_n1(n, cfg)


def init_cqrac(mdp: TabularMdp, policy: GaussQkp, config: ActorCriticConfig | None = None, seed: int = 0) -> TrainState:
    cfg = config or ActorCriticConfig()
    critic = CompatibleCritic.zeros(policy, "stochastic", cfg.lam0, cfg.critic_state_values)
    st = TrainState(mdp, policy, critic, cfg, np.random.default_rng(seed))
    st.n1 = cqrac_budget(st)
    return st


def init_dcqrac(mdp: TabularMdp, policy: GaussQkp, config: ActorCriticConfig | None = None, seed: int = 0) -> TrainState:
    cfg = config or ActorCriticConfig()
    critic = CompatibleCritic.zeros(policy, "deterministic", cfg.lam0)
    st = TrainState(mdp, policy, critic, cfg, np.random.default_rng(seed))
    st.target = CompatibleCritic(critic.w.copy(), critic.v.copy(), "deterministic", critic.lam)
    st.n1 = dcqrac_budget(st, 1.0)
    return st


def _estimate_mean(oracle: BinaryOracle, n: int, state: TrainState, variance_adaptive: bool) -> np.ndarray:
    cfg = state.config
    if cfg.estimator == "exact":
        # accounting mode: charge the budgeted query count, skip the simulation
        state.ledger.add("accounted_queries", n * oracle.calls_per_query)
        return oracle.expectation()
    scale = oracle.max_norm()
    if scale <= 0:
        return np.zeros(oracle.dim)
    if variance_adaptive:
        est = qestimator(oracle, n, cfg.delta, state.rng, eps=cfg.eps)
    else:
        est = qbounded(oracle, n, cfg.delta, state.rng, scale=scale, eps=cfg.eps)
    state.ledger.merge(est.queries)
    return est.estimate


def _greedy_table(policy: GaussQkp) -> np.ndarray:
    """Deterministic grid policy that picks the grid action nearest ``mu(s)``."""
    grid = policy.layout.actions
    table = np.zeros((policy.n_states, policy.n_actions))
    for s, mu in enumerate(policy.means()):
        table[s, grid.encode(np.clip(mu, grid.lo, grid.hi))] = 1.0
    return table


def _record(state: TrainState, grad: np.ndarray, eps_Q: float, C_p: float, extra: dict | None = None) -> None:
    row = {
        "iteration": state.iteration,
        "value": exact_value(state.mdp, state.policy),
        "grad_norm": float(np.linalg.norm(grad)),
        "eps_Q": eps_Q,
        "C_p": C_p,
        "queries": state.ledger.total,
    }
    if extra:
        row.update(extra)
    state.history.append(row)


# -- CQRAC ----------------------------------------------------------------------------------------


def _occupancy_resample(state: TrainState, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw ``n`` returned pairs and their T-step tail returns from stored 2T-step trajectories."""
    T, gam = state.mdp.horizon, state.mdp.gamma
    S, A, R = state.traj_states, state.traj_actions, state.traj_rewards
    pick = state.rng.integers(S.shape[0], size=n)
    # stop time of the occupancy sampler: geometric, censored at T
    stop = np.minimum(state.rng.geometric(1.0 - gam, size=n) - 1, T) if gam > 0 else np.zeros(n, dtype=np.int64)
    keep = stop < T
    pick, stop = pick[keep], stop[keep]
    disc = gam ** np.arange(T)
    idx = stop[:, None] + np.arange(T)[None, :]
    tail = (R[pick[:, None], idx] * disc).sum(axis=1)
    return S[pick, stop], A[pick, stop], tail


def fit_stochastic_critic(state: TrainState, n_samples: int) -> None:
    s, a, y = _occupancy_resample(state, n_samples)
    if s.size == 0:
        return
    psi = state.policy.score()[s, a]
    lam = lambda_schedule(state.config.lam0, s.size, state.config.lam_exponent)
    critic = state.critic
    if critic.v is None:
        critic.w = ridge_weights(psi, y, lam)
    else:
        # state values soak up V(s) so the score weights only carry the advantage
        theta = ridge_weights(np.concatenate([psi, np.eye(state.policy.n_states)[s]], axis=1), y, lam)
        critic.w, critic.v = theta[: psi.shape[1]], theta[psi.shape[1]:]
    critic.lam = lam


def cqrac_iteration(state: TrainState) -> TrainState:
    """One pass of the stochastic actor-critic loop (policy step, critic refit, periodic updates)."""
    if not isinstance(state.policy, GaussQkp):
        raise ContractError("CQRAC needs a GaussQkp policy")
    mdp, cfg = state.mdp, state.config
    pol = state.policy
    psi = pol.score()
    Qhat = state.critic.q_table(pol)
    b = np.sum(pol.probs() * Qhat, axis=1)
    adv = Qhat - b[:, None]
    eps_Q = float(np.max(np.abs(adv)))
    X = adv[..., None] * psi
    oracle = build_state_action_occupancy_oracle(mdp, pol, X)
    raw = _estimate_mean(oracle, state.n1, state, variance_adaptive=True)
    grad = residual_correction(raw, oracle.meta["zero_payload"], mdp.gamma, mdp.horizon)
    state.policy = pol.with_params(pol.params + cfg.eta * grad)

    # classical critic data: n2 = n1 rollouts of 2T steps (floored for a usable fit)
    n2 = max(state.n1, cfg.n2_min)
    s_, a_, r_ = sample_trajectories(mdp, state.policy, n2, state.rng, length=2 * mdp.horizon, ledger=state.ledger)
    if state.traj_states is None:
        state.traj_states, state.traj_actions, state.traj_rewards = s_, a_, r_
    else:
        state.traj_states = np.concatenate([state.traj_states, s_])[-cfg.buffer_max:]
        state.traj_actions = np.concatenate([state.traj_actions, a_])[-cfg.buffer_max:]
        state.traj_rewards = np.concatenate([state.traj_rewards, r_])[-cfg.buffer_max:]
    fit_stochastic_critic(state, cfg.critic_samples or max(n2, 256))
    state.iteration += 1
    _periodic(state, stochastic=True)
    _record(state, grad, eps_Q, float("nan"))
    return state


def _periodic(state: TrainState, stochastic: bool) -> None:
    cfg, i = state.config, state.iteration
    if cfg.trim_every and i % cfg.trim_every == 0:
        if stochastic and state.traj_states is not None:
            keep = int(state.traj_states.shape[0] * (1.0 - cfg.trim_fraction))
            state.traj_states, state.traj_actions, state.traj_rewards = (
                state.traj_states[-keep:], state.traj_actions[-keep:], state.traj_rewards[-keep:])
        elif state.replay is not None:
            keep = int(len(state.replay["s"]) * (1.0 - cfg.trim_fraction))
            state.replay = {k: (v if k == "batches" else v[-keep:]) for k, v in state.replay.items()}
    if cfg.sparsify_every and cfg.eps_mu is not None and i % cfg.sparsify_every == 0:
        new = sparsify_policy(state.policy, cfg.eps_mu)
        if new.centres.shape[0] != state.policy.centres.shape[0]:
            state.policy = new
            mode = state.critic.mode
            state.critic = CompatibleCritic.zeros(new, mode, state.critic.lam, state.critic.v is not None)
            if state.target is not None:
                state.target = CompatibleCritic.zeros(new, mode, state.critic.lam)
    if stochastic and cfg.shrink_alpha is not None and cfg.shrink_every and i % cfg.shrink_every == 0:
        state.policy = state.policy.with_sigma(np.maximum(state.policy.sigma * cfg.shrink_alpha, cfg.sigma_min))
    if cfg.refresh_n1 and stochastic:
        adv = state.critic.q_table(state.policy)
        adv = adv - np.sum(state.policy.probs() * adv, axis=1)[:, None]
        state.config = replace(cfg, eps_Q=max(float(np.max(np.abs(adv))), 1e-6))
        state.n1 = cqrac_budget(state)


# -- DCQRAC -----------------------------------------------------------------------------------------


def _critic_loss(F: np.ndarray, y: np.ndarray, theta: np.ndarray, lam: float) -> float:
    r = F @ theta - y
    return float(np.mean(r**2) + lam * theta @ theta)


def fit_deterministic_critic(state: TrainState) -> None:
    """Regress ``Qhat(s, a)`` on ``r + gamma Qhat^-(s', mu^-(s'))`` over the replay buffer."""
    rep = state.replay
    if rep is None or len(rep["s"]) == 0:
        return
    pol, cfg = state.policy, state.config
    F = deterministic_features(pol, rep["s"], rep["a"])
    tgt = state.target
    # at a = mu(s') the advantage part vanishes, leaving v^- . phi(s')
    boot = tgt.v[rep["s2"]] * (1.0 - rep["done"])
    y = rep["r"] + state.mdp.gamma * boot
    n = F.shape[0]
    lam = lambda_schedule(cfg.lam0, n, cfg.lam_exponent)
    theta = np.concatenate([state.critic.w, state.critic.v])
    losses = [_critic_loss(F, y, theta, lam)]
    if cfg.critic_solver == "exact":
        theta = np.linalg.lstsq(F.T @ F / n + lam * np.eye(F.shape[1]), F.T @ y / n, rcond=None)[0]
        losses.append(_critic_loss(F, y, theta, lam))
    else:
        H = 2.0 * (F.T @ F / n + lam * np.eye(F.shape[1]))
        step = 1.0 / max(np.linalg.eigvalsh(H).max(), 1e-12)
        for _ in range(cfg.critic_epochs):
            grad = 2.0 * F.T @ (F @ theta - y) / n + 2.0 * lam * theta
            theta = theta - step * grad
            losses.append(_critic_loss(F, y, theta, lam))
    d = state.critic.w.size
    state.critic.w, state.critic.v, state.critic.lam = theta[:d], theta[d:], lam
    state.critic_losses.append(losses)
    state.critic_updates += 1
    if cfg.target_tau is not None:
        t = cfg.target_tau
        state.target.w = (1 - t) * state.target.w + t * state.critic.w
        state.target.v = (1 - t) * state.target.v + t * state.critic.v
    elif state.critic_updates % cfg.target_sync_every == 0:
        state.target.w, state.target.v = state.critic.w.copy(), state.critic.v.copy()


def dpg_payload(state: TrainState) -> tuple[np.ndarray, float]:
    """``X(s) = kappa(s, c_i) M^T grad_a Qhat(s, mu(s))`` for each grid state, plus ``C_2``."""
    pol = state.policy
    grads = np.stack([state.critic.action_gradient(pol, s, state.config.fd_step_frac) for s in range(pol.n_states)])
    X = np.einsum("si,sb->sib", pol.kappa(), grads @ pol.kernel.output_matrix).reshape(pol.n_states, -1)
    return X, float(np.max(np.linalg.norm(grads, axis=1)))


def dcqrac_iteration(state: TrainState) -> TrainState:
    """One pass of the deterministic actor-critic loop with a Gaussian behaviour policy around ``mu``."""
    if not isinstance(state.policy, GaussQkp):
        raise ContractError("DCQRAC needs a GaussQkp policy head")
    mdp, cfg = state.mdp, state.config
    X, C2 = dpg_payload(state)
    pol = state.policy
    oracle = build_state_occupancy_oracle(mdp, pol, X)
    raw = _estimate_mean(oracle, state.n1, state, variance_adaptive=False)
    grad = residual_correction(raw, oracle.meta["zero_payload"], mdp.gamma, mdp.horizon)
    # log, do not bound, the gap to the exact behaviour-policy gradient
    exact_dpg = residual_correction(oracle.expectation(), oracle.meta["zero_payload"], mdp.gamma, mdp.horizon)
    state.policy = pol.with_params(pol.params + cfg.eta * grad)

    n2 = max(state.n1, cfg.n2_min)
    s_, a_, r_ = sample_trajectories(mdp, state.policy, n2, state.rng, ledger=state.ledger)
    T = mdp.horizon
    s2 = np.concatenate([s_[:, 1:], s_[:, -1:]], axis=1)
    done = np.zeros_like(r_)
    done[:, -1] = 1.0
    new = {"s": s_.reshape(-1), "a": a_.reshape(-1), "r": r_.reshape(-1), "s2": s2.reshape(-1), "done": done.reshape(-1)}
    batches = ([] if state.replay is None else state.replay["batches"]) + [new]
    batches = batches[-cfg.replay_batches:]
    state.replay = {k: np.concatenate([b[k] for b in batches])[-cfg.buffer_max * T:] for k in new}
    state.replay["batches"] = batches
    fit_deterministic_critic(state)
    state.iteration += 1
    _periodic(state, stochastic=False)
    if cfg.refresh_n1:
        state.n1 = dcqrac_budget(state, dpg_payload(state)[1])
    _record(state, grad, float("nan"), C2, {"greedy_value": exact_value(mdp, _greedy_table(state.policy)),
                                            "dpg_gap": float(np.max(np.abs(grad - exact_dpg))) if grad.size else 0.0})
    return state


def train(state: TrainState, iterations: int, deterministic: bool = False) -> TrainState:
    step = dcqrac_iteration if deterministic else cqrac_iteration
    for _ in range(iterations):
        step(state)
    return state


def greedy_value(state: TrainState) -> float:
    return exact_value(state.mdp, _greedy_table(state.policy))
