"""Small reference MDPs and default policies used by tests, demos and the CLI."""
from __future__ import annotations

import numpy as np

from .encoding import RegisterLayout
from .kernels import OperatorKernel, ScalarKernel
from .policies import GaussQkp, RepresenterRawPqc
from .qmdp import TabularMdp, mdp_from_arrays


def two_armed_bandit(rewards=(1.0, 0.0), gamma: float = 0.5) -> TabularMdp:
    """One state, two grid actions at 0 and 1, horizon 1."""
    r = np.asarray(rewards, dtype=float).reshape(1, 2)
    P = np.ones((1, 2, 1))
    return mdp_from_arrays(P, r, gamma, 1, reward_max=1.0)


def chain_mdp(gamma: float = 0.5, horizon: int = 3) -> TabularMdp:
    """Two states; action 1 moves to state 1, action 0 to state 0; reward 1 in state 1."""
    P = np.zeros((2, 2, 2))
    P[:, 0, 0] = 1.0
    P[:, 1, 1] = 1.0
    r = np.array([[0.0, 0.0], [1.0, 1.0]])
    r[0, 1] = 0.25
    return mdp_from_arrays(P, r, gamma, horizon, reward_max=1.0)


def two_state_benchmark(gamma: float = 0.5, horizon: int = 3) -> TabularMdp:
    """Deterministic 2-state, 2-action MDP used for gradient-estimator checks."""
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = P[0, 1, 1] = P[1, 0, 0] = P[1, 1, 1] = 1.0
    r = np.array([[0.0, 1.0], [0.2, 0.6]])
    return mdp_from_arrays(P, r, gamma, horizon, reward_max=1.0)


def quadratic_bandit(a_star: float = 0.3, bits: int = 4, gamma: float = 0.5) -> TabularMdp:
    """One state, ``2^bits`` actions on [0, 1] with reward ``1 - (a - a_star)^2``."""
    layout = RegisterLayout(0, 1, bits, reward_max=1.0)
    a = layout.actions.points()[:, 0]
    r = (1.0 - (a - a_star) ** 2)[None, :]
    return TabularMdp(layout, np.ones((1, a.size, 1)), r, gamma, 1)


def default_gauss_policy(mdp: TabularMdp, sigma: float = 0.25, beta=None, kernel: ScalarKernel | None = None) -> GaussQkp:
    """Gaussian policy with one centre per grid state and identity output matrix."""
    lay = mdp.layout
    centres = lay.states.points()
    A = lay.action_dims
    if beta is None:
        mid = 0.5 * (lay.actions.lo + lay.actions.hi)
        beta = np.tile(mid, (centres.shape[0], 1))
    K = OperatorKernel.identity(kernel or ScalarKernel("KroneckerDelta"), A)
    return GaussQkp(lay, centres, beta, sigma, K)


def default_rawpqc_policy(mdp: TabularMdp, theta=None, seed: int = 0) -> RepresenterRawPqc:
    lay = mdp.layout
    if theta is None:
        theta = np.random.default_rng(seed).uniform(0.5, 2.5, size=(lay.n_states, lay.n_action_qubits))
    return RepresenterRawPqc.tabular(lay, theta)


BENCHMARKS = {
    "bandit": two_armed_bandit,
    "chain": chain_mdp,
    "two_state": two_state_benchmark,
    "quadratic_bandit": quadratic_bandit,
}
