import itertools

import numpy as np
import pytest

from qkrl.benchmarks import chain_mdp, default_gauss_policy, two_armed_bandit
from qkrl.errors import ConfigError, ConsistencyError, ContractError
from qkrl.policies import RepresenterRawPqc, build_policy_evaluation_oracle
from qkrl.qmdp import (QueryLedger, TabularMdp, TrajectoryRegisters, enumerate_trajectories, exact_policy_gradient,
                       exact_value, likelihood_ratio_gradient, load_mdp, mdp_from_arrays, optimal_value, oracle_init,
                       oracle_return, oracle_reward, oracle_trajectory, oracle_transition, q_tables, random_mdp,
                       sample_trajectories, save_mdp, state_action_marginals, trajectory_distribution)
from qkrl.statevector import StateVector, prepare_amplitudes


def brute_force_trajectories(mdp, pi):
    """Independent nested-loop enumeration of (states, actions) -> (P, R)."""
    T, nS, nA = mdp.horizon, mdp.n_states, mdp.n_actions
    out = {}
    for ss in itertools.product(range(nS), repeat=T):
        for aa in itertools.product(range(nA), repeat=T):
            p = mdp.d0[ss[0]]
            R = 0.0
            for t in range(T):
                p *= pi[ss[t], aa[t]]
                R += mdp.gamma**t * mdp.r[ss[t], aa[t]]
                if t + 1 < T:
                    p *= mdp.P[ss[t], aa[t], ss[t + 1]]
            if p > 0:
                out[(ss, aa)] = (p, R)
    return out


def random_case(seed, nS=2, nA=2, T=3):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(nS, nA, 0.7, T, rng, d0=rng.dirichlet(np.ones(nS)))
    pol = RepresenterRawPqc.tabular(mdp.layout, rng.uniform(0.2, 2.9, size=(nS, mdp.layout.n_action_qubits)))
    return mdp, pol


def single_state(T=3):
    return mdp_from_arrays(np.ones((1, 1, 1)), np.ones((1, 1)), 0.5, T)


def test_mdp_validation():
    lay = single_state().layout
    with pytest.raises(ConfigError):
        TabularMdp(lay, np.full((1, 1, 1), 0.9), np.ones((1, 1)), 0.5, 2)
    with pytest.raises(ConfigError):
        TabularMdp(lay, np.ones((1, 1, 1)), np.full((1, 1), 2.0), 0.5, 2)
    with pytest.raises(ConfigError):
        TabularMdp(lay, np.ones((1, 1, 1)), np.ones((1, 1)), 1.0, 2)
    with pytest.raises(ConfigError):
        TabularMdp(lay, np.ones((1, 1, 1)), np.ones((1, 1)), 0.5, 2, d0=[0.5])


def test_d0_defaults_to_state_zero():
    mdp = chain_mdp()
    np.testing.assert_array_equal(mdp.d0, [1.0, 0.0])


def test_exact_value_trivial_cases():
    assert exact_value(single_state(), np.ones((1, 1))) == pytest.approx(1.75, abs=1e-15)
    assert exact_value(single_state(0), np.ones((1, 1))) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_exact_value_matches_enumeration(seed):
    mdp, pol = random_case(seed)
    traj = brute_force_trajectories(mdp, pol.probs())
    assert exact_value(mdp, pol) == pytest.approx(sum(p * R for p, R in traj.values()), abs=1e-12)
    table = enumerate_trajectories(mdp, pol)
    assert table.probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert table.probs @ table.returns == pytest.approx(exact_value(mdp, pol), abs=1e-12)


def test_q_tables_and_marginals_consistent():
    mdp, pol = random_case(11)
    Q = q_tables(mdp, pol)
    M = state_action_marginals(mdp, pol)
    assert np.sum(M[0] * Q[0]) == pytest.approx(exact_value(mdp, pol), abs=1e-12)
    np.testing.assert_allclose(M.sum(axis=(1, 2)), 1.0)


def test_optimal_value_chain():
    # always take action 1: 0.25 + 0.5 * 1 + 0.25 * 1
    assert optimal_value(chain_mdp()) == pytest.approx(1.0)


def test_init_oracle():
    mdp = mdp_from_arrays(np.full((4, 1, 4), 0.25), np.zeros((4, 1)), 0.5, 1, d0=np.full(4, 0.25))
    sv = StateVector([("s", 2)])
    oracle_init(sv, "s", mdp)
    np.testing.assert_allclose(sv.amplitudes.real, 0.5)
    sv = StateVector([("s", 1)])
    oracle_init(sv, "s", chain_mdp())
    np.testing.assert_allclose(np.abs(sv.amplitudes), [1.0, 0.0])


def test_transition_oracle_deterministic_and_split():
    mdp = chain_mdp()
    sv = StateVector([("s", 1), ("a", 1), ("n", 1)])
    sv.apply_multicontrolled_x(sv.qubit("a"))
    oracle_transition(sv, "s", "a", "n", mdp)
    assert sv.probabilities("n")[1] == pytest.approx(1.0)
    P = np.full((1, 1, 2), 0.5)
    half = mdp_from_arrays(P.repeat(2, axis=0).repeat(2, axis=1), np.zeros((2, 2)), 0.5, 2)
    sv = StateVector([("s", 1), ("a", 1), ("n", 1)])
    oracle_transition(sv, "s", "a", "n", half)
    np.testing.assert_allclose(np.abs(sv.amplitudes[[0, 4]]), [np.sqrt(0.5)] * 2)


@pytest.mark.parametrize("seed", range(3))
def test_transition_oracle_random_rows(seed):
    mdp, _ = random_case(seed)
    for s, a in itertools.product(range(2), range(2)):
        sv = StateVector([("s", 1), ("a", 1), ("n", 1)])
        if s:
            sv.apply_multicontrolled_x(sv.qubit("s"))
        if a:
            sv.apply_multicontrolled_x(sv.qubit("a"))
        oracle_transition(sv, "s", "a", "n", mdp)
        np.testing.assert_allclose(sv.probabilities("n"), mdp.P[s, a], atol=1e-12)


def test_transition_needs_zero_target():
    sv = StateVector([("s", 1), ("a", 1), ("n", 1)])
    sv.apply_multicontrolled_x(sv.qubit("n"))
    with pytest.raises(ContractError):
        oracle_transition(sv, "s", "a", "n", chain_mdp())


def test_reward_oracle():
    mdp = chain_mdp()
    sv = StateVector([("s", 1), ("a", 1), ("r", 4)])
    prepare_amplitudes(sv, "s", np.array([0.5, 0.5]))
    prepare_amplitudes(sv, "a", np.array([0.5, 0.5]))
    oracle_reward(sv, "s", "a", "r", mdp)
    joint = sv.probabilities(["s", "a", "r"]).reshape(16, 2, 2)
    grid = mdp.layout.rewards
    for s, a in itertools.product(range(2), range(2)):
        assert joint[grid.encode([mdp.r[s, a]]), a, s] == pytest.approx(0.25)
    zero = mdp_from_arrays(np.ones((1, 1, 1)), np.zeros((1, 1)), 0.5, 1)
    sv = StateVector([("s", 0), ("a", 0), ("r", 4)])
    oracle_reward(sv, "s", "a", "r", zero)
    assert sv.register_is_zero("r")


def test_trajectory_oracle_uniform_bandit():
    mdp = mdp_from_arrays(np.ones((1, 2, 1)), np.zeros((1, 2)), 0.5, 2)
    pol = RepresenterRawPqc.tabular(mdp.layout, np.full((1, 1), np.pi / 2))
    regs = TrajectoryRegisters.allocate(2)
    sv = StateVector(regs.specs(mdp.layout))
    oracle_trajectory(sv, regs, mdp, build_policy_evaluation_oracle(pol, mdp.layout))
    np.testing.assert_allclose(np.abs(sv.amplitudes), 0.5, atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_trajectory_oracle_matches_enumeration(seed):
    mdp, pol = random_case(seed, T=3)
    regs = TrajectoryRegisters.allocate(mdp.horizon)
    sv = StateVector(regs.specs(mdp.layout))
    led = QueryLedger()
    oracle_trajectory(sv, regs, mdp, build_policy_evaluation_oracle(pol, mdp.layout), led)
    dist = trajectory_distribution(sv, regs, mdp)
    ref = brute_force_trajectories(mdp, pol.probs())
    for key in set(dist) | set(ref):
        assert abs(dist.get(key, 0.0) - ref.get(key, (0.0,))[0]) < 1e-10
    assert led["policy"] == 3 and led["transition"] == 2 and led["interaction"] == 3


def test_return_oracle():
    mdp = single_state()
    regs = TrajectoryRegisters.allocate(3)
    sv = StateVector(regs.specs(mdp.layout) + [("R", 3)])
    oracle_trajectory(sv, regs, mdp, lambda sv, s, a: sv)
    oracle_return(sv, regs, "R", mdp)
    assert sv.probabilities("R")[7] == pytest.approx(1.0)  # 1.75 on a 0.25 grid


def test_return_oracle_random_mdp():
    mdp, pol = random_case(5, T=2)
    regs = TrajectoryRegisters.allocate(2)
    sv = StateVector(regs.specs(mdp.layout) + [("R", 6)])
    oracle_trajectory(sv, regs, mdp, build_policy_evaluation_oracle(pol, mdp.layout))
    oracle_return(sv, regs, "R", mdp)
    ref = brute_force_trajectories(mdp, pol.probs())
    spacing = mdp.value_max / 63
    expected = np.zeros(64)
    for p, R in ref.values():
        expected[int(np.floor(R / spacing + 0.5))] += p
    np.testing.assert_allclose(sv.probabilities("R"), expected, atol=1e-12)


def test_zero_reward_return():
    mdp = mdp_from_arrays(np.ones((1, 2, 1)), np.zeros((1, 2)), 0.5, 2)
    regs = TrajectoryRegisters.allocate(2)
    sv = StateVector(regs.specs(mdp.layout) + [("R", 3)])
    oracle_return(sv, regs, "R", mdp)
    assert sv.register_is_zero("R")


def test_gradient_zero_for_constant_reward():
    mdp = mdp_from_arrays(np.ones((1, 2, 1)), np.full((1, 2), 0.5), 0.5, 2)
    pol = RepresenterRawPqc.tabular(mdp.layout, [[0.4]])
    np.testing.assert_allclose(exact_policy_gradient(mdp, pol), 0.0, atol=1e-10)


def test_gradient_bandit_gaussian_and_sign():
    mdp = two_armed_bandit()
    pol = default_gauss_policy(mdp, sigma=0.25)
    g = exact_policy_gradient(mdp, pol)
    # reward 1 sits at action 0, so the mean weight should decrease
    assert g[0] < 0
    np.testing.assert_allclose(g, likelihood_ratio_gradient(mdp, pol), atol=1e-8)


def test_gradient_frozen_value():
    from qkrl.benchmarks import two_state_benchmark
    mdp = two_state_benchmark()
    pol = RepresenterRawPqc.tabular(mdp.layout, [[0.7], [1.9]])
    np.testing.assert_allclose(exact_policy_gradient(mdp, pol), [0.6259, 0.02454], atol=5e-5)


def test_gradient_disagreement_raises():
    mdp, pol = random_case(2)

    class Broken(type(pol)):
        def score(self):
            return 2.0 * super().score()

    bad = Broken(pol.layout, pol.centres, pol.theta, pol.kernel)
    with pytest.raises(ConsistencyError):
        exact_policy_gradient(mdp, bad)


def test_sampler_matches_marginals():
    mdp, pol = random_case(3)
    led = QueryLedger()
    s, a, r = sample_trajectories(mdp, pol, 50_000, np.random.default_rng(0), ledger=led)
    emp = np.zeros((2, 2))
    np.add.at(emp, (s[:, 1], a[:, 1]), 1.0 / len(s))
    np.testing.assert_allclose(emp, state_action_marginals(mdp, pol)[1], atol=0.01)
    assert led["classical_steps"] == 50_000 * 3


def test_mdp_file_round_trip(tmp_path):
    mdp, _ = random_case(4)
    path = tmp_path / "m.json"
    save_mdp(mdp, path)
    back = load_mdp(path)
    np.testing.assert_array_equal(back.P, mdp.P)
    assert back.gamma == mdp.gamma and back.horizon == mdp.horizon
    with pytest.raises(ConfigError, match="nope.json"):
        load_mdp(tmp_path / "nope.json")


def test_ledger_never_decreases():
    led = QueryLedger()
    led.add("x", 3)
    with pytest.raises(ContractError):
        led.add("x", -1)
    other = QueryLedger()
    other.add("y", 2)
    led.merge(other)
    assert led.total == 5 and led.as_dict() == {"x": 3, "y": 2}
