import math

import numpy as np
import pytest
from scipy.stats import linregress

from qkrl.benchmarks import two_armed_bandit, two_state_benchmark
from qkrl.errors import ConfigError, ContractError
from qkrl.gradest_analytical import (BUDGET_VARIANTS, BinaryOracle, _directional_phases_joint,
                                     _directional_phases_separable, budget_symbols, classical_mvmc,
                                     hoeffding_samples, median_of_means, qbounded, qbounded_grid_size, qbounded_zeta,
                                     qestimator, query_budget, reinforce_oracle, reinforce_scale, repetitions_for,
                                     truncate, upper_quantile, xi)
from qkrl.policies import RepresenterRawPqc
from qkrl.qmdp import exact_policy_gradient, likelihood_ratio_gradient, mdp_from_arrays

TWO_STATE_GRAD = np.array([0.62590212, 0.02454373])


def random_oracle(rng, outcomes=8, d=2, radius=1.0):
    X = rng.uniform(-1, 1, (outcomes, d))
    X *= radius / np.linalg.norm(X, axis=1).max()
    return BinaryOracle(rng.dirichlet(np.ones(outcomes)), X)


# -- binary oracle ------------------------------------------------------------------------


def test_oracle_rejects_bad_probabilities():
    with pytest.raises(ContractError):
        BinaryOracle([0.5, 0.6], [0.0, 1.0])
    with pytest.raises(ContractError):
        BinaryOracle([0.5, 0.5], [0.0, 1.0, 2.0])


def test_oracle_payload_overflow():
    with pytest.raises(ConfigError):
        BinaryOracle([1.0], [3.0], payload_bound=1.0)


def test_complex_payload_splits_real_and_imaginary():
    o = BinaryOracle([0.25, 0.75], np.array([1 + 2j, -1j]))
    assert o.dim == 2
    np.testing.assert_allclose(o.expectation(), [0.25, 0.5 - 0.75], atol=1e-15)


def test_payload_encoding_round_trip():
    o = random_oracle(np.random.default_rng(0), d=3)
    back = o.decode_payload(o.encode_payload())
    assert np.max(np.abs(back - o.payload)) <= o.payload_step / 2 + 1e-15


def test_oracle_statevector_carries_probabilities_and_codes():
    o = BinaryOracle([0.2, 0.3, 0.5], [[0.5], [-0.25], [1.0]], payload_bits=6)
    sv = o.to_statevector()
    np.testing.assert_allclose(sv.probabilities("omega")[:3], o.probs, atol=1e-12)
    joint = sv.probabilities(["omega", "x0"]).reshape(64, 4)
    codes = o.encode_payload()[:, 0]
    for w in range(3):
        assert joint[codes[w], w] == pytest.approx(o.probs[w], abs=1e-12)


def test_reinforce_oracle_matches_exact_gradient():
    mdp = two_state_benchmark()
    pol = RepresenterRawPqc.tabular(mdp.layout, [[0.7], [1.9]])
    o = reinforce_oracle(mdp, pol)
    np.testing.assert_allclose(o.expectation(), TWO_STATE_GRAD, atol=5e-8)
    np.testing.assert_allclose(o.expectation(), likelihood_ratio_gradient(mdp, pol), atol=1e-10)
    np.testing.assert_allclose(o.expectation(), exact_policy_gradient(mdp, pol), atol=1e-10)


def test_reinforce_oracle_random_mdps():
    rng = np.random.default_rng(5)
    for _ in range(5):
        P = rng.dirichlet(np.ones(2), size=(2, 2))
        mdp = mdp_from_arrays(P, rng.uniform(0, 1, (2, 2)), 0.6, 3)
        pol = RepresenterRawPqc.tabular(mdp.layout, rng.uniform(0.2, 2.9, (2, 1)))
        np.testing.assert_allclose(reinforce_oracle(mdp, pol).expectation(), exact_policy_gradient(mdp, pol),
                                   atol=1e-10)


def test_reinforce_oracle_zero_rewards():
    P = np.ones((1, 2, 1))
    mdp = mdp_from_arrays(P, np.zeros((1, 2)), 0.5, 2, reward_max=1.0)
    pol = RepresenterRawPqc.tabular(mdp.layout, [[1.0]])
    assert np.all(reinforce_oracle(mdp, pol).payload == 0.0)


def test_reinforce_oracle_bandit_payload():
    mdp = two_armed_bandit()
    th = 1.1
    pol = RepresenterRawPqc.tabular(mdp.layout, [[th]])
    o = reinforce_oracle(mdp, pol)
    # pi(1) = sin^2(th/2): d log pi(1) = cot(th/2), d log pi(0) = -tan(th/2); only arm 0 pays 1
    p0 = math.cos(th / 2) ** 2
    idx = int(np.argmax(o.probs == pytest.approx(p0)))
    expect = p0 * -math.tan(th / 2)
    assert o.expectation()[0] == pytest.approx(expect, abs=1e-12)
    assert o.payload[idx, 0] == pytest.approx(-math.tan(th / 2), abs=1e-12)


def test_reinforce_scale():
    assert reinforce_scale(two_state_benchmark(gamma=0.5, horizon=3)) == 6.0


# -- truncation -----------------------------------------------------------------------------


def test_truncate_examples():
    x = np.array([0.3, 0.4])
    np.testing.assert_array_equal(truncate(x, 0, 1), x)
    np.testing.assert_array_equal(truncate(4 * x, 0, 1), 0.0)
    np.testing.assert_array_equal(truncate(2 * x, 0, 1), 2 * x)
    with pytest.raises(ContractError):
        truncate(x, 1, 0.5)


def test_truncate_idempotent_and_lipschitz_away_from_cut():
    rng = np.random.default_rng(2)
    for _ in range(200):
        x, y = rng.normal(size=(2, 3))
        a, b = 0.5, 1.5
        tx = truncate(x, a, b)
        np.testing.assert_array_equal(truncate(tx, a, b), tx)
        nx, ny = np.linalg.norm(x), np.linalg.norm(y)
        same_side = (a <= nx <= b) == (a <= ny <= b)
        if same_side:
            assert np.linalg.norm(tx - truncate(y, a, b)) <= np.linalg.norm(x - y) + 1e-15


# -- QBounded --------------------------------------------------------------------------------


def test_qbounded_grid_parameters():
    n, d, delta = 222, 2, 0.05
    m = qbounded_grid_size(n, d, delta)
    assert m == 2 ** math.ceil(math.log2(8 * math.pi * n / math.log(d / delta)))
    assert qbounded_zeta(n, d) == pytest.approx(1 / math.sqrt(math.log(400 * math.pi * n * d)))
    assert repetitions_for(2, 0.05) % 2 == 1


def test_qbounded_constant_payload():
    v = np.array([0.3, -0.5, 0.2])
    o = BinaryOracle([1.0], [v])
    est = qbounded(o, 200, 0.05)
    assert np.max(np.abs(est.estimate - v)) <= est.info["resolution"]


def test_qbounded_bernoulli_half():
    est = qbounded(BinaryOracle([0.5, 0.5], [0.0, 1.0]), 100, 0.05)
    assert abs(est.estimate[0] - 0.5) <= 0.05


def test_qbounded_reinforce_at_budget():
    mdp = two_state_benchmark()
    pol = RepresenterRawPqc.tabular(mdp.layout, [[0.7], [1.9]])
    o = reinforce_oracle(mdp, pol)
    n = query_budget("reinforce", dict(T=3, r_max=1, gamma=0.5, eps=0.1, d=2, delta=0.05))
    scale = max(reinforce_scale(mdp), o.max_norm())
    fails = sum(np.max(np.abs(qbounded(o, n, 0.05, np.random.default_rng(s), scale=scale).estimate - TWO_STATE_GRAD))
                > 0.1 for s in range(40))
    assert fails <= 2


def test_qbounded_rejects_unnormalised_payload():
    with pytest.raises(ContractError):
        qbounded(BinaryOracle([0.5, 0.5], [[0.0, 2.0], [1.0, 0.0]]), 100, 0.05)


def test_qbounded_queries_counted():
    est = qbounded(BinaryOracle([1.0], [0.2]), 64, 0.1)
    assert est.n_queries == est.info["repetitions"] * est.info["m"]


def test_joint_phase_reduces_to_separable_sum():
    o = random_oracle(np.random.default_rng(3), d=2, radius=0.5)
    m, zeta = 8, 0.3
    sep = _directional_phases_separable(o, m, zeta)
    joint = _directional_phases_joint(o, m, zeta)
    ids = np.arange(m * m)
    np.testing.assert_allclose(joint, sep[0][ids % m] + sep[1][ids // m], atol=1e-12)


def test_qbounded_error_slope_near_minus_one():
    rng = np.random.default_rng(1)
    inst = [random_oracle(rng, radius=0.99) for _ in range(40)]
    ns = np.array([128, 256, 512, 1024, 2048, 4096])
    errs = [np.mean([np.max(np.abs(qbounded(o, int(n), 0.05, np.random.default_rng(i)).estimate - o.expectation()))
                     for i, o in enumerate(inst)]) for n in ns]
    assert linregress(np.log(ns), np.log(errs)).slope == pytest.approx(-1.0, abs=0.15)


def test_classical_error_slope_near_minus_half():
    rng = np.random.default_rng(1)
    inst = [random_oracle(rng, radius=0.99) for _ in range(40)]
    ns = np.array([128, 256, 512, 1024, 2048, 4096]) * 11
    errs = [np.mean([np.max(np.abs(classical_mvmc(o, 0.1, 0.05, 1.0, np.random.default_rng(i), n=int(n)).estimate
                                   - o.expectation())) for i, o in enumerate(inst)]) for n in ns]
    assert linregress(np.log(ns), np.log(errs)).slope == pytest.approx(-0.5, abs=0.1)


# -- QEstimator -------------------------------------------------------------------------------


def test_median_of_means_and_quantiles():
    X = np.array([[1.0], [2.0], [3.0], [100.0]])
    assert median_of_means(X, 4)[0] == 2.5
    rng = np.random.default_rng(0)
    v = rng.normal(size=30)
    p = np.full(30, 1 / 30)
    s = np.sort(v)
    for j in range(1, 5):
        # sorting oracle: smallest order statistic with at most 30 * 2^-j values above it
        k = 30 - math.floor(30 * 2.0 ** -j + 1e-12)
        assert upper_quantile(v, p, 2.0 ** -j) == s[k - 1]


def test_qestimator_constant_payload_is_exact():
    v = np.array([0.25, -0.75])
    est = qestimator(BinaryOracle([0.4, 0.6], [v, v]), 64, 0.05)
    np.testing.assert_array_equal(est.estimate, v)
    assert est.info["fallback"]


def test_qestimator_beats_qbounded_on_low_variance():
    rng = np.random.default_rng(0)
    wins = 0
    for t in range(20):
        X = 0.6 + 0.01 * rng.standard_normal((50, 2))
        o = BinaryOracle(rng.dirichlet(np.ones(50)), X / np.linalg.norm(X, axis=1).max())
        a = np.max(np.abs(qestimator(o, 64, 0.05, np.random.default_rng(t)).estimate - o.expectation()))
        b = np.max(np.abs(qbounded(o, 64, 0.05, np.random.default_rng(t)).estimate - o.expectation()))
        wins += a <= b
    assert wins >= 16


def test_qestimator_general_payload_accuracy():
    o = random_oracle(np.random.default_rng(7), outcomes=20, d=3, radius=3.0)
    est = qestimator(o, 512, 0.05, np.random.default_rng(1))
    assert np.max(np.abs(est.estimate - o.expectation())) <= 0.05
    assert est.queries.counts["quantile_oracle"] > 0


# -- classical baseline ---------------------------------------------------------------------


def test_hoeffding_count_example():
    assert hoeffding_samples(0.1, 0.05, 4, 1.0) == math.ceil(200 * math.log(160)) == 1016
    assert query_budget("mvmc", dict(B=1, eps=0.1, d=4, delta=0.05)) == 1016


def test_classical_constant_payload():
    est = classical_mvmc(BinaryOracle([1.0], [[0.3, 0.1]]), 0.1, 0.05, 1.0)
    np.testing.assert_allclose(est.estimate, [0.3, 0.1], atol=1e-15)
    assert est.info["n"] == hoeffding_samples(0.1, 0.05, 2, 1.0)


def test_classical_failure_rate_below_delta():
    o = BinaryOracle([0.7, 0.3], [1.0, 0.0])
    fails = sum(abs(classical_mvmc(o, 0.1, 0.05, 1.0, np.random.default_rng(s)).estimate[0] - 0.7) > 0.1
                for s in range(200))
    assert fails / 200 <= 0.05


# -- budgets ----------------------------------------------------------------------------------


def test_xi_values():
    assert xi(1) == 0.0 and xi(2) == 0.0
    assert xi(math.inf) == 0.5
    assert xi(4) == 0.25
    with pytest.raises(ContractError):
        xi(0.5)


def test_reinforce_budget_example():
    assert query_budget("reinforce", dict(T=3, r_max=1, gamma=0.5, eps=0.1, d=2, delta=0.05)) == 222


def test_norm_conversion_factor():
    base = dict(d=16, eps_Q=1, B_p=1, gamma=0.5, eps=0.1, delta=0.05)
    n2 = query_budget("cqrac", {**base, "p": 2})
    ninf = query_budget("cqrac", {**base, "p": math.inf})
    assert ninf / n2 == pytest.approx(4.0, rel=0.01)


def test_budget_missing_symbols_are_named():
    with pytest.raises(ContractError, match="T, r_max"):
        query_budget("reinforce", dict(gamma=0.5, eps=0.1, d=2, delta=0.05))
    with pytest.raises(ContractError):
        budget_symbols("nonsense")


def test_every_variant_evaluates():
    params = dict(T=3, r_max=1, gamma=0.5, eps=0.1, d=4, delta=0.05, p=2, B_p=1, B_1=1, eps_Q=1, sigma_nabla=1,
                  Sigma_X_norm=1, C_p=1, D=1, temperature=1, B=1)
    for v in BUDGET_VARIANTS:
        assert query_budget(v, params) > 0


def test_quantum_and_classical_budget_ratio_is_quadratic():
    base = dict(T=3, r_max=1, gamma=0.5, d=2, delta=0.05, B_1=1)
    ratio = []
    for eps in (0.1, 0.01):
        ratio.append(query_budget("classical_reinforce", {**base, "eps": eps}) / query_budget("reinforce", {**base, "eps": eps}))
    assert ratio[1] / ratio[0] == pytest.approx(10.0, rel=0.01)
