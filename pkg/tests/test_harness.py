import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from qkrl.benchmarks import two_state_benchmark
from qkrl.errors import BudgetError, ConfigError, ContractError
from qkrl.harness import (BUDGET_ROWS, METRIC_COLUMNS, RunConfig, budget_table, fit_slope, load_config,
                          reinforce_scaling_study, run, scaling_study)
from qkrl.policies import RepresenterSoftmaxPqc, policy_from_dict

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_load_config_resolves_relative_mdp():
    cfg = load_config(CONFIGS / "chain_cqrac.json")
    assert cfg.estimator == "cqrac" and cfg.backend == "idealized"
    assert Path(cfg.base_dir) == CONFIGS


def test_missing_config_names_path(tmp_path):
    missing = tmp_path / "nope.json"
    with pytest.raises(ConfigError, match="nope.json"):
        load_config(missing)


def test_missing_mdp_file_names_path(tmp_path):
    cfg = RunConfig.from_dict({"mdp": "absent_mdp.json", "estimator": "cqrac"}, tmp_path)
    with pytest.raises(ConfigError, match="absent_mdp.json"):
        run(cfg)


def test_invalid_json_is_config_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="bad.json"):
        load_config(p)


@pytest.mark.parametrize("patch,msg", [
    ({"estimator": "magic"}, "estimator"),
    ({"estimator": "classical-cd", "backend": "exact-phase"}, "backend"),
    ({"estimator": "cqrac", "eps": -1.0}, "eps"),
    ({"estimator": "cqrac", "delta": 1.5}, "delta"),
])
def test_config_validation(patch, msg):
    d = {"mdp": {"builtin": "bandit"}, "estimator": "cqrac", **patch}
    with pytest.raises(ConfigError, match=msg):
        RunConfig.from_dict(d)


def test_unknown_actor_critic_option():
    cfg = RunConfig.from_dict({"mdp": {"builtin": "bandit"}, "estimator": "cqrac", "iterations": 1,
                               "options": {"not_an_option": 1}})
    with pytest.raises(ConfigError, match="not_an_option"):
        run(cfg)


def test_to_dict_round_trip():
    cfg = load_config(CONFIGS / "two_state_reinforce.json")
    again = RunConfig.from_dict(cfg.to_dict(), cfg.base_dir)
    assert again.to_dict() == cfg.to_dict()


def test_smoke_run_writes_artifacts_quickly(tmp_path):
    cfg = load_config(CONFIGS / "bandit_smoke.json")
    t0 = time.perf_counter()
    res = run(cfg, tmp_path)
    assert time.perf_counter() - t0 < 10.0
    for name in ("metrics.csv", "ledger.json", "summary.json", "checkpoint.json"):
        assert (tmp_path / name).is_file()
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    assert len(lines) == 1 + cfg.iterations
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["total_queries"] == sum(summary["queries"].values()) == res.ledger.total


@pytest.mark.parametrize("name", ["bandit_smoke.json", "two_state_reinforce.json", "two_state_qpg_numerical.json"])
def test_same_seed_gives_byte_identical_csv(tmp_path, name):
    cfg = load_config(CONFIGS / name)
    run(cfg, tmp_path / "a")
    run(cfg, tmp_path / "b")
    for f in ("metrics.csv", "ledger.json", "summary.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_different_seed_changes_sampled_run():
    # the quantum median concentrates on one grid point, so the classical sampler shows seed dependence
    d = json.loads((CONFIGS / "two_state_reinforce.json").read_text())
    d.update(estimator="classical-reinforce", options={"n": 200})
    d.pop("backend", None)
    cfg = RunConfig.from_dict(d)
    a = run(cfg).metrics
    b = run(cfg.override(seed=1)).metrics
    assert [r["value"] for r in a] != [r["value"] for r in b]


def test_checkpoint_policy_reloads(tmp_path):
    cfg = load_config(CONFIGS / "two_state_reinforce.json")
    res = run(cfg, tmp_path)
    ck = json.loads((tmp_path / "checkpoint.json").read_text())
    pol = policy_from_dict(ck["policy"], two_state_benchmark().layout)
    assert isinstance(pol, RepresenterSoftmaxPqc)
    assert res.summary["final_value"] == pytest.approx(res.metrics[-1]["value"], abs=1e-15)


def test_gradient_run_error_within_eps():
    cfg = load_config(CONFIGS / "two_state_qpg_numerical.json")
    res = run(cfg)
    assert all(r["grad_error"] <= cfg.eps for r in res.metrics)
    assert res.ledger.counts["phase_oracle"] == res.ledger.total


def test_accounting_backend_charges_formula_without_simulation():
    cfg = RunConfig.from_dict({"mdp": {"builtin": "two_state"}, "estimator": "classical-cd", "backend": "accounting",
                               "iterations": 2, "policy": {"variant": "RawPqc", "theta": [[0.7], [1.9]]}})
    res = run(cfg)
    assert set(res.ledger.counts) == {"accounted_queries"}
    assert all(r["grad_error"] == 0.0 for r in res.metrics)
    assert res.metrics[1]["queries"] == 2 * res.metrics[0]["queries"]


def test_classical_cap_raises_budget_error():
    cfg = RunConfig.from_dict({"mdp": {"builtin": "two_state"}, "estimator": "classical-cd", "max_queries": 1000,
                               "policy": {"variant": "RawPqc", "theta": [[0.7], [1.9]]}})
    with pytest.raises(BudgetError):
        run(cfg)


def test_classical_reinforce_cap():
    cfg = RunConfig.from_dict({"mdp": {"builtin": "two_state"}, "estimator": "classical-reinforce", "max_queries": 10})
    with pytest.raises(BudgetError):
        run(cfg)


# -- slopes ------------------------------------------------------------------------------------


def test_fit_slope_recovers_power_law():
    q = np.array([100, 200, 400, 800, 1600])
    rep = fit_slope(q, 3.0 * q**-0.5)
    assert rep.slope == pytest.approx(-0.5, abs=1e-12)
    assert rep.ci_low <= rep.slope <= rep.ci_high
    assert rep.within(-0.6, -0.4)


def test_fit_slope_confidence_interval_covers_noisy_truth():
    rng = np.random.default_rng(0)
    q = np.geomspace(64, 4096, 6)
    rep = fit_slope(q, q**-1.0 * np.exp(0.05 * rng.standard_normal(6)))
    assert rep.ci_low < -1.0 < rep.ci_high


@pytest.mark.parametrize("q", [[1, 2, 3], [1, 2, 2, 4], [0, 1, 2, 3]])
def test_fit_slope_degenerate_grid(q):
    with pytest.raises(ContractError):
        fit_slope(q, np.ones(len(q)))


def test_fit_slope_zero_error_flagged():
    rep = fit_slope([1, 2, 4, 8], [0.0, 0.0, 0.0, 0.0])
    assert not rep.defined and math.isnan(rep.slope) and "undefined" in rep.flag
    assert rep.to_dict()["slope"] is None


def test_fit_slope_constant_error_flagged():
    rep = fit_slope([1, 2, 4, 8], [0.3] * 4)
    assert not rep.defined and not rep.within(-1, 1)


def test_scaling_study_grid_checks():
    with pytest.raises(ContractError):
        scaling_study(lambda *a: (1.0, 1), [1, 2, 3], 2)
    with pytest.raises(ContractError):
        scaling_study(lambda *a: (1.0, 1), [1, 2, 2, 3], 2)


def test_scaling_study_averages_seeds():
    rep = scaling_study(lambda name, g, s: (g**-1.0 * (1 + 0.1 * (s - 0.5)), g), [10, 20, 40, 80], 2)
    assert rep["estimator"].slope == pytest.approx(-1.0, abs=1e-12)


def test_constant_payload_control_flags_slope():
    P = np.zeros((2, 2, 2))
    P[:, :, 0] = 1.0
    mdp = two_state_benchmark()
    from qkrl.qmdp import mdp_from_arrays
    flat = mdp_from_arrays(P, np.zeros((2, 2)), 0.5, 3)
    pol = RepresenterSoftmaxPqc(flat.layout, [[0.0], [1.0]], [[0.3, -0.2], [-0.1, 0.4]])
    reps = reinforce_scaling_study(flat, pol, [16, 32, 64, 128], seeds=2)
    for rep in reps.values():
        assert not rep.defined
    assert mdp.n_states == 2


def test_reinforce_scaling_small_grid_separates():
    mdp = two_state_benchmark()
    pol = RepresenterSoftmaxPqc(mdp.layout, [[0.0], [1.0]], [[0.3, -0.2], [-0.1, 0.4]])
    reps = reinforce_scaling_study(mdp, pol, [128, 256, 512, 1024], seeds=12)
    assert reps["quantum"].slope < reps["classical"].slope - 0.2
    # the classical baseline gets the quantum query count at each grid point
    assert reps["quantum"].queries == reps["classical"].queries


# -- budget table ----------------------------------------------------------------------------------


def _budget_params():
    return json.loads((CONFIGS / "budget_params.json").read_text())["budget"]


def test_budget_table_six_rows():
    rows = budget_table(_budget_params())
    assert [r["variant"] for r in rows] == [v for _, v in BUDGET_ROWS]
    assert len(rows) == 6
    assert [r["queries"] for r in rows] == [13280, 940, 443, 148, 148, 74]


def test_budget_table_lists_missing_symbols():
    p = _budget_params()
    del p["sigma_nabla"], p["eps_Q"]
    with pytest.raises(ContractError) as exc:
        budget_table(p)
    assert "sigma_nabla" in str(exc.value) and "eps_Q" in str(exc.value)


def test_budget_table_subset_and_derived_d():
    p = _budget_params()
    rows = budget_table(p, variants=["analytical_qpg"])
    assert len(rows) == 1 and rows[0]["queries"] == 443


def test_budget_table_monotone_in_inverse_eps():
    p = _budget_params()
    prev = None
    for eps in (0.2, 0.1, 0.05, 0.025):
        q = [r["queries"] for r in budget_table({**p, "eps": eps})]
        if prev is not None:
            assert all(a >= b for a, b in zip(q, prev))
        prev = q
