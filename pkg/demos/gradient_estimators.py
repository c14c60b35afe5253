"""Compare gradient estimators on the two-state benchmark: error and queries per estimate."""
import numpy as np

from qkrl.benchmarks import two_state_benchmark
from qkrl.gradest_analytical import classical_mvmc, hoeffding_samples, qbounded, query_budget, reinforce_oracle, reinforce_scale
from qkrl.gradest_numerical import classical_cd_gradient, quantum_gevrey_gradient
from qkrl.policies import RepresenterRawPqc
from qkrl.qmdp import exact_policy_gradient

mdp = two_state_benchmark()
pol = RepresenterRawPqc.tabular(mdp.layout, [[0.7], [1.9]])
truth = exact_policy_gradient(mdp, pol)
rng = np.random.default_rng(0)
eps, delta = 0.05, 0.05

oracle = reinforce_oracle(mdp, pol)
scale = max(reinforce_scale(mdp), oracle.max_norm())
n = query_budget("reinforce", {"T": mdp.horizon, "r_max": mdp.r_max, "gamma": mdp.gamma, "eps": eps,
                               "d": oracle.dim, "delta": delta})

estimates = {
    "quantum Gevrey (phase oracle)": quantum_gevrey_gradient(mdp, pol, eps, delta, rng=rng),
    "QBounded on REINFORCE": qbounded(oracle, n, delta, rng, scale=scale, eps=eps),
    "classical REINFORCE": classical_mvmc(oracle, eps, delta, scale, rng, n=hoeffding_samples(eps, delta, oracle.dim, scale)),
    "classical central differences": classical_cd_gradient(mdp, pol, eps, delta, exact_values=True),
}

print(f"exact gradient {np.round(truth, 5)}")
for name, est in estimates.items():
    err = np.max(np.abs(est.estimate - truth))
    print(f"{name:32s} error {err:.4f}  queries {est.n_queries:>12d}")
