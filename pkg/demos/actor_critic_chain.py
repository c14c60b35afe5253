"""Train CQRAC and DCQRAC on the two-state chain and print the learning curve."""
from qkrl.actorcritic import ActorCriticConfig, greedy_value, init_cqrac, init_dcqrac, train
from qkrl.benchmarks import chain_mdp, default_gauss_policy
from qkrl.qmdp import exact_value, optimal_value

mdp = chain_mdp()
v_star = optimal_value(mdp)
cfg = ActorCriticConfig(eta=0.5, eps=0.1)

for name, init, det in (("CQRAC", init_cqrac, False), ("DCQRAC", init_dcqrac, True)):
    st = init(mdp, default_gauss_policy(mdp, sigma=0.25), cfg, seed=0)
    train(st, 200, deterministic=det)
    curve = [h["value"] for h in st.history]
    print(f"{name}: V after 1/50/200 iterations = {curve[0]:.4f} / {curve[49]:.4f} / {curve[-1]:.4f}  (V* = {v_star:.4f})")
    if det:
        print(f"  mean-action (greedy) value {greedy_value(st):.4f}")
    print(f"  final value {exact_value(mdp, st.policy):.4f}, queries {st.ledger.total}")
