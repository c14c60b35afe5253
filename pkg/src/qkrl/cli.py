"""Command-line entry point: ``qkrl {run,scale,budget,validate-mdp,dump-policy}``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import BudgetError, ConfigError, ContractError
from .harness import BACKENDS, build_mdp, build_policy, budget_table, load_config, reinforce_scaling_study, run
from .qmdp import exact_value, load_mdp, optimal_value

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET = 0, 2, 3


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--seed", type=_seed, metavar="U64", help="override the configured seed")
    common.add_argument("--out", metavar="DIR", help="output directory for artifacts")
    common.add_argument("--backend", choices=BACKENDS, help="oracle fidelity")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    p = argparse.ArgumentParser(prog="qkrl", description="Quantum kernel policy-gradient experiments on tabular MDPs.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="train or estimate per the config; writes CSV/JSON artifacts")
    sub.add_parser("scale", parents=[common], help="quantum vs classical REINFORCE error-vs-queries slopes")
    b = sub.add_parser("budget", parents=[common], help="evaluate query-complexity formulas, one JSON row per variant")
    b.add_argument("--param", action="append", default=[], metavar="NAME=VALUE", help="budget symbol (repeatable)")
    v = sub.add_parser("validate-mdp", parents=[common], help="check an MDP file or the config's MDP")
    v.add_argument("mdp_path", nargs="?", help="MDP JSON file")
    sub.add_parser("dump-policy", parents=[common], help="print the configured policy and its action table")
    return p


def _config(args):
    if not args.config:
        raise ConfigError("--config PATH is required for this command")
    cfg = load_config(args.config)
    return cfg.override(seed=args.seed, out=args.out, backend=args.backend)


def _emit(obj, out_dir: str | None, name: str) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    print(text)
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / name).write_text(text + "\n")


def _cmd_run(args) -> int:
    cfg = _config(args)
    log = None if args.quiet else (lambda m: print(m, file=sys.stderr))
    res = run(cfg, log=log)
    if not args.quiet:
        print(json.dumps({k: res.summary[k] for k in ("final_value", "optimal_value", "total_queries")}, sort_keys=True))
    return EXIT_OK


def _cmd_scale(args) -> int:
    cfg = _config(args)
    mdp = build_mdp(cfg)
    policy = build_policy(cfg, mdp)
    sc = cfg.scale
    reports = reinforce_scaling_study(mdp, policy, sc.get("n_grid", [256, 512, 1024, 2048]), sc.get("seeds", 40),
                                      sc.get("param_noise", 0.5), cfg.delta, int(cfg.seed))
    _emit({k: r.to_dict() for k, r in reports.items()}, cfg.out, "scaling.json")
    return EXIT_OK


def _parse_params(pairs) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"budget parameter {item!r} must look like NAME=VALUE")
        k, v = item.split("=", 1)
        out[k.strip()] = float("inf") if v.strip() in ("inf", "infinity") else float(v)
    return out


def _cmd_budget(args) -> int:
    params = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            params.update(json.loads(path.read_text()).get("budget", {}))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    params.update(_parse_params(args.param))
    rows = budget_table(params)
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "budget.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    return EXIT_OK


def _cmd_validate(args) -> int:
    mdp = load_mdp(args.mdp_path) if args.mdp_path else build_mdp(_config(args))
    info = {"name": mdp.name, "states": mdp.n_states, "actions": mdp.n_actions, "horizon": mdp.horizon,
            "gamma": mdp.gamma, "r_max": mdp.r_max, "qubits_per_step": mdp.layout.n_state_qubits + mdp.layout.n_action_qubits,
            "optimal_value": optimal_value(mdp)}
    if not args.quiet:
        print(json.dumps(info, sort_keys=True))
    return EXIT_OK


def _cmd_dump_policy(args) -> int:
    cfg = _config(args)
    mdp = build_mdp(cfg)
    pol = build_policy(cfg, mdp)
    _emit({"policy": pol.to_dict(), "probs": np.round(pol.probs(), 12).tolist(), "value": exact_value(mdp, pol)},
          cfg.out, "policy.json")
    return EXIT_OK


_COMMANDS = {"run": _cmd_run, "scale": _cmd_scale, "budget": _cmd_budget, "validate-mdp": _cmd_validate,
             "dump-policy": _cmd_dump_policy}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except BudgetError as exc:
        print(f"budget error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
