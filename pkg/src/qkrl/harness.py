"""Experiment configuration, seeded runs with CSV/JSON artifacts, scaling studies and budget tables."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Callable

import jsonschema
import numpy as np
from scipy import stats

from .actorcritic import ActorCriticConfig, TrainState, greedy_value, init_cqrac, init_dcqrac, train
from .benchmarks import BENCHMARKS, default_gauss_policy, default_rawpqc_policy
from .errors import BudgetError, ConfigError, ContractError
from .gradest_analytical import (budget_symbols, classical_mvmc, hoeffding_samples, qbounded, query_budget, reinforce_oracle,
                                 reinforce_scale)
from .gradest_numerical import classical_cd_gradient, quantum_gevrey_gradient
from .policies import GaussQkp, policy_from_dict
from .qmdp import QueryLedger, TabularMdp, exact_policy_gradient, exact_value, load_mdp, optimal_value

ESTIMATORS = ("qpg-numerical", "qpg-analytical", "cqrac", "dcqrac", "classical-cd", "classical-reinforce")
BACKENDS = ("exact-phase", "probability-oracle", "idealized", "accounting")
_ALLOWED_BACKENDS = {
    "qpg-numerical": ("exact-phase", "probability-oracle", "accounting"),
    "qpg-analytical": ("idealized", "accounting"),
    "cqrac": ("idealized", "accounting"),
    "dcqrac": ("idealized", "accounting"),
    "classical-cd": ("accounting",),
    "classical-reinforce": ("accounting",),
}
_DEFAULT_BACKEND = {"qpg-numerical": "exact-phase", "qpg-analytical": "idealized", "cqrac": "idealized",
                    "dcqrac": "idealized"}
METRIC_COLUMNS = ("iteration", "value", "grad_norm", "grad_error", "eps_Q", "C_p", "queries")


def _schema() -> dict:
    return json.loads(resources.files("qkrl").joinpath("schemas/run_config.json").read_text())


@dataclass
class RunConfig:
    mdp: str | dict
    estimator: str
    policy: dict | None = None
    backend: str | None = None
    eps: float = 0.1
    delta: float = 0.05
    seed: int = 0
    iterations: int = 5
    eta: float = 0.5
    max_queries: int | None = None
    out: str | None = None
    name: str = "run"
    options: dict = field(default_factory=dict)
    scale: dict = field(default_factory=dict)
    base_dir: str = "."

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}; choose from {ESTIMATORS}")
        if self.backend is None:
            self.backend = _DEFAULT_BACKEND.get(self.estimator)
        # classical estimators simulate unless asked for accounting
        if self.backend is not None and self.backend not in _ALLOWED_BACKENDS[self.estimator]:
            raise ConfigError(f"backend {self.backend!r} does not apply to {self.estimator!r}; "
                              f"use one of {_ALLOWED_BACKENDS[self.estimator]}")
        if self.eps <= 0 or not 0 < self.delta < 1:
            raise ConfigError("need eps > 0 and 0 < delta < 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "RunConfig":
        try:
            jsonschema.validate(d, _schema())
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"invalid config at {where}: {exc.message}") from None
        return cls(base_dir=str(base_dir), **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return {k: v for k, v in d.items() if v is not None and v != {}}

    def override(self, **kw) -> "RunConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update({k: v for k, v in kw.items() if v is not None})
        return RunConfig(**d)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(d, path.parent)


def build_mdp(cfg: RunConfig) -> TabularMdp:
    if isinstance(cfg.mdp, dict):
        try:
            return BENCHMARKS[cfg.mdp["builtin"]](**cfg.mdp.get("params", {}))
        except TypeError as exc:
            raise ConfigError(f"bad builtin MDP parameters: {exc}") from None
    path = Path(cfg.mdp)
    if not path.is_absolute():
        path = Path(cfg.base_dir) / path
    return load_mdp(path)


def build_policy(cfg: RunConfig, mdp: TabularMdp):
    spec = dict(cfg.policy or {"variant": "default-gauss" if cfg.estimator in ("cqrac", "dcqrac") else "default-rawpqc"})
    v = spec.pop("variant")
    if v == "default-gauss":
        return default_gauss_policy(mdp, **spec)
    if v == "default-rawpqc":
        return default_rawpqc_policy(mdp, **spec)
    return policy_from_dict({"variant": v, **spec}, mdp.layout)


# -- runs -------------------------------------------------------------------------------------------


@dataclass
class RunResult:
    metrics: list
    ledger: QueryLedger
    summary: dict
    paths: dict


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def metrics_csv(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c, float("nan"))) for c in METRIC_COLUMNS])
    return buf.getvalue()


def _ac_config(cfg: RunConfig) -> ActorCriticConfig:
    known = {f.name for f in fields(ActorCriticConfig)}
    bad = sorted(set(cfg.options) - known)
    if bad:
        raise ConfigError(f"unknown actor-critic options: {', '.join(bad)}")
    opts = dict(cfg.options)
    opts.setdefault("estimator", "exact" if cfg.backend == "accounting" else "quantum")
    return ActorCriticConfig(eta=cfg.eta, eps=cfg.eps, delta=cfg.delta, **opts)


def _run_actor_critic(cfg: RunConfig, mdp: TabularMdp, policy) -> tuple[list, QueryLedger, dict]:
    if not isinstance(policy, GaussQkp):
        raise ConfigError(f"{cfg.estimator} needs a GaussQkp policy")
    det = cfg.estimator == "dcqrac"
    init = init_dcqrac if det else init_cqrac
    st: TrainState = init(mdp, policy, _ac_config(cfg), seed=int(cfg.seed))
    train(st, cfg.iterations, deterministic=det)
    rows = [{**h, "grad_error": float("nan")} for h in st.history]
    extra = {"final_value": exact_value(mdp, st.policy), "greedy_value": greedy_value(st),
             "checkpoint": {"policy": st.policy.to_dict(), "critic_w": st.critic.w.tolist(),
                            "critic_v": None if st.critic.v is None else st.critic.v.tolist()}}
    return rows, st.ledger, extra


def _estimate(cfg: RunConfig, mdp: TabularMdp, policy, rng: np.random.Generator, truth: np.ndarray):
    """One gradient estimate and its ledger for a gradient-estimator run."""
    opts = dict(cfg.options)
    d = truth.size
    T, r_max, gamma = mdp.horizon, mdp.r_max, mdp.gamma
    if cfg.backend == "accounting":
        variant = {"qpg-numerical": "numerical_qpg", "qpg-analytical": "reinforce",
                   "classical-cd": "classical_cd", "classical-reinforce": "mvmc"}[cfg.estimator]
        params = {"d": d, "D": opts.get("D", 1.0), "T": T, "r_max": r_max, "gamma": gamma, "eps": cfg.eps,
                  "delta": cfg.delta, "B": reinforce_scale(mdp)}
        led = QueryLedger()
        led.add("accounted_queries", query_budget(variant, params))
        return truth.copy(), led
    if cfg.estimator == "qpg-numerical":
        est = quantum_gevrey_gradient(mdp, policy, cfg.eps, cfg.delta, backend=cfg.backend, rng=rng, **opts)
    elif cfg.estimator == "classical-cd":
        est = classical_cd_gradient(mdp, policy, cfg.eps, cfg.delta, rng=rng, max_queries=cfg.max_queries, **opts)
    else:
        oracle = reinforce_oracle(mdp, policy)
        scale = max(reinforce_scale(mdp, opts.get("B", 1.0)), oracle.max_norm())
        if cfg.estimator == "qpg-analytical":
            n = int(opts.get("n") or query_budget("reinforce", {"T": T, "r_max": r_max, "gamma": gamma,
                                                                "eps": cfg.eps, "d": d, "delta": cfg.delta}))
            est = qbounded(oracle, n, cfg.delta, rng, scale=scale, eps=cfg.eps)
        else:
            n = opts.get("n") or hoeffding_samples(cfg.eps, cfg.delta, d, scale)
            if cfg.max_queries is not None and n * T > cfg.max_queries:
                raise BudgetError(f"classical sampling needs {n * T} queries, cap is {cfg.max_queries}")
            est = classical_mvmc(oracle, cfg.eps, cfg.delta, scale, rng, n=n)
    return est.estimate, est.queries


def _run_gradient_ascent(cfg: RunConfig, mdp: TabularMdp, policy) -> tuple[list, QueryLedger, dict]:
    ss = np.random.SeedSequence(int(cfg.seed))
    ledger = QueryLedger()
    rows = []
    for it, child in enumerate(ss.spawn(cfg.iterations)):
        truth = exact_policy_gradient(mdp, policy)
        g, led = _estimate(cfg, mdp, policy, np.random.default_rng(child), truth)
        ledger.merge(led)
        err = float(np.max(np.abs(g - truth))) if g.size else 0.0
        policy = policy.with_params(policy.params + cfg.eta * g)
        rows.append({"iteration": it + 1, "value": exact_value(mdp, policy), "grad_norm": float(np.linalg.norm(g)),
                     "grad_error": err, "eps_Q": float("nan"), "C_p": float("nan"), "queries": ledger.total})
    extra = {"final_value": exact_value(mdp, policy), "checkpoint": {"policy": policy.to_dict()}}
    return rows, ledger, extra


def run(cfg: RunConfig, out: str | Path | None = None, log: Callable[[str], None] | None = None) -> RunResult:
    """Execute a configured run; writes ``metrics.csv``, ``ledger.json``, ``summary.json`` and ``checkpoint.json``."""
    mdp = build_mdp(cfg)
    policy = build_policy(cfg, mdp)
    if cfg.estimator in ("cqrac", "dcqrac"):
        rows, ledger, extra = _run_actor_critic(cfg, mdp, policy)
    else:
        rows, ledger, extra = _run_gradient_ascent(cfg, mdp, policy)
    if log:
        for r in rows:
            log(f"iter {r['iteration']:4d}  V={r['value']:.6f}  |g|={r['grad_norm']:.4g}  queries={r['queries']}")
    checkpoint = extra.pop("checkpoint")
    summary = {"name": cfg.name, "estimator": cfg.estimator, "backend": cfg.backend, "seed": int(cfg.seed),
               "iterations": cfg.iterations, "initial_value": exact_value(mdp, policy),
               "optimal_value": optimal_value(mdp), **extra, "queries": ledger.as_dict(),
               "total_queries": ledger.total, "config": cfg.to_dict()}
    paths = {}
    target = out or cfg.out
    if target is not None:
        outdir = Path(target)
        outdir.mkdir(parents=True, exist_ok=True)
        files = {"metrics.csv": metrics_csv(rows),
                 "ledger.json": json.dumps(ledger.as_dict(), indent=2, sort_keys=True) + "\n",
                 "summary.json": json.dumps(summary, indent=2, sort_keys=True) + "\n",
                 "checkpoint.json": json.dumps({**checkpoint, "ledger": ledger.as_dict()}, indent=2, sort_keys=True) + "\n"}
        for name, text in files.items():
            (outdir / name).write_text(text)
            paths[name] = str(outdir / name)
    return RunResult(rows, ledger, summary, paths)


# -- scaling studies ------------------------------------------------------------------------------


@dataclass
class SlopeReport:
    estimator: str
    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    r_value: float
    queries: list
    errors: list
    flag: str = ""

    @property
    def defined(self) -> bool:
        return not self.flag

    def within(self, lo: float, hi: float) -> bool:
        return self.defined and lo <= self.slope <= hi

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}


def fit_slope(queries, errors, estimator: str = "estimator", confidence: float = 0.95) -> SlopeReport:
    """Least-squares slope of ``log(error)`` against ``log(queries)`` with a t-based confidence interval."""
    q = np.asarray(queries, dtype=float)
    e = np.asarray(errors, dtype=float)
    if q.size != e.size:
        raise ContractError("queries and errors must have the same length")
    if q.size < 4:
        raise ContractError(f"a slope needs at least 4 grid points, got {q.size}")
    if np.any(q <= 0) or np.unique(q).size < q.size:
        raise ContractError("query grid must be positive and strictly distinct")
    nan = float("nan")
    if np.all(e <= 0):
        return SlopeReport(estimator, nan, nan, nan, nan, nan, q.tolist(), e.tolist(), "zero-error: slope undefined")
    if np.any(e <= 0):
        return SlopeReport(estimator, nan, nan, nan, nan, nan, q.tolist(), e.tolist(), "some errors are zero: slope undefined")
    x, y = np.log(q), np.log(e)
    if np.ptp(y) < 1e-12:
        return SlopeReport(estimator, 0.0, float(y[0]), 0.0, 0.0, nan, q.tolist(), e.tolist(), "constant error: slope degenerate")
    fit = stats.linregress(x, y)
    t = stats.t.ppf(0.5 + confidence / 2, q.size - 2)
    return SlopeReport(estimator, float(fit.slope), float(fit.intercept), float(fit.slope - t * fit.stderr),
                       float(fit.slope + t * fit.stderr), float(fit.rvalue), q.tolist(), e.tolist())


def scaling_study(trial: Callable, grid, seeds: int, estimators=None) -> dict:
    """Run ``trial(estimator, grid_value, seed) -> (error, queries)`` over a grid and fit log-log slopes.

    Errors are averaged over seeds at each grid value; queries likewise.
    """
    grid = list(grid)
    if len(grid) < 4:
        raise ContractError(f"a scaling study needs at least 4 grid points, got {len(grid)}")
    if len(set(grid)) != len(grid):
        raise ContractError("scaling grid has repeated values")
    if seeds < 1:
        raise ContractError("need at least one seed")
    out = {}
    for name in estimators or ("estimator",):
        errs, qs = [], []
        for g in grid:
            res = [trial(name, g, s) for s in range(seeds)]
            errs.append(float(np.mean([r[0] for r in res])))
            qs.append(float(np.mean([r[1] for r in res])))
        out[name] = fit_slope(qs, errs, name)
    return out


def reinforce_scaling_study(mdp: TabularMdp, policy, n_grid, seeds: int = 40, param_noise: float = 0.5,
                            delta: float = 0.05, seed: int = 0) -> dict:
    """Quantum (QBounded) vs classical (iid mean) REINFORCE error against queries.

    Each seed draws a fresh policy instance by perturbing the parameters with
    ``N(0, param_noise^2)`` noise; the classical estimator gets the same query
    count as the quantum one at each grid point.
    """
    base = np.asarray(policy.params, dtype=float)
    scale = reinforce_scale(mdp)
    cache: dict = {}

    def instance(s: int):
        if s not in cache:
            rng = np.random.default_rng([seed, s])
            p = policy.with_params(base + param_noise * rng.standard_normal(base.size))
            o = reinforce_oracle(mdp, p)
            cache[s] = (o, o.expectation(), max(scale, o.max_norm()))
        return cache[s]

    quantum_queries: dict = {}

    def trial(name: str, n: int, s: int):
        o, truth, sc = instance(s)
        rng = np.random.default_rng([seed, s, n, 0 if name == "quantum" else 1])
        if name == "quantum":
            est = qbounded(o, int(n), delta, rng, scale=sc)
            quantum_queries[(n, s)] = est.n_queries
        else:
            budget = quantum_queries.get((n, s), int(n))
            est = classical_mvmc(o, 1.0, delta, sc, rng, n=max(1, budget // o.calls_per_query))
        return float(np.max(np.abs(est.estimate - truth))), est.n_queries

    return scaling_study(trial, n_grid, seeds, ("quantum", "classical"))


# -- budget tables --------------------------------------------------------------------------------

BUDGET_ROWS = (
    ("softmax-pqc policy gradient (classical sampling)", "softmax_pqc_pg"),
    ("numerical quantum policy gradient", "numerical_qpg"),
    ("analytical quantum policy gradient", "analytical_qpg"),
    ("compatible quantum RKHS actor-critic", "cqrac"),
    ("compatible quantum RKHS actor-critic (variance form)", "cqrac_variance"),
    ("deterministic compatible quantum RKHS actor-critic", "dcqrac"),
)


def budget_table(params: dict, variants=None) -> list[dict]:
    """One row per query-complexity formula; missing symbols across all rows are reported together."""
    rows = [(label, v) for label, v in BUDGET_ROWS if variants is None or v in variants]
    p = dict(params)
    if "d" not in p and "N" in p and "A" in p:
        p["d"] = p["N"] * p["A"]
    missing = {}
    for label, v in rows:
        miss = [s for s in budget_symbols(v) if s not in p]
        if miss:
            missing[v] = miss
    if missing:
        listing = "; ".join(f"{v}: {', '.join(m)}" for v, m in missing.items())
        raise ContractError(f"budget table is missing symbols ({listing})")
    return [{"row": label, "variant": v, "queries": query_budget(v, p)} for label, v in rows]
