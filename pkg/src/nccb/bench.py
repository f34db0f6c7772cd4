"""Benchmark drivers with their statistical tests and table emission.

Every bench is a pure function of its :class:`BenchConfig`: each seed is run
by :func:`run_seed` (embarrassingly parallel) and the per-seed payloads are
reduced by the bench's aggregator into a :class:`BenchResult`.

Reward levels are reported as the mean per-episode total reward (sum of the
``J * I`` rewards of an episode, averaged over the episodes of a run).
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import __version__
from .aegis import TRAJECTORY_COLUMNS, GateConfig, aegis_run
from .env import (SHIFTS, SPLIT_STREAM, ConfigError, ShiftSpec, apply_shift, episode_rng,
                  legacy_from_config, spec_from_config)
from .policy import AGENT_KINDS, build_agent, run_agent, run_frozen
from .posterior import FactorisedBelief, build_p0_from_prior_data
from .prism import (CertDataset, certificate_from_panel, draw_panel, evaluate_losses,
                    posterior_target, split_episodes)
from .stats import TestResult, paired_t, spearman_rho, welch_t

ROW_COLUMNS = ("bench", "seed", "arm", "condition", "metric", "value")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchConfig:
    """Everything a bench run depends on.

    Attributes
    ----------
    bench : str
        Registry id.
    K : int
        Episodes per run (already scaled).
    seeds : tuple of int
    agents : tuple of str
        Arms compared by the bench.
    env : dict
        Environment mapping understood by :func:`nccb.env.spec_from_config`.
    params : dict
        Bench-specific settings, validated against the registry defaults.
    scale : float
        Factor applied to ``K`` and the bench's episode grids.
    """

    bench: str
    K: int
    seeds: tuple[int, ...]
    agents: tuple[str, ...]
    env: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    scale: float = 1.0
    root_seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["agents"] = list(self.agents)
        return d

    def config_hash(self) -> str:
        raw = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(raw).hexdigest()[:16]


@dataclass
class BenchResult:
    """Long-format rows, test statistics and an optional trajectory."""

    config: BenchConfig
    rows: list[dict]
    tests: dict[str, TestResult]
    extra: dict = field(default_factory=dict)
    trajectory: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.tests = {k: v for k, v in self.tests.items() if v is not None}

    def values(self, arm: str, condition: str = "", metric: str = "reward") -> np.ndarray:
        """Per-seed values of one cell in seed order."""
        sel = [r for r in self.rows
               if r["arm"] == arm and r["condition"] == condition and r["metric"] == metric]
        sel.sort(key=lambda r: r["seed"])
        return np.array([r["value"] for r in sel], dtype=float)

    def table(self, metric: str = "reward") -> list[dict]:
        """Mean, standard deviation and seed count per ``(arm, condition)``."""
        cells: dict[tuple[str, str], list[float]] = {}
        for r in self.rows:
            if r["metric"] == metric:
                cells.setdefault((r["arm"], r["condition"]), []).append(r["value"])
        out = []
        for (arm, cond), v in cells.items():
            a = np.asarray(v, dtype=float)
            out.append({"arm": arm, "condition": cond, "metric": metric,
                        "mean": float(a.mean()),
                        "std": float(a.std(ddof=1)) if a.size > 1 else 0.0,
                        "n_seeds": int(a.size)})
        return out

    def summary(self) -> dict:
        metrics = sorted({r["metric"] for r in self.rows})
        return {"bench": self.config.bench, "version": __version__,
                "config": self.config.to_dict(),
                "tables": {m: self.table(m) for m in metrics},
                "tests": {k: v.as_dict() for k, v in self.tests.items()},
                "extra": self.extra}

    def summary_text(self) -> str:
        lines = [f"bench {self.config.bench}  K={self.config.K}  seeds={len(self.config.seeds)}"
                 f"  scale={self.config.scale}"]
        for metric in sorted({r["metric"] for r in self.rows}):
            lines.append(f"[{metric}]")
            for row in self.table(metric):
                cond = f" {row['condition']}" if row["condition"] else ""
                lines.append(f"  {row['arm']}{cond}: {row['mean']:.4g} +/- {row['std']:.3g}"
                             f" (n={row['n_seeds']})")
        if self.tests:
            lines.append("[tests]")
            for name, t in self.tests.items():
                lines.append(f"  {name}: {t.test} stat={t.statistic:.4g} df={t.df:.3g}"
                             f" p={t.p_value:.3g} ({t.alternative})")
        for key, val in self.extra.items():
            lines.append(f"{key}: {json.dumps(val, default=_json_default)}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> dict[str, str]:
        """Write the CSV, text and JSON summaries (and trajectory if any)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        b = self.config.bench
        paths = {"rows": out / f"bench_{b}.csv", "summary": out / f"bench_{b}_summary.txt",
                 "summary_json": out / f"bench_{b}_summary.json"}
        with open(paths["rows"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ROW_COLUMNS)
            for r in self.rows:
                w.writerow([b, r["seed"], r["arm"], r["condition"], r["metric"],
                            repr(float(r["value"]))])
        paths["summary"].write_text(self.summary_text())
        paths["summary_json"].write_text(
            json.dumps(self.summary(), indent=2, sort_keys=True, default=_json_default) + "\n")
        if self.trajectory:
            paths["trajectory"] = out / f"bench_{b}_trajectory.csv"
            _write_long_trajectory(self.trajectory, paths["trajectory"])
        return {k: str(v) for k, v in paths.items()}


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset, tuple)):
        return list(o)
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _write_long_trajectory(rows: Sequence[dict], path) -> None:
    cols = ("seed",) + TRAJECTORY_COLUMNS
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in sorted(rows, key=lambda r: (r["seed"], r["k"])):
            w.writerow([repr(v) if isinstance(v, float) else v for v in (r[c] for c in cols)])


def _row(seed, arm, condition, metric, value) -> dict:
    return {"seed": int(seed), "arm": arm, "condition": condition, "metric": metric,
            "value": float(value)}


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _spec_and_legacy(cfg: BenchConfig, env: Mapping | None = None):
    env = cfg.env if env is None else env
    spec = spec_from_config(env)
    return spec, legacy_from_config(spec, env)


def _agent_kwargs(cfg: BenchConfig, kind: str) -> dict:
    if kind == "flat_joint":
        return {}
    return dict(cfg.params.get("agent", {}) or {})


def _scaled(v: int, scale: float) -> int:
    return max(1, int(round(v * scale)))


def _welch(result_rows, a, b, condition="", metric="reward", alternative="two-sided"):
    def pick(arm):
        sel = sorted((r for r in result_rows if r["arm"] == arm and r["condition"] == condition
                      and r["metric"] == metric), key=lambda r: r["seed"])
        return [r["value"] for r in sel]
    xs, ys = pick(a), pick(b)
    if len(xs) < 2 or len(ys) < 2:
        return None
    return welch_t(xs, ys, alternative)


# ---------------------------------------------------------------------------
# 1a: transfer under shift
# ---------------------------------------------------------------------------

def _seed_1a(cfg: BenchConfig, seed: int) -> dict:
    # the frozen agent replans on each shifted target
    p = cfg.params
    src, legacy = _spec_and_legacy(cfg)
    rows = []
    for arm in cfg.agents:
        agent = build_agent(arm, src, seed, **_agent_kwargs(cfg, arm))
        res = run_agent(agent, legacy, p["K_src"], seed)
        rows.append(_row(seed, arm, "source", "reward", res.mean_return))
        for kind in p["shifts"]:
            agent.spec = apply_shift(src, ShiftSpec(kind))
            frozen = run_frozen(agent, legacy, p["K_tgt"], seed, start=p["K_src"])
            rows.append(_row(seed, arm, kind, "reward", frozen.mean_return))
        agent.spec = src
    return {"rows": rows}


def _agg_1a(cfg: BenchConfig, payloads) -> BenchResult:
    rows = [r for p in payloads for r in p["rows"]]
    a, b = cfg.agents[1], cfg.agents[0]
    tests = {}
    for kind in cfg.params["shifts"]:
        tests[f"{a}_vs_{b}_{kind}"] = _welch(rows, a, b, kind)
    gaps = {k: float(np.mean(_pick(rows, a, k)) - np.mean(_pick(rows, b, k)))
            for k in cfg.params["shifts"]}
    return BenchResult(cfg, rows, tests, {"gap": gaps})


def _pick(rows, arm, condition="", metric="reward"):
    sel = sorted((r for r in rows if r["arm"] == arm and r["condition"] == condition
                  and r["metric"] == metric), key=lambda r: r["seed"])
    return [r["value"] for r in sel]


# ---------------------------------------------------------------------------
# 1b: decomposition
# ---------------------------------------------------------------------------

def _seed_arms(cfg: BenchConfig, seed: int) -> dict:
    spec, legacy = _spec_and_legacy(cfg)
    rows = []
    for arm in cfg.agents:
        agent = build_agent(arm, spec, seed, **_agent_kwargs(cfg, arm))
        rows.append(_row(seed, arm, "", "reward", run_agent(agent, legacy, cfg.K, seed).mean_return))
    return {"rows": rows}


def _agg_1b(cfg: BenchConfig, payloads) -> BenchResult:
    rows = [r for p in payloads for r in p["rows"]]
    tests = {}
    pairs = (("factorisation", "flat_cts", "flat_ts"),
             ("joint_commit", "joint_cts", "flat_cts"),
             ("nesting", "nested_cts", "flat_cts"),
             ("total", "nested_cts", "flat_ts"))
    for name, a, b in pairs:
        if a in cfg.agents and b in cfg.agents:
            tests[f"{name}:{a}_vs_{b}"] = _welch(rows, a, b)
    means = {arm: float(np.mean(_pick(rows, arm))) for arm in cfg.agents}
    order = sorted(means, key=means.get, reverse=True)
    return BenchResult(cfg, rows, tests, {"ordering": order})


# ---------------------------------------------------------------------------
# 1c: certificate contraction under the alpha split
# ---------------------------------------------------------------------------

def _certify(data: CertDataset, belief: FactorisedBelief, spec, legacy, p, rng):
    scope = frozenset(p["scope"])
    target = posterior_target(spec, legacy[1], rng.standard_normal(p["n_mc"]))
    draws = draw_panel(belief, p["n_panel"], rng)
    panel = evaluate_losses(data, draws, target, scope, p.get("w_max"))
    kl_per, kl_sum = belief.kl_to_prior(scope)
    return certificate_from_panel(panel, kl_per, kl_sum, scope, p["delta"])


def _split_nonempty(records, alpha, rng):
    """Bernoulli split that always leaves at least one certificate episode."""
    prior, cert = split_episodes(records, alpha, rng)
    if not cert:
        prior, cert = prior[:-1], prior[-1:]
    return prior, cert


def _seed_1c(cfg: BenchConfig, seed: int) -> dict:
    p = cfg.params
    spec, legacy = _spec_and_legacy(cfg)
    arm = cfg.agents[0]
    grid = sorted(_scaled(k, cfg.scale) for k in p["k_grid"])
    agent = build_agent(arm, spec, seed, **_agent_kwargs(cfg, arm))
    hyper = agent.belief.copy()
    records, snapshots = [], {}
    for k in range(grid[-1]):
        records.append(agent.run_episode(legacy, k, seed))
        if k + 1 in grid:
            snapshots[k + 1] = agent.belief.copy()
    lo, hi = spec.reward_range
    to_raw = spec.samples_per_episode * (hi - lo)
    rows = []
    for k in grid:
        srng = episode_rng(seed, SPLIT_STREAM, k)
        prior, cert = _split_nonempty(records[:k], p["alpha"], srng)
        p0 = build_p0_from_prior_data(hyper, prior, cert_ks=[r.k for r in cert])
        q = FactorisedBelief(dict(snapshots[k].mechanisms),
                             {n: m.state for n, m in p0.mechanisms.items()})
        data = CertDataset.from_records(cert, spec, "range")
        c = _certify(data, q, spec, legacy, p, srng)
        gap = c.ips_mean - c.lower_bound
        for metric, v in (("v_lower", c.lower_bound), ("v_ips", c.ips_mean), ("gap", gap),
                          ("kl_sum", c.kl_sum), ("lambda", c.lam),
                          ("v_lower_raw", (c.lower_bound * (hi - lo) + lo) *
                           spec.samples_per_episode),
                          ("gap_raw", gap * to_raw), ("k_cert", c.K)):
            rows.append(_row(seed, arm, f"k={k}", metric, v))
    # optional alpha sweep at the final k
    k = grid[-1]
    for alpha in p.get("alpha_grid") or ():
        srng = episode_rng(seed, SPLIT_STREAM, k)
        prior, cert = _split_nonempty(records[:k], float(alpha), srng)
        p0 = build_p0_from_prior_data(hyper, prior)
        q = FactorisedBelief(dict(snapshots[k].mechanisms),
                             {n: m.state for n, m in p0.mechanisms.items()})
        c = _certify(CertDataset.from_records(cert, spec, "range"), q, spec, legacy, p, srng)
        rows.append(_row(seed, arm, f"alpha={alpha}", "v_lower", c.lower_bound))
    # naive variant: certify on every episode with the posterior as its own
    # reference, which reuses the data twice and is not a valid certificate
    k = grid[-1]
    naive_q = snapshots[k].with_reference_here()
    data = CertDataset.from_records(records[:k], spec, "range")
    c = _certify(data, naive_q, spec, legacy, p, episode_rng(seed, SPLIT_STREAM, 10 ** 6))
    rows.append(_row(seed, arm, f"k={k}", "v_lower_naive", c.lower_bound))
    rows.append(_row(seed, arm, f"k={k}", "gap_naive", c.ips_mean - c.lower_bound))
    return {"rows": rows}


def _agg_1c(cfg: BenchConfig, payloads) -> BenchResult:
    rows = [r for p in payloads for r in p["rows"]]
    arm = cfg.agents[0]
    grid = sorted(_scaled(k, cfg.scale) for k in cfg.params["k_grid"])
    first, last = f"k={grid[0]}", f"k={grid[-1]}"
    g0 = np.array(_pick(rows, arm, first, "gap"))
    g1 = np.array(_pick(rows, arm, last, "gap"))
    tests = {}
    if g1.size >= 2:
        tests["validity_gap_positive"] = paired_t(g1, one_sided=True)
    ratio = float(g0.mean() / g1.mean())
    lower = {f"k={k}": float(np.mean(_pick(rows, arm, f"k={k}", "v_lower_raw"))) for k in grid}
    valid = bool(np.all(np.concatenate([np.array(_pick(rows, arm, f"k={k}", "gap")) > 0
                                        for k in grid])))
    naive = np.array(_pick(rows, arm, last, "v_lower_naive"))
    split = np.array(_pick(rows, arm, last, "v_lower"))
    if naive.size >= 2:
        tests["naive_vs_split"] = paired_t(naive - split, one_sided=True)
    alphas = cfg.params.get("alpha_grid") or []
    if len(alphas) >= 3:
        means = [float(np.mean(_pick(rows, arm, f"alpha={a}", "v_lower"))) for a in alphas]
        tests["alpha_vs_v_lower"] = spearman_rho(alphas, means)
    return BenchResult(cfg, rows, tests, {"contraction_ratio": ratio, "valid_every_seed": valid,
                                          "v_lower_raw_by_k": lower})


# ---------------------------------------------------------------------------
# 2a: posterior temperature sweep
# ---------------------------------------------------------------------------

def _seed_2a(cfg: BenchConfig, seed: int) -> dict:
    spec, legacy = _spec_and_legacy(cfg)
    arm = cfg.agents[0]
    rows = []
    for backend in cfg.params["backends"]:
        for lam in cfg.params["lambda_grid"]:
            kw = {**_agent_kwargs(cfg, arm), "backend": backend, "temperature": float(lam)}
            agent = build_agent(arm, spec, seed, **kw)
            rows.append(_row(seed, backend, f"lambda={lam}", "reward",
                             run_agent(agent, legacy, cfg.K, seed).mean_return))
    return {"rows": rows}


def _agg_2a(cfg: BenchConfig, payloads) -> BenchResult:
    rows = [r for p in payloads for r in p["rows"]]
    best, tests = {}, {}
    grid = cfg.params["lambda_grid"]
    for backend in cfg.params["backends"]:
        means = {lam: float(np.mean(_pick(rows, backend, f"lambda={lam}"))) for lam in grid}
        best[backend] = max(means, key=means.get)
        if len(cfg.seeds) >= 2:
            tests[f"{backend}:lambda={grid[0]}_vs_lambda={grid[-1]}"] = welch_t(
                _pick(rows, backend, f"lambda={grid[0]}"),
                _pick(rows, backend, f"lambda={grid[-1]}"))
    return BenchResult(cfg, rows, tests, {"argmax_lambda": best})


# ---------------------------------------------------------------------------
# 3a: meta-level rules
# ---------------------------------------------------------------------------

def _seed_3a(cfg: BenchConfig, seed: int) -> dict:
    spec, legacy = _spec_and_legacy(cfg)
    arm = cfg.agents[0]
    rows = []
    for rule in cfg.params["rules"]:
        kw = {**_agent_kwargs(cfg, arm), "meta_rule": rule,
              "d_opt_mix": float(cfg.params["d_opt_mix"])}
        agent = build_agent(arm, spec, seed, **kw)
        rows.append(_row(seed, rule, "", "reward",
                         run_agent(agent, legacy, cfg.K, seed).mean_return))
    return {"rows": rows}


def _agg_3a(cfg: BenchConfig, payloads) -> BenchResult:
    rows = [r for p in payloads for r in p["rows"]]
    rules = cfg.params["rules"]
    tests = {f"{a}_vs_{b}": _welch(rows, a, b)
             for a, b in (("thompson", "greedy"), ("thompson", "d_opt_hybrid"),
                          ("thompson", "d_optimal")) if a in rules and b in rules}
    means = {r: float(np.mean(_pick(rows, r))) for r in rules}
    return BenchResult(cfg, rows, tests, {"ordering": sorted(means, key=means.get, reverse=True)})


# ---------------------------------------------------------------------------
# 3b: action-grid invariance
# ---------------------------------------------------------------------------

def _seed_3b(cfg: BenchConfig, seed: int) -> dict:
    rows = []
    for n_a in cfg.params["n_a_grid"]:
        env = copy.deepcopy(cfg.env)
        env.setdefault("grid", {})["n_a"] = int(n_a)
        spec, legacy = _spec_and_legacy(cfg, env)
        for arm in cfg.agents:
            agent = build_agent(arm, spec, seed, **_agent_kwargs(cfg, arm))
            rows.append(_row(seed, arm, f"n_a={n_a}", "reward",
                             run_agent(agent, legacy, cfg.K, seed).mean_return))
    return {"rows": rows}


def _agg_3b(cfg: BenchConfig, payloads) -> BenchResult:
    rows = [r for p in payloads for r in p["rows"]]
    spread, tests = {}, {}
    grid = cfg.params["n_a_grid"]
    for arm in cfg.agents:
        means = [float(np.mean(_pick(rows, arm, f"n_a={n}"))) for n in grid]
        spread[arm] = {"max_minus_min": max(means) - min(means), "mean": float(np.mean(means)),
                       "by_n_a": dict(zip(map(str, grid), means))}
    structured = [a for a in cfg.agents if a != "flat_joint"]
    if "flat_joint" in cfg.agents and structured:
        for n in grid:
            tests[f"{structured[0]}_vs_flat_joint_n_a={n}"] = _welch(
                rows, structured[0], "flat_joint", f"n_a={n}")
    return BenchResult(cfg, rows, tests, {"spread": spread})


# ---------------------------------------------------------------------------
# AEGIS flip
# ---------------------------------------------------------------------------

AEGIS_ARMS = {
    "aegis_handover": lambda g: g,
    "aegis_cts": lambda g: GateConfig(**{**asdict(g), "progressive_handover": False}),
    "nested_cts": lambda g: GateConfig.switches_off(**{
        k: v for k, v in asdict(g).items()
        if k not in ("risk_adjust_inner", "optimal_lambda", "progressive_handover")}),
}


def _gate_config(p: Mapping) -> GateConfig:
    gate = dict(p.get("gate", {}) or {})
    if "margins" in gate:
        gate["margins"] = tuple(gate["margins"])
    return GateConfig(**gate)


def _seed_flip(cfg: BenchConfig, seed: int) -> dict:
    spec, legacy = _spec_and_legacy(cfg)
    gate = _gate_config(cfg.params)
    rows, traj, flips = [], [], {}
    for arm in cfg.agents:
        if arm not in AEGIS_ARMS:
            raise ConfigError(f"aegis_flip arms are {sorted(AEGIS_ARMS)}, got {arm!r}")
        host = build_agent("aegis_handover" if arm != "nested_cts" else "nested_cts", spec,
                           seed, **_agent_kwargs(cfg, arm))
        res = aegis_run(host, legacy, cfg.K, AEGIS_ARMS[arm](gate), seed)
        rows.append(_row(seed, arm, "", "reward", res.returns.mean()))
        if arm != "aegis_handover":
            continue
        flips = {"inner": res.flip_inner, "meta": res.flip_meta}
        traj = [dict(r, seed=seed) for r in res.trajectory]
        f = res.flip_inner
        for name, v in (("flip_inner", f), ("flip_meta", res.flip_meta)):
            rows.append(_row(seed, arm, "", name, float("nan") if v is None else v))
        if f is not None and 1 < f < cfg.K - 1:
            pre, post = res.returns[:f], res.returns[f:]
            rows.append(_row(seed, arm, "pre_flip", "reward", pre.mean()))
            rows.append(_row(seed, arm, "post_flip", "reward", post.mean()))
            t = welch_t(post, pre, "greater")
            rows.append(_row(seed, arm, "", "prepost_p", t.p_value))
            lb = np.array([r["gain_lb_inner"] for r in res.trajectory])
            ks = np.arange(1, cfg.K + 1)
            stride = gate.stride
            checks = (ks % stride == 0) & np.isfinite(lb)
            lb_pre, lb_post = lb[checks & (ks < f)], lb[checks & (ks >= f)]
            if lb_pre.size and lb_post.size:
                rows.append(_row(seed, arm, "pre_flip", "gain_lb", lb_pre.mean()))
                rows.append(_row(seed, arm, "post_flip", "gain_lb", lb_post.mean()))
    return {"rows": rows, "trajectory": traj, "flips": {seed: flips}}


def _agg_flip(cfg: BenchConfig, payloads) -> BenchResult:
    rows = [r for p in payloads for r in p["rows"]]
    traj = [r for p in payloads for r in p["trajectory"]]
    flips = {}
    for p in payloads:
        flips.update(p["flips"])
    tests = {}
    arm = "aegis_handover"
    for metric in ("reward", "gain_lb"):
        pre = {r["seed"]: r["value"] for r in rows
               if r["arm"] == arm and r["condition"] == "pre_flip" and r["metric"] == metric}
        post = {r["seed"]: r["value"] for r in rows
                if r["arm"] == arm and r["condition"] == "post_flip" and r["metric"] == metric}
        seeds = sorted(set(pre) & set(post))
        if len(seeds) >= 2:
            tests[f"prepost_{metric}"] = paired_t([post[s] - pre[s] for s in seeds],
                                                  one_sided=True)
    for a, b in (("aegis_handover", "nested_cts"), ("aegis_cts", "nested_cts"),
                 ("aegis_handover", "aegis_cts")):
        if a in cfg.agents and b in cfg.agents and len(cfg.seeds) >= 2:
            tests[f"{a}_vs_{b}"] = _welch(rows, a, b)
    inner = [v["inner"] for v in flips.values() if v.get("inner") is not None]
    extra = {"flip_episodes": {str(s): v for s, v in sorted(flips.items())},
             "mean_flip_inner": float(np.mean(inner)) if inner else None}
    return BenchResult(cfg, rows, tests, extra, traj)


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchDef:
    """Registered bench: defaults, the deviation it applies and its driver."""

    id: str
    title: str
    deviation: str
    K: int
    n_seeds: int
    agents: tuple[str, ...]
    env: dict
    params: dict
    run_seed: Callable
    aggregate: Callable


STRESS_ENV = {"family": "unified", "axes": {"gamma": 1.0, "eta": 1.0, "nu": 0.0,
                                            "sigma_q": 3.0, "q": 0.0},
              "schedule": {"J": 1, "I": 20}}

REGISTRY: dict[str, BenchDef] = {b.id: b for b in (
    BenchDef("1a", "transfer under exogenous shift",
             "K_src=100 source episodes, posterior frozen, K_tgt=25 per shifted target",
             100, 10, ("flat_ts", "flat_cts"), STRESS_ENV,
             {"K_src": 100, "K_tgt": 25, "shifts": list(SHIFTS), "agent": {}},
             _seed_1a, _agg_1a),
    BenchDef("1b", "four-arm decomposition", "none (defaults)",
             2000, 10, ("flat_ts", "flat_cts", "joint_cts", "nested_cts"), STRESS_ENV,
             {"agent": {}}, _seed_arms, _agg_1b),
    BenchDef("1c", "certificate contraction", "alpha=0.5 prior/certificate split",
             2000, 10, ("nested_cts",), STRESS_ENV,
             {"alpha": 0.5, "k_grid": [200, 500, 1000, 1500, 2000], "delta": 0.05,
              "scope": [1, 2], "n_panel": 32, "n_mc": 32, "w_max": None, "alpha_grid": [],
              "agent": {}},
             _seed_1c, _agg_1c),
    BenchDef("2a", "posterior temperature sweep",
             "lambda grid {0.1, 0.25, 0.5, 0.75, 1.0} over both backends",
             2000, 10, ("nested_cts",), STRESS_ENV,
             {"lambda_grid": [0.1, 0.25, 0.5, 0.75, 1.0], "backends": ["rff", "nig"],
              "agent": {}}, _seed_2a, _agg_2a),
    BenchDef("3a", "meta-level rule comparison",
             "meta rules {thompson, greedy, d_opt_hybrid, d_optimal}; D-opt mix probability axis",
             2000, 10, ("nested_cts",), STRESS_ENV,
             {"rules": ["thompson", "greedy", "d_opt_hybrid", "d_optimal"], "d_opt_mix": 1.0,
              "agent": {}}, _seed_3a, _agg_3a),
    BenchDef("3b", "action-grid invariance",
             "q=1 quadratic reward; n_a grid {21, 41, 81}",
             2000, 10, ("icts_type1", "icts_type2", "flat_joint"),
             {**STRESS_ENV, "axes": {**STRESS_ENV["axes"], "q": 1.0}},
             {"n_a_grid": [21, 41, 81], "agent": {}}, _seed_3b, _agg_3b),
    BenchDef("aegis_flip", "certified handover on the additive-Y env",
             "additive-Y env, sign legacy, NIG host, K=5000, 3 seeds, w_max=1",
             5000, 3, ("aegis_handover", "aegis_cts", "nested_cts"),
             {"family": "additive_y"},
             {"gate": {"w_max": 1.0, "stride": 50, "delta": 0.05, "margins": [0.0, 0.0]},
              "agent": {"backend": "nig"}},
             _seed_flip, _agg_flip),
)}


def list_benches() -> list[tuple[str, str, str]]:
    """``(id, title, deviation)`` for every registered bench."""
    return [(b.id, b.title, b.deviation) for b in REGISTRY.values()]


def make_config(bench: str, *, seeds: int | Sequence[int] | None = None, scale: float = 1.0,
                root_seed: int = 0, overrides: Mapping | None = None) -> BenchConfig:
    """Config for a registered bench.

    Parameters
    ----------
    seeds : int or sequence of int, optional
        A count draws consecutive seeds from ``root_seed``.  The default is
        the bench's seed count, or 5 in desk-scale mode (``scale < 1``).
    scale : float
        Shrinks ``K`` and episode grids.
    overrides : mapping, optional
        Nested updates of ``K``, ``agents``, ``env`` or ``params``.
    """
    if bench not in REGISTRY:
        raise ConfigError(f"unknown bench {bench!r}; known: {sorted(REGISTRY)}")
    if not scale > 0:
        raise ConfigError("scale must be positive")
    b = REGISTRY[bench]
    if seeds is None:
        seeds = b.n_seeds if scale >= 1 else min(b.n_seeds, 5)
    seed_list = (tuple(range(root_seed, root_seed + int(seeds))) if isinstance(seeds, int)
                 else tuple(int(s) for s in seeds))
    if not seed_list:
        raise ConfigError("at least one seed is required")
    d = {"K": _scaled(b.K, scale), "agents": list(b.agents), "env": copy.deepcopy(b.env),
         "params": copy.deepcopy(b.params)}
    for key, val in (overrides or {}).items():
        if key not in d:
            raise ConfigError(f"unknown config key {key!r}")
        if key in ("env", "params"):
            d[key] = _merge(d[key], val, key, strict=key == "params")
        else:
            d[key] = val
    agents = [d["agents"]] if isinstance(d["agents"], str) else list(d["agents"])
    bad = [a for a in agents if a not in AGENT_KINDS]
    if bad or not agents:
        raise ConfigError(f"unknown agents {bad}; known: {list(AGENT_KINDS)}")
    d["agents"] = agents
    cfg = BenchConfig(bench, int(d["K"]), seed_list, tuple(d["agents"]), d["env"],
                      d["params"], float(scale), int(root_seed))
    spec_from_config(cfg.env)  # validates env keys and axis values
    return cfg


def _merge(base: dict, upd: Mapping, path: str, strict: bool) -> dict:
    out = dict(base)
    for k, v in upd.items():
        if strict and k not in base and path.count(".") == 0 and k != "agent":
            raise ConfigError(f"unknown key {path}.{k}")
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, f"{path}.{k}", strict=False)
        else:
            out[k] = v
    return out


def run_seed(cfg: BenchConfig, seed: int) -> dict:
    return REGISTRY[cfg.bench].run_seed(cfg, seed)


def run_bench(cfg: BenchConfig, workers: int = 1) -> BenchResult:
    """Run every seed and aggregate.  Results do not depend on ``workers``."""
    if workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            payloads = list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        payloads = [run_seed(cfg, s) for s in cfg.seeds]
    return REGISTRY[cfg.bench].aggregate(cfg, payloads)
