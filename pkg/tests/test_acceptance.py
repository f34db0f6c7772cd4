"""Acceptance criteria 1-11.

Each test prints one ``criterion N: PASS|FAIL`` line with the measured
values and wall time.  A criterion that is not met is reported as FAIL
without failing pytest; the assertions below only guard that the
measurement itself ran and produced finite numbers.  The heavy benches run
at the desk scales recorded in the decisions ledger.
"""

import math
import time

import numpy as np
import pytest

from nccb.aegis import GateConfig, HandoverState, aegis_run
from nccb.bench import make_config, run_bench
from nccb.env import (AGENT_STREAM, ENV_STREAM, build_additive_y, build_linear_anm,
                      build_stress_preset, default_legacy, episode_rng, sample_episode)
from nccb.finite import (policy_value, random_finite_scm, random_legacy, recursive_values,
                         scope_policy)
from nccb.policy import build_agent, meta_best_action, run_agent
from nccb.posterior import BackendConfig, hyper_prior, nig_prior, nig_update
from nccb.prism import (CertDataset, lambda_star, ls_pessimistic_value, on_policy_target,
                        prism_lower_bound)
from oracles import SCOPES, brute_force_r2, enumerate_value, enumerate_weighted_legacy

slow = pytest.mark.slow


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def test_criterion_01_importance_weighting_oracle(report):
    rng = np.random.default_rng(101)
    worst = 0.0
    with Timer() as t:
        for scope in SCOPES:
            for _ in range(5):
                truth = random_finite_scm(rng)
                belief = random_finite_scm(rng)
                legacy = random_legacy(rng, truth.shape)
                pi_m, pi_a = scope_policy(belief, scope, legacy)
                direct = enumerate_value(truth, pi_m, pi_a)
                weighted = enumerate_weighted_legacy(truth, legacy, pi_m, pi_a, scope)
                worst = max(worst, abs(weighted - direct),
                            abs(policy_value(truth, pi_m, pi_a) - direct))
    report(1, worst <= 1e-9 and t.seconds < 1.0,
           f"max |E_mu[w R] - V(pi)| = {worst:.2e} over 4 scopes x 5 SCMs ({t.seconds:.2f}s)")
    assert math.isfinite(worst)


def test_criterion_02_value_recursion_oracle(report):
    rng = np.random.default_rng(102)
    worst = 0.0
    with Timer() as t:
        for scope in SCOPES:
            for _ in range(5):
                truth = random_finite_scm(rng)
                legacy = random_legacy(rng, truth.shape)
                _, r2 = recursive_values(truth, scope, legacy[1])
                worst = max(worst, float(np.abs(r2 - brute_force_r2(truth, set(scope),
                                                                    legacy[1])).max()))
    report(2, worst <= 1e-9 and t.seconds < 1.0,
           f"max |recursion - enumeration| = {worst:.2e} ({t.seconds:.2f}s)")
    assert math.isfinite(worst)


def test_criterion_03_conjugacy_oracle(report):
    rng = np.random.default_rng(103)
    worst = 0.0
    with Timer() as t:
        for _ in range(100):
            n, p = rng.integers(1, 60), rng.integers(1, 6)
            X = rng.normal(size=(n, p))
            y = X @ rng.normal(size=p) + rng.normal(scale=0.3, size=n)
            post = nig_update(nig_prior(p), X, y)
            # penalised least squares with ridge lambda_0 = 0.1, solved directly
            want = np.linalg.lstsq(np.vstack([X, math.sqrt(0.1) * np.eye(p)]),
                                   np.concatenate([y, np.zeros(p)]), rcond=None)[0]
            rel = np.abs(post.mean - want) / np.maximum(np.abs(want), 1e-12)
            worst = max(worst, float(rel.max()))
    report(3, worst <= 1e-8 and t.seconds < 5.0,
           f"max relative error vs ridge = {worst:.2e} on 100 datasets ({t.seconds:.2f}s)")
    assert math.isfinite(worst)


def _policy_episodes(agent, legacy, spec, seed, K):
    out = []
    for k in range(K):
        rng = episode_rng(seed, AGENT_STREAM, k)
        stack = agent.policy_stack(agent.sample_draw(rng), legacy, rng)
        out.append(sample_episode(spec, stack, episode_rng(seed, ENV_STREAM, k), k))
    return out


@slow
def test_criterion_04_bound_validity(report):
    spec = build_linear_anm()
    legacy = default_legacy(spec)
    with Timer() as t:
        # Q is the NIG posterior after one episode, so the KL term is non-trivial
        agent = build_agent("nested_cts", spec, 0, backend="nig")
        run_agent(agent, legacy, 1, seed=1000)
        truth_eps = _policy_episodes(agent, legacy, spec, 5, 50_000)
        truth = float(np.mean([r.mean_reward for r in truth_eps]))
        n_samples = 50_000 * spec.samples_per_episode
        lo, hi = spec.reward_range
        truth_unit = (truth - lo) / (hi - lo)
        covered, bounds = 0, []
        for rep in range(100):
            data = CertDataset.from_records(_policy_episodes(agent, legacy, spec, 100 + rep, 500),
                                            spec)
            c = prism_lower_bound(data, agent.belief, {1, 2}, 0.1, target=on_policy_target,
                                  n_panel=1)
            bounds.append(c.lower_bound)
            covered += c.lower_bound <= truth_unit
    kl = agent.belief.kl_to_prior()[1]
    report(4, covered >= 87 and t.seconds < 300,
           f"{covered}/100 bounds below truth {truth_unit:.4f} ({n_samples:.0e} samples); "
           f"KL={kl:.1f}, mean bound {np.mean(bounds):.4f} ({t.seconds:.0f}s)")
    assert np.all(np.isfinite(bounds))


@slow
def test_criterion_05_bench_1b(report):
    with Timer() as t:
        res = run_bench(make_config("1b", seeds=10, overrides={"K": 500}))
    means = {a: float(res.values(a).mean()) for a in res.config.agents}
    order_ok = means["nested_cts"] > means["flat_cts"] > means["flat_ts"] > means["joint_cts"]
    total = res.tests["total:nested_cts_vs_flat_ts"]
    joint = res.tests["joint_commit:joint_cts_vs_flat_cts"]
    ok = (order_ok and total.p_value < 0.01 and joint.p_value < 0.01 and joint.statistic < 0
          and t.seconds < 900)
    report(5, ok, "means " + ", ".join(f"{a}={v:.2f}" for a, v in means.items())
           + f"; nested vs flat_ts p={total.p_value:.1e}; joint vs flat_cts "
             f"t={joint.statistic:.1f} p={joint.p_value:.1e} ({t.seconds:.0f}s)")
    assert all(math.isfinite(v) for v in means.values())


@slow
def test_criterion_06_bench_1a(report):
    with Timer() as t:
        res = run_bench(make_config("1a"))
    gap = res.extra["gap"]
    pv = {k: res.tests[f"flat_cts_vs_flat_ts_{k}"].p_value for k in gap}
    ok = all(gap[k] > 0 and pv[k] < 0.01 for k in ("shift_t", "shift_sigma_q"))
    report(6, ok and t.seconds < 600,
           "; ".join(f"{k}: gap={gap[k]:+.2f} p={pv[k]:.1e}" for k in gap)
           + f" ({t.seconds:.0f}s)")
    assert all(math.isfinite(v) for v in gap.values())


@slow
def test_criterion_07_bench_1c(report):
    with Timer() as t:
        res = run_bench(make_config("1c", seeds=5))
    ratio = res.extra["contraction_ratio"]
    valid = res.extra["valid_every_seed"]
    gaps = {k: float(res.values("nested_cts", k, "gap").mean())
            for k in ("k=200", "k=2000")}
    report(7, 1.5 <= ratio <= 3.0 and valid and t.seconds < 1200,
           f"gap ratio k=200/k=2000 = {ratio:.2f} (gaps {gaps['k=200']:.4f} / "
           f"{gaps['k=2000']:.4f}); valid on every seed: {valid} ({t.seconds:.0f}s)")
    assert math.isfinite(ratio)


@slow
def test_criterion_08_bench_3b(report):
    with Timer() as t:
        res = run_bench(make_config("3b", seeds=5, overrides={"K": 500}))
    spread = res.extra["spread"]
    icts_ok = all(spread[a]["max_minus_min"] < 0.02 * abs(spread[a]["mean"])
                  for a in ("icts_type1", "icts_type2"))
    flat = spread["flat_joint"]["by_n_a"]
    flat_ok = all(v < 0 for v in flat.values())
    report(8, icts_ok and flat_ok and t.seconds < 900,
           "; ".join(f"{a}: spread {spread[a]['max_minus_min']:.2f} on mean "
                     f"{spread[a]['mean']:.2f}" for a in ("icts_type1", "icts_type2"))
           + "; flat_joint by n_a " + ", ".join(f"{k}={v:+.2f}" for k, v in flat.items())
           + f" ({t.seconds:.0f}s)")
    assert all(math.isfinite(v) for v in flat.values())


@slow
def test_criterion_09_aegis_flip(report):
    with Timer() as t:
        cfg = make_config("aegis_flip")
        res = run_bench(cfg)
        spec = build_additive_y()
        legacy = default_legacy(spec)
        identical = True
        for seed in cfg.seeds:
            host = build_agent("nested_cts", spec, seed, backend="nig")
            off = aegis_run(host, legacy, cfg.K, GateConfig.switches_off(), seed,
                            record_actions=True)
            ref = run_agent(build_agent("nested_cts", spec, seed, backend="nig"), legacy,
                            cfg.K, seed, keep_records=True)
            identical &= all(np.array_equal(m, r.m_idx) and np.array_equal(a, r.a_idx)
                             for (m, a), r in zip(off.actions, ref.records))
            identical &= np.array_equal(off.returns, ref.returns)
    flips = {s: v["inner"] for s, v in res.extra["flip_episodes"].items()}
    pvals = res.values("aegis_handover", "", "prepost_p")
    fired = all(f is not None for f in flips.values())
    in_window = fired and all(1500 <= f <= 5000 for f in flips.values())
    sig = pvals.size == len(cfg.seeds) and bool(np.all(pvals < 0.05))
    report(9, fired and in_window and sig and identical and t.seconds < 1800,
           f"inner flips {flips}; pre/post p per seed "
           f"[{', '.join(f'{p:.1e}' for p in pvals)}]; "
           f"switches-off identical to nested_cts: {identical} ({t.seconds:.0f}s)")
    assert pvals.size == 0 or np.all(np.isfinite(pvals))


@slow
def test_criterion_10_gate_false_positives(report):
    spec = build_additive_y(a_coef=0.0)
    legacy = default_legacy(spec)
    cfg = GateConfig(margins=(0.05, math.inf), delta=0.1, stride=50, w_max=1.0)
    runs, K = 100, 500
    with Timer() as t:
        fires = 0
        for r in range(runs):
            host = build_agent("aegis_handover", spec, r, backend="nig")
            fires += aegis_run(host, legacy, K, cfg, seed=20_000 + r).flip_inner is not None
    limit = 0.1 + 3 * math.sqrt(0.1 * 0.9 / runs)
    report(10, fires / runs <= limit and t.seconds < 1200,
           f"inner gate fired in {fires}/{runs} null runs (limit {limit:.2f}), "
           f"{K} episodes each ({t.seconds:.0f}s)")


def test_criterion_11_property_suites(report):
    checks = {}
    with Timer() as t:
        # KL additivity and non-negativity over the mechanism factorisation
        spec = build_linear_anm()
        belief = hyper_prior(spec.parent_map(), spec.scale_map(), BackendConfig(kind="nig"))
        legacy = default_legacy(spec)
        for k in range(5):
            belief.update(sample_episode(spec, legacy, episode_rng(0, 11, k), k).rows())
        per, total = belief.kl_to_prior()
        _, inner = belief.kl_to_prior({1})
        checks["kl"] = (all(v >= 0 for v in per.values())
                        and math.isclose(total, sum(per.values()), rel_tol=1e-12)
                        and math.isclose(inner, per["Y"] + per["R"], rel_tol=1e-12))
        # LS pessimism against the IPS mean on a 20-point lambda grid
        rng = np.random.default_rng(11)
        ok = True
        for _ in range(50):
            b = rng.uniform(0.5, 5.0)
            L = rng.uniform(0, b, size=(rng.integers(1, 8), rng.integers(1, 40)))
            for lam in np.linspace(0.01, 0.99, 20) / b:
                ok &= ls_pessimistic_value(L, b, lam) <= L.mean() + 1e-12
        checks["ls_pessimism"] = bool(ok)
        # lambda* < 1/B on 1000 random inputs
        ok = True
        for _ in range(1000):
            b = rng.uniform(0.01, 100.0)
            L = rng.uniform(0, b, size=rng.integers(1, 50))
            lam = lambda_star(L, b, rng.uniform(0, 50), eta=rng.uniform(1e-3, 0.5))
            ok &= 0 < lam < 1.0 / b
        checks["lambda_domain"] = bool(ok)
        # ties resolve to the lowest index, identically on every call
        stress = build_stress_preset()
        flat = hyper_prior({"C": ("M",), "Y": ("A", "C"), "R": ("Y",)}, stress.scale_map(),
                           BackendConfig(kind="nig"))
        draw = flat.sample(np.random.default_rng(0))
        for part in draw.parts.values():
            part.weights[:] = 0.0
        picks = {meta_best_action(draw, 0.0, stress.meta_values, stress.action_values,
                                  np.zeros(4)) for _ in range(3)}
        checks["tie_break"] = picks == {0}
        # sticky handover set only grows and keeps its first flip episode
        host = build_agent("aegis_handover", build_additive_y(), 0, backend="nig")
        res = aegis_run(host, default_legacy(host.spec), 60,
                        GateConfig(margins=(-1e9, -1e9), stride=10, n_panel=2, n_mc=4), seed=1)
        hist = res.state.history
        state = HandoverState()
        state.hand_over(1, 5)
        state.hand_over(1, 9)
        checks["sticky"] = (all(a <= b for a, b in zip(hist, hist[1:]))
                            and res.state.sigma == {1, 2} and state.flip_episode[1] == 5)
        # seeded reruns are byte-identical
        a = run_agent(build_agent("nested_cts", stress, 1), default_legacy(stress), 3, 4)
        b = run_agent(build_agent("nested_cts", stress, 1), default_legacy(stress), 3, 4)
        checks["rerun"] = a.returns.tobytes() == b.returns.tobytes()
    report(11, all(checks.values()) and t.seconds < 120,
           ", ".join(f"{k}={'ok' if v else 'broken'}" for k, v in checks.items())
           + f" ({t.seconds:.1f}s)")
