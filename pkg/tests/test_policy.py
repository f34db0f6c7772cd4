import numpy as np
import pytest

from nccb.env import build_linear_anm, build_stress_preset, default_legacy
from nccb.finite import (policy_value, random_finite_scm, random_legacy, recursive_values,
                         scope_policy)
from nccb.policy import (AGENT_KINDS, UnknownAgent, build_agent, inner_best_action,
                         joint_commit_values, lcb_inner_action, lcb_values, meta_best_action,
                         meta_values, d_optimal_scores, run_agent)
from nccb.posterior import BackendConfig, BeliefDraw, LinearDesign, MechanismDraw, hyper_prior
from oracles import SCOPES, brute_force_r2, enumerate_value, enumerate_weighted_legacy


def linear_draw(c_w, y_w, r_w, noise=(1e-12, 1e-12, 1e-12)):
    spec = build_linear_anm()
    pa = spec.parent_map()
    parts = {}
    for name, w, s2 in zip(("C", "Y", "R"), (c_w, y_w, r_w), noise):
        parts[name] = MechanismDraw(LinearDesign(len(pa[name])), np.asarray(w, float), s2,
                                    pa[name])
    return spec, BeliefDraw(parts)


def true_linear_draw():
    # C <- (M, T), Y <- (A, C), R <- (Y, C, M, T, A); intercept last
    return linear_draw([0.8, 0.0, 0.0], [0.5, 0.4, 0.0], [0.3, 0.08, 0.1, 0.05, 0.02, 0.0])


def test_linear_meta_and_inner_argmax_at_grid_max():
    spec, draw = true_linear_draw()
    z = np.zeros(4)
    m = meta_best_action(draw, 2.0, spec.meta_values, spec.action_values, z)
    assert spec.meta_values[m] == 5.0
    ctx = {"T": np.array([1.0]), "M": np.array([2.0]), "C": np.array([1.6])}
    best, v = inner_best_action(draw, ctx, spec.action_values)
    assert spec.action_values[best[0]] == 10.0
    # closed form at A = 5: 0.3 * 3.14 + 0.08 * 1.6 + 0.1 * 2 + 0.05 * 1 + 0.02 * 5
    assert v[0, 4] == pytest.approx(1.420)


def test_meta_ties_pick_first_index():
    spec, draw = linear_draw([0.0, 0.0, 0.0], [0.5, 0.4, 0.0], [1.0, 0, 0, 0, 0, 0])
    v = meta_values(draw, 1.0, spec.meta_values, spec.action_values, np.zeros(3))
    assert np.allclose(v, v[0])
    assert meta_best_action(draw, 1.0, spec.meta_values, spec.action_values, np.zeros(3)) == 0


def test_symmetric_noise_keeps_linear_argmax():
    spec, draw = linear_draw([0.8, 0.0, 0.0], [0.5, 0.4, 0.0],
                             [0.3, 0.08, 0.1, 0.05, 0.02, 0.0], noise=(0.5, 0.5, 0.5))
    z = np.random.default_rng(0).standard_normal(64)
    z = np.concatenate([z, -z])
    m_noisy = meta_best_action(draw, 2.0, spec.meta_values, spec.action_values, z)
    m_clean = meta_best_action(draw, 2.0, spec.meta_values, spec.action_values, np.zeros(1))
    assert m_noisy == m_clean


def test_lcb_rule():
    spec, d0 = true_linear_draw()
    ctx = {"T": np.array([1.0]), "M": np.array([2.0]), "C": np.array([1.6])}
    greedy = lcb_inner_action([d0, d0], ctx, spec.action_values, 0.0)
    assert greedy[0] == inner_best_action(d0, ctx, spec.action_values)[0][0]
    with pytest.raises(ValueError):
        lcb_values([d0], ctx, spec.action_values, 1.0)


def test_lcb_penalty_ordering():
    # arm values (1, 2) and (-1, -2) across two draws: equal means, the
    # second arm has twice the spread, so the LCB prefers the first
    grid = np.array([0.0, 1.0])
    draws = []
    for s1, s2 in ((1, 2), (-1, -2)):
        _, d = linear_draw([0, 0, 0], [0.0, 0.0, 0.0], [0, 0, 0, 0, 0, 0])
        d.parts["R"] = MechanismDraw(LinearDesign(5), np.array([0, 0, 0, 0, s2 - s1, s1]),
                                     1e-12, d.parts["R"].parents)
        draws.append(d)
    ctx = {"T": np.array([1.0]), "M": np.array([1.0]), "C": np.array([0.0])}
    v = lcb_values(draws, ctx, grid, 1.0)
    assert v[0, 0] > v[0, 1]
    assert lcb_inner_action(draws, ctx, grid, 1.0)[0] == 0


def test_joint_commit_uses_representative_context():
    spec, draw = true_linear_draw()
    v = joint_commit_values(draw, 1.0, spec.meta_values, spec.action_values)
    assert v.shape == (5, 10)
    assert np.unravel_index(v.argmax(), v.shape) == (4, 9)


def test_joint_agent_commits_one_inner_action_per_meta_step():
    spec = build_stress_preset()
    legacy = default_legacy(spec)
    rec = build_agent("joint_cts", spec, 0).run_episode(legacy, 0, 0)
    assert np.unique(rec.a_idx).size == 1
    rec = build_agent("nested_cts", spec, 0)
    res = run_agent(rec, legacy, 3, seed=0, keep_records=True)
    assert any(np.unique(r.a_idx).size > 1 for r in res.records)


def test_d_optimal_prefers_leverage():
    spec = build_stress_preset()
    belief = hyper_prior({"C": ("M",)}, spec.scale_map(), BackendConfig(kind="nig"))
    s = d_optimal_scores(belief, 0.0, spec.meta_values, 20)
    assert np.argmax(s) == 0
    assert s[0] == pytest.approx(s[-1])
    assert s[3] == s.min()


def test_agent_taxonomy():
    spec = build_stress_preset()
    assert build_agent("flat_ts", spec).belief.names == ("R",)
    assert build_agent("flat_joint", spec).n_cells == 7 * 21
    assert set(build_agent("nested_cts", spec).belief.names) == {"C", "Y", "R"}
    assert build_agent("icts_type2", spec).config.meta_rule == "d_opt_hybrid"
    with pytest.raises(UnknownAgent):
        build_agent("not_an_agent", spec)
    for kind in AGENT_KINDS:
        build_agent(kind, spec)


def test_seeded_agent_runs_are_identical():
    spec = build_stress_preset()
    legacy = default_legacy(spec)
    a = run_agent(build_agent("nested_cts", spec, 1), legacy, 3, seed=4).returns
    b = run_agent(build_agent("nested_cts", spec, 1), legacy, 3, seed=4).returns
    assert a.tobytes() == b.tobytes()


def test_meta_rule_reads_only_its_context():
    # the meta action depends on T and the draw only: changing every inner
    # exogenous draw leaves it unchanged
    spec = build_stress_preset()
    agent = build_agent("nested_cts", spec, 0)
    legacy = default_legacy(spec)
    draw = agent.sample_draw(np.random.default_rng(0))
    stack_a = agent.policy_stack(draw, legacy, np.random.default_rng(1))
    stack_b = agent.policy_stack(draw, legacy, np.random.default_rng(1))
    t = {"T": np.array([0.3])}
    ia, _ = stack_a[0].act(t, spec.meta_values, np.array([0.5]))
    ib, _ = stack_b[0].act(t, spec.meta_values, np.array([0.9]))
    assert ia[0] == ib[0]


@pytest.mark.parametrize("scope", SCOPES)
def test_value_recursion_matches_enumeration(scope):
    rng = np.random.default_rng(10)
    for _ in range(5):
        truth = random_finite_scm(rng, n_c=3)
        legacy = random_legacy(rng, truth.shape)
        _, r2 = recursive_values(truth, scope, legacy[1])
        np.testing.assert_allclose(r2, brute_force_r2(truth, set(scope), legacy[1]),
                                   atol=1e-12)
        # the top-level value of the argmax policy is the recursion at its argmax
        pi_m, pi_a = scope_policy(truth, scope, legacy)
        if 2 in scope:
            want = float(truth.p_t @ r2.max(axis=1))
            assert abs(enumerate_value(truth, pi_m, pi_a) - want) <= 1e-9


@pytest.mark.parametrize("scope", SCOPES)
def test_importance_weighting_is_unbiased(scope):
    rng = np.random.default_rng(11)
    for _ in range(5):
        truth = random_finite_scm(rng)
        belief = random_finite_scm(rng)
        legacy = random_legacy(rng, truth.shape)
        pi_m, pi_a = scope_policy(belief, scope, legacy)
        direct = enumerate_value(truth, pi_m, pi_a)
        assert abs(policy_value(truth, pi_m, pi_a) - direct) <= 1e-12
        assert abs(enumerate_weighted_legacy(truth, legacy, pi_m, pi_a, scope) - direct) <= 1e-9
