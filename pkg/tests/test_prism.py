import math

import numpy as np
import pytest

from nccb.env import build_linear_anm, build_stress_preset, default_legacy, episode_rng, \
    sample_episode
from nccb.policy import build_agent
from nccb.prism import (CertDataset, CertificateFault, LossPanel, OverlapViolation,
                        certificate_from_panel, certified_gain, episode_mean_loss,
                        hybrid_weight, lambda_star, ls_pessimistic_value, on_policy_target,
                        prism_lower_bound, select_scope, split_episodes)


def legacy_records(spec, n, seed=0):
    legacy = default_legacy(spec)
    return [sample_episode(spec, legacy, episode_rng(seed, 11, k), k) for k in range(n)]


def test_hybrid_weight_examples():
    assert hybrid_weight(0.3, 0.2, 0.3, 0.2, {1, 2}) == pytest.approx(1.0)
    # deterministic legacy: weight is the target density of the legacy action
    assert hybrid_weight(1.0, 0.4, 1.0, 1.0, {1}) == pytest.approx(0.4)
    assert hybrid_weight(0.5, 0.5, 0.1, 0.1, {1, 2}) == pytest.approx(25.0)
    assert hybrid_weight(0.5, 0.5, 0.1, 0.1, ()) == pytest.approx(1.0)
    with pytest.raises(OverlapViolation):
        hybrid_weight(np.array([0.5]), 1.0, np.array([0.0]), 1.0, {2})


def test_episode_mean_loss_examples():
    ep = np.array([0, 0])
    assert episode_mean_loss([1.0, 3.0], [0.5, 0.25], ep, 1)[0] == pytest.approx(0.625)
    assert episode_mean_loss([1.0, 1.0], [0.0, 0.0], ep, 1)[0] == 0.0
    assert episode_mean_loss([1.0, 1.0], [1.0, 1.0], ep, 1)[0] == 1.0
    assert episode_mean_loss([5.0, 5.0], [1.0, 1.0], ep, 1, w_max=2.0)[0] == 2.0
    with pytest.raises(ValueError):
        episode_mean_loss([1.0], [1.0], np.array([0]), 2)


def test_ls_estimator_examples():
    assert ls_pessimistic_value(np.ones(5), 1.0, 0.5) == pytest.approx(1.0)
    assert ls_pessimistic_value(np.array([0.5]), 1.0, 0.5) == pytest.approx(
        1 + 2 * math.log(0.75), abs=1e-12)
    assert 1 + 2 * math.log(0.75) == pytest.approx(0.4247, abs=1e-4)
    L = np.random.default_rng(0).uniform(0, 1, 50)
    assert ls_pessimistic_value(L, 1.0, 1e-6) == pytest.approx(L.mean(), abs=1e-3)
    with pytest.raises(ValueError):
        ls_pessimistic_value(L, 1.0, 1.0)
    with pytest.raises(CertificateFault):
        ls_pessimistic_value(np.array([-5.0]), 1.0, 0.5)


def test_ls_is_pessimistic_over_lambda_grid():
    rng = np.random.default_rng(1)
    for _ in range(50):
        b = rng.uniform(0.5, 5.0)
        L = rng.uniform(0, b, size=(rng.integers(1, 8), rng.integers(1, 40)))
        for lam in np.linspace(0.01, 0.99, 20) / b:
            assert ls_pessimistic_value(L, b, lam) <= L.mean() + 1e-12


def test_lambda_star_examples_and_domain():
    K = 10
    s2 = 0.3
    L = 1.0 - np.full(K, math.sqrt(s2))
    # C = K S^2 / 2 gives the unit sqrt branch, clipped to 0.95
    assert lambda_star(L, 1.0, K * s2 / 2, eta=0.05) == pytest.approx(0.95)
    big = lambda_star(np.zeros(K), 1.0, 0.1, eta=0.05)
    assert big < 0.95
    assert lambda_star(np.ones(K), 1.0, 1.0) == pytest.approx(0.95)
    rng = np.random.default_rng(2)
    for _ in range(1000):
        b = rng.uniform(0.01, 100.0)
        L = rng.uniform(0, b, size=rng.integers(1, 50))
        lam = lambda_star(L, b, rng.uniform(0, 50), eta=rng.uniform(1e-3, 0.5))
        assert 0 < lam < 1.0 / b


def _panel(L, b=1.0):
    L = np.atleast_2d(L)
    return LossPanel(L, b, 0.0, 1.0, None)


def test_bound_algebra():
    rng = np.random.default_rng(3)
    L = rng.uniform(0, 1, 40)
    c1 = certificate_from_panel(_panel(L), {}, 0.0, {1}, 1.0, lam=0.5)
    assert c1.lower_bound == pytest.approx(c1.v_ls_pes)
    a = certificate_from_panel(_panel(L), {"Y": 2.0}, 2.0, {1}, 0.1, lam=0.5)
    b = certificate_from_panel(_panel(L), {"Y": 2.0}, 2.0, {1}, 0.05, lam=0.5)
    assert a.lower_bound - b.lower_bound == pytest.approx(math.log(2) / (0.5 * 40))
    assert a.lower_bound == pytest.approx(a.v_ls_pes - (2.0 + math.log(10)) / (0.5 * 40))
    # doubling K with the same empirical terms halves the penalty
    L2 = np.concatenate([L, L])
    c2 = certificate_from_panel(_panel(L2), {}, 2.0, {1}, 0.1, lam=0.5)
    assert (c2.v_ls_pes - c2.lower_bound) == pytest.approx(
        0.5 * (a.v_ls_pes - a.lower_bound))
    rec = a.record()
    assert set(rec) == {"scope", "lambda", "B", "V_ls_pes", "kl_per_mechanism", "kl_sum",
                        "delta", "K", "lower_bound", "truncation"}


def test_split_episodes():
    spec = build_stress_preset()
    recs = legacy_records(spec, 40)
    p, c = split_episodes(recs, 0.0, np.random.default_rng(0))
    assert p == [] and len(c) == 40
    p1, c1 = split_episodes(recs, 0.5, np.random.default_rng(1))
    p2, c2 = split_episodes(recs, 0.5, np.random.default_rng(1))
    assert [r.k for r in p1] == [r.k for r in p2]
    assert not {r.k for r in p1} & {r.k for r in c1}
    n = sum(np.random.default_rng(9).random(2000) < 0.5)
    assert abs(n - 1000) < 3 * math.sqrt(2000 * 0.25)


def test_on_policy_certificate_and_empty_scope():
    spec = build_linear_anm()
    recs = legacy_records(spec, 30)
    data = CertDataset.from_records(recs, spec)
    agent = build_agent("nested_cts", spec, 0, backend="nig")
    c = prism_lower_bound(data, agent.belief, {1, 2}, 0.1, target=on_policy_target,
                          n_panel=1)
    assert c.b == pytest.approx(1.0) and c.kl_sum == 0.0
    assert c.lower_bound <= c.ips_mean
    e = prism_lower_bound(data, agent.belief, (), 0.1, spec=spec,
                          inner_legacy=default_legacy(spec)[1])
    assert e.kl_sum == 0.0 and c.ips_mean == pytest.approx(e.ips_mean)


def test_select_scope_prefers_smaller_kl_when_weights_match():
    spec = build_linear_anm()
    data = CertDataset.from_records(legacy_records(spec, 20), spec)
    agent = build_agent("nested_cts", spec, 0, backend="nig")
    for r in legacy_records(spec, 5, seed=7):
        agent.belief.mechanisms["C"] = agent.belief.mechanisms["C"].updated(r.rows())
    best, certs = select_scope(data, agent.belief, [{1}, {1, 2}], 0.1,
                               target=on_policy_target, n_panel=1)
    assert certs[(1, 2)].kl_sum > certs[(1,)].kl_sum
    assert best == (1,)
    single, certs1 = select_scope(data, agent.belief, [{1}], 0.1,
                                  target=on_policy_target, n_panel=1)
    assert single == (1,) and certs1[(1,)].delta == 0.1


def test_certified_gain_with_identical_policy_is_not_positive():
    spec = build_linear_anm()
    data = CertDataset.from_records(legacy_records(spec, 30), spec)
    agent = build_agent("nested_cts", spec, 0, backend="nig")
    g = certified_gain(data, data, agent.belief, {1}, 0.1, spec=spec,
                       target=on_policy_target, n_panel=1)
    assert g.gain_lb <= 0.0
    assert g.v_ls_pes <= g.v_legacy + 1e-12


def test_truncation_flagged_and_b_uses_truncated_weights():
    spec = build_stress_preset()
    data = CertDataset.from_records(legacy_records(spec, 10), spec)
    agent = build_agent("nested_cts", spec, 0)
    c = prism_lower_bound(data, agent.belief, {1}, 0.1, spec=spec,
                          inner_legacy=default_legacy(spec)[1], n_panel=2, n_mc=4,
                          w_max=1.0)
    assert c.truncation == 1.0 and c.b <= 1.0


def test_certificate_reruns_are_byte_identical():
    spec = build_stress_preset()
    data = CertDataset.from_records(legacy_records(spec, 10), spec)
    agent = build_agent("nested_cts", spec, 0)
    kw = dict(spec=spec, inner_legacy=default_legacy(spec)[1], n_panel=2, n_mc=4)
    a = prism_lower_bound(data, agent.belief, {1, 2}, 0.1,
                          rng=np.random.default_rng(5), **kw)
    b = prism_lower_bound(data, agent.belief, {1, 2}, 0.1,
                          rng=np.random.default_rng(5), **kw)
    assert a.to_json() == b.to_json()
