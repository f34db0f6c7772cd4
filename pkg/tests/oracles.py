"""Exact enumeration oracles over tabular SCMs, shared by unit and acceptance tests."""

import itertools

import numpy as np

from nccb.prism import hybrid_weight

SCOPES = [(), (1,), (2,), (1, 2)]


def brute_force_r2(model, scope, mu_inner):
    n_t, n_m, n_c, n_a = model.shape
    out = np.zeros((n_t, n_m))
    er = model.expected_reward()
    for t, m in itertools.product(range(n_t), range(n_m)):
        total = 0.0
        for u, pu in enumerate(model.p_u):
            c = model.c_of[t, m, u]
            if 1 in scope:
                a_best = max(range(n_a), key=lambda a: (er[t, m, c, a], -a))
                for nv, pn in zip(model.n_vals, model.p_n):
                    total += pu * pn * (model.r_mean[t, m, c, a_best] + nv)
            else:
                for a in range(n_a):
                    for nv, pn in zip(model.n_vals, model.p_n):
                        total += pu * mu_inner[t, m, c, a] * pn * (model.r_mean[t, m, c, a] + nv)
        out[t, m] = total
    return out


def enumerate_value(model, pi_m, pi_a):
    n_t, n_m, n_c, n_a = model.shape
    v = 0.0
    for t, m, u, a, n in itertools.product(range(n_t), range(n_m), range(len(model.p_u)),
                                           range(n_a), range(len(model.p_n))):
        c = model.c_of[t, m, u]
        p = model.p_t[t] * pi_m[t, m] * model.p_u[u] * pi_a[t, m, c, a] * model.p_n[n]
        v += p * (model.r_mean[t, m, c, a] + model.n_vals[n])
    return v


def enumerate_weighted_legacy(model, legacy, pi_m, pi_a, scope):
    mu_m, mu_a = legacy
    n_t, n_m, n_c, n_a = model.shape
    v = 0.0
    for t, m, u, a, n in itertools.product(range(n_t), range(n_m), range(len(model.p_u)),
                                           range(n_a), range(len(model.p_n))):
        c = model.c_of[t, m, u]
        p = model.p_t[t] * mu_m[t, m] * model.p_u[u] * mu_a[t, m, c, a] * model.p_n[n]
        w = hybrid_weight(pi_m[t, m], pi_a[t, m, c, a], mu_m[t, m], mu_a[t, m, c, a], scope)
        v += p * float(w) * (model.r_mean[t, m, c, a] + model.n_vals[n])
    return v
