"""Finite two-level SCMs with tabular mechanisms.

Small enough to enumerate every outcome, these models serve as exact
references for the scope-aware value recursion and the level-factored
importance weights.  The variables are the meta context ``T``, the meta
action ``M``, the inner context ``C = f_C(T, M, U)`` with a discrete noise
atom ``U``, the inner action ``A`` and the reward ``R = r(T, M, C, A) + N``
with a discrete reward noise ``N``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .policy import normalise_scope


@dataclass(frozen=True)
class FiniteScm:
    """Tabular two-level SCM.

    Attributes
    ----------
    p_t : ndarray (n_t,)
        Meta-context distribution.
    p_u : ndarray (n_u,)
        Distribution of the context noise atoms.
    c_of : int ndarray (n_t, n_m, n_u)
        Inner-context index produced by ``(T, M, U)``.
    r_mean : ndarray (n_t, n_m, n_c, n_a)
        Noise-free reward.
    n_vals, p_n : ndarray (n_n,)
        Reward-noise atoms and their probabilities.
    """

    p_t: np.ndarray
    p_u: np.ndarray
    c_of: np.ndarray
    r_mean: np.ndarray
    n_vals: np.ndarray
    p_n: np.ndarray

    def __post_init__(self) -> None:
        for name in ("p_t", "p_u", "p_n"):
            p = np.asarray(getattr(self, name))
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise ValueError(f"{name} is not a probability vector")
        n_t, n_m, n_c, _ = self.r_mean.shape
        if self.c_of.shape != (n_t, n_m, len(self.p_u)):
            raise ValueError("c_of must have shape (n_t, n_m, n_u)")
        if self.c_of.min() < 0 or self.c_of.max() >= n_c:
            raise ValueError("c_of indexes outside the context support")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.r_mean.shape

    def expected_reward(self) -> np.ndarray:
        """``E[R | T, M, C, A]``, shape ``(n_t, n_m, n_c, n_a)``."""
        return self.r_mean + float(self.n_vals @ self.p_n)


def random_finite_scm(rng: np.random.Generator, n_t: int = 2, n_m: int = 2, n_c: int = 3,
                      n_a: int = 2, n_u: int = 2, n_n: int = 2) -> FiniteScm:
    """Random model with strictly positive probabilities everywhere."""
    def simplex(n):
        p = rng.uniform(0.2, 1.0, n)
        return p / p.sum()
    return FiniteScm(p_t=simplex(n_t), p_u=simplex(n_u),
                     c_of=rng.integers(0, n_c, size=(n_t, n_m, n_u)),
                     r_mean=rng.uniform(0.0, 1.0, size=(n_t, n_m, n_c, n_a)),
                     n_vals=rng.uniform(-0.5, 0.5, n_n), p_n=simplex(n_n))


def random_legacy(rng: np.random.Generator, shape) -> tuple[np.ndarray, np.ndarray]:
    """Fully supported stochastic legacy tables ``(mu_meta, mu_inner)``."""
    n_t, n_m, n_c, n_a = shape
    mu_m = rng.uniform(0.2, 1.0, (n_t, n_m))
    mu_a = rng.uniform(0.2, 1.0, (n_t, n_m, n_c, n_a))
    return mu_m / mu_m.sum(-1, keepdims=True), mu_a / mu_a.sum(-1, keepdims=True)


def recursive_values(model: FiniteScm, scope, mu_inner: np.ndarray):
    """Scope-aware expected rewards of each level under ``model``.

    Returns
    -------
    r1 : ndarray (n_t, n_m, n_c, n_a)
        ``E[R | A=a, T, M, C]``.
    r2 : ndarray (n_t, n_m)
        ``E[continuation at the inner level | M=m, T]``, where the inner level
        maximises ``r1`` if it is in the scope and follows ``mu_inner``
        otherwise.
    """
    scope = normalise_scope(scope)
    r1 = model.expected_reward()
    inner = r1.max(-1) if 1 in scope else (mu_inner * r1).sum(-1)
    return r1, _average_context(model, inner)


def _average_context(model: FiniteScm, inner: np.ndarray) -> np.ndarray:
    # E_U[inner(T, M, f_C(T, M, U))] for every (T, M)
    n_t, n_m, _ = inner.shape
    t_idx, m_idx = np.meshgrid(np.arange(n_t), np.arange(n_m), indexing="ij")
    return inner[t_idx[..., None], m_idx[..., None], model.c_of] @ model.p_u


def _one_hot_argmax(values: np.ndarray) -> np.ndarray:
    # np.argmax returns the lowest index among ties
    out = np.zeros_like(values)
    np.put_along_axis(out, values.argmax(-1)[..., None], 1.0, axis=-1)
    return out


def scope_policy(model: FiniteScm, scope, legacy) -> tuple[np.ndarray, np.ndarray]:
    """Hybrid policy tables: argmax under ``model`` inside the scope, legacy outside."""
    scope = normalise_scope(scope)
    mu_m, mu_a = legacy
    r1, r2 = recursive_values(model, scope, mu_a)
    pi_m = _one_hot_argmax(r2) if 2 in scope else np.asarray(mu_m, dtype=float)
    pi_a = _one_hot_argmax(r1) if 1 in scope else np.asarray(mu_a, dtype=float)
    return pi_m, pi_a


def policy_value(model: FiniteScm, pi_meta: np.ndarray, pi_inner: np.ndarray) -> float:
    """Expected reward of the tabular policy ``(pi_meta, pi_inner)`` under ``model``."""
    inner = (pi_inner * model.expected_reward()).sum(-1)
    per_tm = _average_context(model, inner)
    return float(model.p_t @ (pi_meta * per_tm).sum(-1))
