"""PAC-Bayes off-policy certificates with level-factored importance weights.

For a scope ``I`` the per-sample weight is the product over ``l in I`` of
``pi_theta(a|x) / mu(a|x)``.  The per-episode loss is the mean of weighted
rewards over the ``N_L`` samples of the episode.  The logarithmic-smoothing
estimator

    V_ls = B + 1/(lam K) sum_k E_Q log(1 - lam (B - L_k))

is pessimistic, and

    bound = V_ls - (KL(Q || p0) + log(1/delta)) / (lam K)

holds with probability ``1 - delta`` simultaneously over ``Q``.

Rewards are mapped to the unit scale with fixed environment constants.  With
``anchor="range"`` the losses lie in ``[0, B]``.  With ``anchor="zero"`` a raw
reward of zero stays at zero, losses lie in ``[L_lo, B]`` with ``L_lo <= 0``,
and the estimator is applied to the shifted loss ``L - L_lo``, which makes the
certificate a bound on the importance-weighted estimand with unsupported
counterfactuals imputed at raw reward zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .env import EpisodeRecord, ScmSpec
from .policy import normalise_scope, scoped_target_probs
from .posterior import FactorisedBelief


class OverlapViolation(ValueError):
    """A taken action has zero behaviour density but positive target density."""


class CertificateFault(ArithmeticError):
    """A log argument of the smoothing estimator left the positive domain."""


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class CertDataset:
    """Logged episodes flattened to per-sample arrays.

    Attributes
    ----------
    rows : dict of ndarray
        Per-sample columns ``T, M, C, A, Y, R, m_idx, a_idx, m_density,
        a_density``.
    episode : ndarray of int
        Position ``0..K-1`` of each sample's episode.
    meta_t, meta_rows : ndarray
        Meta context per meta step and, per sample, its meta-step index.
    reward : ndarray
        Rescaled rewards.
    reward_bounds : (float, float)
        Bounds of the rescaled reward.
    """

    rows: dict
    episode: np.ndarray
    meta_t: np.ndarray
    meta_rows: np.ndarray
    reward: np.ndarray
    reward_bounds: tuple[float, float]
    K: int
    ks: tuple[int, ...]
    anchor: str = "range"

    @classmethod
    def from_records(cls, records: Sequence[EpisodeRecord], spec: ScmSpec,
                     anchor: str = "range") -> "CertDataset":
        if len(records) == 0:
            raise ValueError("empty certificate dataset")
        cols: dict[str, list] = {}
        episode, meta_rows, meta_t = [], [], []
        step = 0
        for pos, rec in enumerate(records):
            r = rec.rows()
            for key, v in r.items():
                cols.setdefault(key, []).append(v)
            J, I = rec.r.shape
            episode.append(np.full(J * I, pos))
            meta_rows.append(step + np.repeat(np.arange(J), I))
            meta_t.append(rec.t)
            step += J
        rows = {k: np.concatenate(v) for k, v in cols.items()}
        if np.any(rows["m_density"] <= 0) or np.any(rows["a_density"] <= 0):
            raise OverlapViolation("behaviour density is zero at a taken action")
        lo, hi = spec.reward_range
        bounds = (0.0, 1.0) if anchor == "range" else (lo / (hi - lo), hi / (hi - lo))
        return cls(rows, np.concatenate(episode), np.concatenate(meta_t),
                   np.concatenate(meta_rows), spec.rescale(rows["R"], anchor), bounds,
                   len(records), tuple(int(r.k) for r in records), anchor)

    @property
    def n_samples(self) -> int:
        return self.reward.size

    def episode_mean(self, values: np.ndarray) -> np.ndarray:
        """Mean of per-sample ``values`` (last axis) within each episode."""
        counts = np.bincount(self.episode, minlength=self.K)
        v = np.atleast_2d(values)
        out = np.stack([np.bincount(self.episode, weights=row, minlength=self.K) for row in v])
        out /= counts
        return out if np.ndim(values) > 1 else out[0]


def split_episodes(records: Sequence[EpisodeRecord], alpha: float,
                   rng: np.random.Generator):
    """Independent Bernoulli(alpha) assignment to the prior set.

    Returns
    -------
    (prior_records, cert_records)
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    to_prior = rng.random(len(records)) < alpha
    prior = [r for r, p in zip(records, to_prior) if p]
    cert = [r for r, p in zip(records, to_prior) if not p]
    return prior, cert


# ---------------------------------------------------------------------------
# weights and losses
# ---------------------------------------------------------------------------

def hybrid_weight(pi_meta, pi_inner, mu_meta, mu_inner, scope) -> np.ndarray:
    """Product of ``pi/mu`` over the levels in ``scope`` (2 = meta, 1 = inner).

    Levels outside the scope contribute a factor of one.
    """
    scope = normalise_scope(scope)
    w = None
    for level, pi, mu in ((2, pi_meta, mu_meta), (1, pi_inner, mu_inner)):
        if level not in scope:
            continue
        pi = np.asarray(pi, dtype=float)
        mu = np.asarray(mu, dtype=float)
        bad = (mu <= 0) & (pi > 0)
        if np.any(bad):
            raise OverlapViolation(f"level {level}: zero behaviour density at a supported action")
        ratio = np.divide(pi, mu, out=np.zeros(np.broadcast(pi, mu).shape), where=mu > 0)
        w = ratio if w is None else w * ratio
    if w is None:
        return np.ones(np.broadcast(np.asarray(mu_meta), np.asarray(mu_inner)).shape)
    return w


def episode_mean_loss(weights, rewards, episode: np.ndarray, K: int,
                      w_max: float | None = None) -> np.ndarray:
    """``(1/N_L) sum w R`` per episode, after optional truncation at ``w_max``.

    ``weights`` may carry a leading axis of belief draws.
    """
    w = np.asarray(weights, dtype=float)
    if w_max is not None:
        w = np.minimum(w, w_max)
    counts = np.bincount(episode, minlength=K)
    if np.any(counts == 0):
        raise ValueError("every episode needs at least one sample")
    prod = w * np.asarray(rewards, dtype=float)
    if prod.ndim == 1:
        return np.bincount(episode, weights=prod, minlength=K) / counts
    return np.stack([np.bincount(episode, weights=p, minlength=K) for p in prod]) / counts


# ---------------------------------------------------------------------------
# target policies
# ---------------------------------------------------------------------------

TargetFn = Callable[[object, CertDataset, frozenset], tuple[np.ndarray, np.ndarray]]


def posterior_target(spec: ScmSpec, inner_legacy, z: np.ndarray) -> TargetFn:
    """Scope-aware argmax policy of each belief draw."""
    def target(draw, data: CertDataset, scope):
        return scoped_target_probs(draw, data.rows, data.meta_t, scope, spec, inner_legacy,
                                   z, data.meta_rows)
    return target


def on_policy_target(draw, data: CertDataset, scope):
    """Target identical to the behaviour at every level (weights of one)."""
    return data.rows["m_density"], data.rows["a_density"]


@dataclass
class LossPanel:
    """Per-draw episode-mean losses and the loss range they live in."""

    losses: np.ndarray  # (n_draws, K)
    b: float
    lo: float
    w_max_realised: float
    truncation: float | None

    @property
    def K(self) -> int:
        return self.losses.shape[1]

    @property
    def width(self) -> float:
        return self.b - self.lo

    @property
    def ips_mean(self) -> float:
        return float(self.losses.mean())


def evaluate_losses(data: CertDataset, draws: Sequence, target: TargetFn, scope,
                    w_max: float | None = None) -> LossPanel:
    scope = normalise_scope(scope)
    ws = []
    for d in draws:
        pm, pi = target(d, data, scope)
        ws.append(hybrid_weight(pm, pi, data.rows["m_density"], data.rows["a_density"], scope))
    w = np.stack(ws)
    if w_max is not None:
        w = np.minimum(w, w_max)
    losses = episode_mean_loss(w, data.reward, data.episode, data.K)
    w_top = float(w.max())
    if w_top <= 0:
        # no logged action is supported by any draw; any positive B is valid
        w_top = 1.0
    r_lo, r_hi = data.reward_bounds
    return LossPanel(losses, w_top * max(r_hi, 0.0), w_top * min(r_lo, 0.0),
                     float(w.max()), w_max)


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

def ls_pessimistic_value(losses: np.ndarray, b: float, lam: float, lo: float = 0.0) -> float:
    """Logarithmic-smoothing pessimistic value.

    Parameters
    ----------
    losses : ndarray of shape (n_draws, K) or (K,)
        Episode-mean losses; the mean over draws is the Q-expectation.
    b, lo : float
        Upper and lower ends of the loss range.
    lam : float
        Temperature in ``(0, 1/(b - lo))``.
    """
    L = np.atleast_2d(np.asarray(losses, dtype=float))
    width = b - lo
    if not 0 < lam < 1.0 / width:
        raise ValueError(f"lambda {lam} outside (0, 1/(B - L_lo)) = (0, {1.0 / width})")
    arg = 1.0 - lam * (b - L)
    if np.any(arg <= 0):
        raise CertificateFault("non-positive log argument in the smoothing estimator")
    K = L.shape[1]
    return float(b + np.log(arg).mean(axis=0).sum() / (lam * K))


def lambda_star(losses: np.ndarray, b: float, penalty: float, eta: float = 0.05,
                lo: float = 0.0) -> float:
    """Bound-minimising temperature ``min((1-eta)/(B-lo), sqrt(2 C / (K S^2)))``.

    ``penalty`` is ``C = KL + log(1/delta)``.
    """
    L = np.atleast_2d(np.asarray(losses, dtype=float))
    K = L.shape[1]
    clip = (1.0 - eta) / (b - lo)
    s2 = float(((b - L) ** 2).mean())
    if s2 <= 0 or penalty <= 0:
        return clip
    return float(min(clip, math.sqrt(2.0 * penalty / (K * s2))))


@dataclass
class Certificate:
    """A PRISM evaluation."""

    scope: tuple[int, ...]
    lam: float
    b: float
    v_ls_pes: float
    kl_per_mechanism: dict
    kl_sum: float
    delta: float
    K: int
    lower_bound: float
    truncation: float | None = None
    loss_lo: float = 0.0
    ips_mean: float = float("nan")
    episode_losses: np.ndarray | None = field(default=None, repr=False)

    def record(self) -> dict:
        """Structured text record (JSON-serialisable)."""
        return {"scope": list(self.scope), "lambda": self.lam, "B": self.b,
                "V_ls_pes": self.v_ls_pes, "kl_per_mechanism": self.kl_per_mechanism,
                "kl_sum": self.kl_sum, "delta": self.delta, "K": self.K,
                "lower_bound": self.lower_bound, "truncation": self.truncation}

    def to_json(self) -> str:
        return json.dumps(self.record(), sort_keys=True)


def draw_panel(belief: FactorisedBelief, n: int, rng: np.random.Generator) -> list:
    return [belief.sample(rng) for _ in range(n)]


def certificate_from_panel(panel: LossPanel, kl_per: Mapping[str, float], kl_sum: float,
                           scope, delta: float, lam: float | None = None,
                           eta: float = 0.05, log_term: float | None = None) -> Certificate:
    """Assemble a certificate from precomputed losses."""
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    log_term = math.log(1.0 / delta) if log_term is None else log_term
    penalty = kl_sum + log_term
    if lam is None:
        lam = lambda_star(panel.losses, panel.b, penalty, eta, panel.lo)
    v = ls_pessimistic_value(panel.losses, panel.b, lam, panel.lo)
    lb = v - penalty / (lam * panel.K)
    return Certificate(tuple(sorted(normalise_scope(scope))), float(lam), panel.b, v,
                       dict(kl_per), float(kl_sum), float(delta), panel.K, float(lb),
                       panel.truncation, panel.lo, panel.ips_mean,
                       panel.losses.mean(axis=0))


def prism_lower_bound(data: CertDataset, belief: FactorisedBelief, scope, delta: float,
                      lam: float | None = None, *, target: TargetFn | None = None,
                      spec: ScmSpec | None = None, inner_legacy=None, n_panel: int = 32,
                      n_mc: int = 32, rng: np.random.Generator | None = None,
                      w_max: float | None = None, eta: float = 0.05) -> Certificate:
    """PAC-Bayes lower bound on the value of the posterior policy ``pi_Q``.

    ``lam=None`` uses the closed-form temperature.  The Q-expectation uses a
    panel of ``n_panel`` belief draws shared across episodes.
    """
    scope = normalise_scope(scope)
    rng = np.random.default_rng(0) if rng is None else rng
    if target is None:
        if spec is None:
            raise ValueError("spec is required for the posterior target")
        target = posterior_target(spec, inner_legacy, rng.standard_normal(n_mc))
    draws = draw_panel(belief, n_panel, rng) if scope else [None]
    panel = evaluate_losses(data, draws, target, scope, w_max)
    kl_per, kl_sum = belief.kl_to_prior(scope)
    return certificate_from_panel(panel, kl_per, kl_sum, scope, delta, lam, eta)


def select_scope(data: CertDataset, belief: FactorisedBelief, candidates: Iterable,
                 delta: float, seed: int = 0, **kwargs) -> tuple[tuple[int, ...], dict]:
    """Evaluate every candidate scope at ``delta / |candidates|`` and return
    the one with the largest lower bound plus all certificates.

    Every candidate sees the same belief panel (same ``seed``).  Ties go to
    the smaller scope.
    """
    cands = [normalise_scope(c) for c in candidates]
    if not cands:
        raise ValueError("no candidate scopes")
    d = delta / len(cands)
    certs = {}
    for c in cands:
        certs[tuple(sorted(c))] = prism_lower_bound(
            data, belief, c, d, rng=np.random.default_rng(seed), **kwargs)
    best = max(certs, key=lambda s: (certs[s].lower_bound, -len(s)))
    return best, certs


def legacy_ips_value(legacy_data: CertDataset) -> float:
    """Mean of on-policy legacy episode-mean rescaled rewards."""
    if legacy_data.K == 0:
        raise ValueError("empty legacy dataset")
    return float(legacy_data.episode_mean(legacy_data.reward).mean())


@dataclass
class GainBound:
    gain_lb: float
    v_ls_pes: float
    v_legacy: float
    penalty: float
    certificate: Certificate


def certified_gain(cert_data: CertDataset, legacy_data: CertDataset, belief: FactorisedBelief,
                   scope, delta: float, lam: float | None = None, *,
                   panel: LossPanel | None = None, eta: float = 0.05, **kwargs) -> GainBound:
    """``V_ls(pi_Q) - V_ips(mu) - (KL + log(2/delta)) / (lam K)``."""
    scope = normalise_scope(scope)
    if panel is None:
        rng = kwargs.pop("rng", None) or np.random.default_rng(0)
        spec = kwargs.pop("spec")
        target = kwargs.pop("target", None) or posterior_target(
            spec, kwargs.pop("inner_legacy", None), rng.standard_normal(kwargs.pop("n_mc", 32)))
        draws = draw_panel(belief, kwargs.pop("n_panel", 32), rng)
        panel = evaluate_losses(cert_data, draws, target, scope, kwargs.pop("w_max", None))
    kl_per, kl_sum = belief.kl_to_prior(scope)
    cert = certificate_from_panel(panel, kl_per, kl_sum, scope, delta, lam, eta,
                                  log_term=math.log(2.0 / delta))
    v_leg = legacy_ips_value(legacy_data)
    penalty = (kl_sum + math.log(2.0 / delta)) / (cert.lam * cert.K)
    return GainBound(cert.v_ls_pes - v_leg - penalty, cert.v_ls_pes, v_leg, penalty, cert)
