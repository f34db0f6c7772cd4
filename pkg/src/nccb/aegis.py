"""Certified progressive handover from a legacy controller to a host agent.

Each level starts under the legacy controller.  Episodes in which a level
acted under the legacy are logged to that level's buffer.  Every ``stride``
episodes the host's posterior policy is certified on each buffer and a level
whose certified gain over the legacy clears its margin is handed over for good
(the handover set only grows).

Three switches are wired independently:

* ``risk_adjust_inner``: controlled inner levels use the lower confidence
  bound ``mean - kappa_k * std`` over posterior draws;
* ``optimal_lambda``: certificates use the closed-form temperature instead
  of ``1/sqrt(K)``;
* ``progressive_handover``: the gate itself.  Without it every level is
  controlled by the host from the first episode.

With all three off the run is action-for-action the host's own nested
Thompson sampling: every extra computation draws from separate streams.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .env import (AGENT_STREAM, CERT_STREAM, ENV_STREAM, EpisodeRecord, episode_rng,
                  sample_episode)
from .policy import CausalAgent, InnerArgmax, InnerLcb
from .prism import (CertDataset, OverlapViolation, certified_gain, draw_panel,
                    evaluate_losses, lambda_star, posterior_target)

log = logging.getLogger(__name__)

LCB_STREAM = 53
TRAJECTORY_COLUMNS = ("k", "reward_mean", "gain_lb_inner", "gain_lb_meta",
                      "handover_inner", "handover_meta", "lambda_star", "kl_sum")
LEVEL_NAMES = {1: "inner", 2: "meta"}


def kappa_schedule(kl_sum: float, delta: float, k: int) -> float:
    """``sqrt(2 (KL + log(1/delta)) / k)``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return math.sqrt(2.0 * (kl_sum + math.log(1.0 / delta)) / k)


@dataclass(frozen=True)
class GateConfig:
    """Gate and switch settings.

    Attributes
    ----------
    margins : (float, float)
        Thresholds ``eps_l`` for the inner and meta levels.
    form : {"gain", "value"}
        ``gain`` compares the certified-gain lower bound with the margin;
        ``value`` compares the pessimistic value with legacy value + margin.
    anchor : {"range", "zero"}
        Reward anchoring of the certificate, see :mod:`nccb.prism`.
    explore : float
        Epsilon-greedy mixing on controlled levels while the gate is active.
    """

    margins: tuple[float, float] = (0.0, 0.0)
    delta: float = 0.05
    eta: float = 0.05
    stride: int = 50
    w_max: float | None = 1.0
    anchor: str = "zero"
    form: str = "gain"
    n_panel: int = 32
    n_mc: int = 32
    n_lcb: int = 32
    explore: float = 0.05
    risk_adjust_inner: bool = True
    optimal_lambda: bool = True
    progressive_handover: bool = True

    def __post_init__(self):
        if self.form not in ("gain", "value"):
            raise ValueError("form must be 'gain' or 'value'")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")

    @classmethod
    def switches_off(cls, **kw) -> "GateConfig":
        return cls(risk_adjust_inner=False, optimal_lambda=False,
                   progressive_handover=False, **kw)


@dataclass
class HandoverState:
    """Sticky handover set, per-level legacy buffers and flip episodes."""

    sigma: set = field(default_factory=set)
    buffers: dict = field(default_factory=lambda: {1: [], 2: []})
    full_legacy: list = field(default_factory=list)
    flip_episode: dict = field(default_factory=lambda: {1: None, 2: None})
    legacy_value: dict = field(default_factory=lambda: {1: float("nan"), 2: float("nan")})
    history: list = field(default_factory=list)

    def hand_over(self, level: int, k: int) -> None:
        if level in self.sigma:
            return
        self.sigma.add(level)
        self.flip_episode[level] = k

    def log_episode(self, rec: EpisodeRecord) -> None:
        for level in (1, 2):
            if level not in self.sigma:
                self.buffers[level].append(rec)
        if not self.sigma:
            self.full_legacy.append(rec)
        self.history.append(frozenset(self.sigma))


@dataclass
class GateOutcome:
    level: int
    gain_lb: float
    v_ls_pes: float
    v_legacy: float
    lam: float
    fired: bool


def gate_check(level: int, buffer: Sequence[EpisodeRecord], host: CausalAgent, legacy,
               cfg: GateConfig, rng: np.random.Generator, margin: float) -> GateOutcome | None:
    """Certify the host policy at ``level`` on the legacy buffer of that level.

    Returns ``None`` for an empty buffer.  An overlap violation is logged
    and reported as a gate that did not fire.
    """
    if len(buffer) == 0:
        return None
    spec = host.spec
    try:
        data = CertDataset.from_records(buffer, spec, cfg.anchor)
        target = posterior_target(spec, legacy[1], rng.standard_normal(cfg.n_mc))
        draws = draw_panel(host.belief, cfg.n_panel, rng)
        panel = evaluate_losses(data, draws, target, {level}, cfg.w_max)
    except OverlapViolation as exc:
        log.warning("gate check at level %d skipped: %s", level, exc)
        return GateOutcome(level, float("nan"), float("nan"), float("nan"), float("nan"), False)
    lam = None if cfg.optimal_lambda else min(1.0 / math.sqrt(data.K),
                                              (1.0 - cfg.eta) / panel.width)
    gain = certified_gain(data, data, host.belief, {level}, cfg.delta, lam,
                          panel=panel, eta=cfg.eta)
    if cfg.form == "gain":
        fired = gain.gain_lb >= margin
    else:
        fired = gain.v_ls_pes >= gain.v_legacy + margin
    return GateOutcome(level, gain.gain_lb, gain.v_ls_pes, gain.v_legacy,
                       gain.certificate.lam, bool(fired))


@dataclass
class AegisResult:
    returns: np.ndarray
    trajectory: list
    state: HandoverState
    actions: list = field(default_factory=list)

    @property
    def flip_inner(self):
        return self.state.flip_episode[1]

    @property
    def flip_meta(self):
        return self.state.flip_episode[2]


def aegis_run(host: CausalAgent, legacy, K: int, cfg: GateConfig, seed: int,
              record_actions: bool = False) -> AegisResult:
    """Run the handover schedule for ``K`` episodes.

    Parameters
    ----------
    host : CausalAgent
        Nested host agent; its posterior is updated after every episode.
    legacy : (meta_rule, inner_rule)
        Legacy controller registered for both levels.
    """
    state = HandoverState()
    rets = np.zeros(K)
    traj, actions = [], []
    last = {1: float("nan"), 2: float("nan")}
    lam_last = float("nan")
    for k in range(K):
        rng = episode_rng(seed, AGENT_STREAM, k)
        kl_sum = host.belief.kl_to_prior()[1]
        draw = host.sample_draw(rng)
        if cfg.progressive_handover:
            inner_ctrl, meta_ctrl = 1 in state.sigma, 2 in state.sigma
            eps = cfg.explore
        else:
            inner_ctrl, meta_ctrl = True, True
            eps = 0.0
        if not inner_ctrl:
            inner = legacy[1]
        elif cfg.risk_adjust_inner:
            lrng = episode_rng(seed, LCB_STREAM, k)
            kappa = kappa_schedule(kl_sum, cfg.delta, k + 1)
            inner = InnerLcb([host.sample_draw(lrng) for _ in range(cfg.n_lcb)], kappa, eps)
        else:
            inner = InnerArgmax(draw, eps)
        stack = host.policy_stack(draw, legacy, rng, meta_controlled=meta_ctrl,
                                  inner_rule=inner, epsilon=(eps, eps))
        rec = sample_episode(host.spec, stack, episode_rng(seed, ENV_STREAM, k), k)
        host.update(rec)
        rets[k] = rec.total_reward
        if record_actions:
            actions.append((rec.m_idx.copy(), rec.a_idx.copy()))
        if cfg.progressive_handover:
            state.log_episode(rec)
            if (k + 1) % cfg.stride == 0:
                crng = episode_rng(seed, CERT_STREAM, k)
                for level in (1, 2):
                    out = gate_check(level, state.buffers[level], host, legacy, cfg, crng,
                                     cfg.margins[level - 1])
                    if out is None:
                        continue
                    last[level] = out.gain_lb
                    state.legacy_value[level] = out.v_legacy
                    if level == 1 or math.isnan(lam_last):
                        lam_last = out.lam
                    if out.fired and level not in state.sigma:
                        state.hand_over(level, k + 1)
        elif cfg.optimal_lambda and (k + 1) % cfg.stride == 0:
            lam_last = _on_policy_lambda(host, rets[: k + 1], cfg, kl_sum)
        traj.append({"k": k + 1, "reward_mean": rec.mean_reward,
                     "gain_lb_inner": last[1], "gain_lb_meta": last[2],
                     "handover_inner": int(1 in state.sigma),
                     "handover_meta": int(2 in state.sigma),
                     "lambda_star": lam_last, "kl_sum": kl_sum})
    return AegisResult(rets, traj, state, actions)


def _on_policy_lambda(host, returns, cfg: GateConfig, kl_sum: float) -> float:
    # temperature of the on-policy certificate of the host's own episodes
    spec = host.spec
    lo, hi = spec.reward_range
    n = spec.samples_per_episode
    if cfg.anchor == "range":
        losses = (returns / n - lo) / (hi - lo)
        b, l_lo = 1.0, 0.0
    else:
        losses = returns / n / (hi - lo)
        b, l_lo = max(hi, 0.0) / (hi - lo), min(lo, 0.0) / (hi - lo)
    return lambda_star(losses, b, kl_sum + math.log(1.0 / cfg.delta), cfg.eta, l_lo)


def write_trajectory_csv(rows: Sequence[dict], path, extra: dict | None = None) -> None:
    extra = extra or {}
    cols = tuple(extra) + TRAJECTORY_COLUMNS
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([*extra.values(), *(_fmt(r[c]) for c in TRAJECTORY_COLUMNS)])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
