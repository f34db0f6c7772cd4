"""Scope-aware nested causal Thompson sampling and baseline agents.

The value recursion for two levels reads

* inner: ``R1(a; t, m, c) = E[R | do(A=a), t, m, c; theta]``
* meta:  ``R2(m; t) = E_{C ~ P(.|t, m; theta)}[ max_a R1 ]`` when the inner
  level is controlled, or the legacy-weighted average of ``R1`` otherwise.

Expectations over the outcome noise are closed form (linear mechanisms are
exact at the mean, RFF features are damped by the Gaussian characteristic
function).  Expectations over the inner context use ``n_mc`` standard normal
draws shared across meta candidates.  Ties resolve to the lowest grid index.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .env import (AGENT_STREAM, ENV_STREAM, EpisodeRecord, LegacyPolicy, ScmSpec,
                  episode_rng, sample_episode)
from .posterior import BackendConfig, BeliefDraw, FactorisedBelief, hyper_prior

AGENT_KINDS = ("flat_ts", "flat_cts", "joint_cts", "nested_cts", "aegis_cts",
               "aegis_handover", "flat_joint", "icts_type1", "icts_type2")
META_RULES = ("thompson", "greedy", "d_optimal", "d_opt_hybrid")


class UnknownAgent(ValueError):
    pass


def normalise_scope(scope) -> frozenset[int]:
    s = frozenset(int(v) for v in scope)
    if not s <= {1, 2}:
        raise ValueError(f"scope {sorted(s)} is not a subset of {{1, 2}}")
    return s


# ---------------------------------------------------------------------------
# value computations under one parameter draw
# ---------------------------------------------------------------------------

def _column(values, n: int) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    return np.broadcast_to(v, (n,)) if v.ndim == 0 or v.size == 1 else v.reshape(n)


def inner_values(draw: BeliefDraw, ctx: Mapping[str, np.ndarray],
                 grid: np.ndarray) -> np.ndarray:
    """Predicted ``E[R | do(A=a), ctx]`` for every row and grid action.

    Returns
    -------
    ndarray of shape (n_rows, n_grid)
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty action grid")
    n = np.asarray(ctx["C"]).size
    rmech = draw["R"]
    if "Y" not in draw:
        # joint reward regression over the full context
        pa = rmech.parents
        X = np.column_stack([_column(ctx[p], n) if p != "A" else np.zeros(n) for p in pa])
        return rmech.outer_predict(X, pa.index("A"), grid)
    ymech = draw["Y"]
    ypa = ymech.parents
    Xy = np.column_stack([_column(ctx[p], n) if p != "A" else np.zeros(n) for p in ypa])
    fy = ymech.outer_predict(Xy, ypa.index("A"), grid)
    rpa = rmech.parents
    if rpa == ("Y",):
        Xr = fy.reshape(-1, 1)
    else:
        cols = []
        for p in rpa:
            if p == "Y":
                cols.append(fy.ravel())
            elif p == "A":
                cols.append(np.tile(grid, n))
            else:
                cols.append(np.repeat(_column(ctx[p], n), grid.size))
        Xr = np.column_stack(cols)
    out = rmech.predict_smoothed(Xr, rpa.index("Y"), ymech.noise_var)
    return out.reshape(n, grid.size)


def inner_values_mc(draw: BeliefDraw, ctx, grid, n_mc: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Monte-Carlo version of :func:`inner_values` over outcome noise."""
    if "Y" not in draw:
        return inner_values(draw, ctx, grid)
    grid = np.asarray(grid, dtype=float)
    n = np.asarray(ctx["C"]).size
    ymech, rmech = draw["Y"], draw["R"]
    ypa, rpa = ymech.parents, rmech.parents
    Xy = np.column_stack([_column(ctx[p], n) if p != "A" else np.zeros(n) for p in ypa])
    fy = ymech.outer_predict(Xy, ypa.index("A"), grid)
    acc = np.zeros((n, grid.size))
    for _ in range(n_mc):
        y = fy + np.sqrt(ymech.noise_var) * rng.standard_normal(fy.shape)
        cols = []
        for p in rpa:
            if p == "Y":
                cols.append(y.ravel())
            elif p == "A":
                cols.append(np.tile(grid, n))
            else:
                cols.append(np.repeat(_column(ctx[p], n), grid.size))
        acc += rmech.predict(np.column_stack(cols)).reshape(n, grid.size)
    return acc / n_mc


def inner_best_action(draw: BeliefDraw, ctx, grid) -> tuple[np.ndarray, np.ndarray]:
    """Grid index of the best inner action per row and the value table."""
    v = inner_values(draw, ctx, grid)
    return v.argmax(axis=1), v


def context_draws(draw: BeliefDraw, t: float, m_grid: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Inner contexts ``f_C(m, t) + s * z`` for every meta candidate.

    Returns
    -------
    ndarray of shape (n_meta, n_mc)
    """
    cm = draw["C"]
    pa = cm.parents
    n = m_grid.size
    X = np.column_stack([m_grid if p == "M" else np.full(n, float(t)) for p in pa])
    mean = cm.predict(X)
    return mean[:, None] + np.sqrt(cm.noise_var) * np.asarray(z)[None, :]


def meta_values(draw: BeliefDraw, t: float, m_grid: np.ndarray, a_grid: np.ndarray,
                z: np.ndarray, inner_controlled: bool = True,
                inner_legacy: LegacyPolicy | None = None) -> np.ndarray:
    """``R2(m; t)`` for every meta candidate."""
    m_grid = np.asarray(m_grid, dtype=float)
    if m_grid.size == 0:
        raise ValueError("empty meta grid")
    c = context_draws(draw, t, m_grid, z)
    n_m, n_mc = c.shape
    ctx = {"T": np.full(n_m * n_mc, float(t)), "M": np.repeat(m_grid, n_mc), "C": c.ravel()}
    v1 = inner_values(draw, ctx, a_grid)
    if inner_controlled:
        best = v1.max(axis=1)
    else:
        best = (inner_legacy.probs(ctx, a_grid) * v1).sum(axis=1)
    return best.reshape(n_m, n_mc).mean(axis=1)


def meta_best_action(draw: BeliefDraw, t: float, m_grid, a_grid, z,
                     inner_controlled: bool = True, inner_legacy=None) -> int:
    return int(np.argmax(meta_values(draw, t, m_grid, a_grid, z, inner_controlled,
                                     inner_legacy)))


def joint_commit_values(draw: BeliefDraw, t: float, m_grid, a_grid) -> np.ndarray:
    """Values of every ``(m, a)`` pair at the representative context
    ``C_hat = E[C | t, m; theta]``.  Shape ``(n_meta, n_grid)``."""
    c_hat = context_draws(draw, t, np.asarray(m_grid, dtype=float), np.zeros(1))[:, 0]
    n_m = c_hat.size
    ctx = {"T": np.full(n_m, float(t)), "M": np.asarray(m_grid, dtype=float), "C": c_hat}
    return inner_values(draw, ctx, a_grid)


def d_optimal_scores(belief: FactorisedBelief, t: float, m_grid, n_rows: int) -> np.ndarray:
    """Expected log-det Fisher-information gain of intervening ``do(M=m)``.

    Only mechanisms with ``M`` as a parent respond to the design; other
    mechanisms contribute a constant and are omitted.
    """
    m_grid = np.asarray(m_grid, dtype=float)
    score = np.zeros(m_grid.size)
    for mech in belief.mechanisms.values():
        if "M" not in mech.parents or not set(mech.parents) <= {"M", "T"}:
            continue
        X = np.column_stack([m_grid if p == "M" else np.full(m_grid.size, float(t))
                             for p in mech.parents])
        score += mech.information(X, n_rows)
    return score


def lcb_values(draws: Sequence[BeliefDraw], ctx, grid, kappa: float) -> np.ndarray:
    """``mean - kappa * std`` of the predicted reward across posterior draws."""
    if kappa > 0 and len(draws) < 2:
        raise ValueError("the LCB rule needs at least two draws when kappa > 0")
    v = np.stack([inner_values(d, ctx, grid) for d in draws])
    mu = v.mean(axis=0)
    if len(draws) < 2:
        return mu
    return mu - kappa * v.std(axis=0, ddof=1)


def lcb_inner_action(draws: Sequence[BeliefDraw], ctx, grid, kappa: float) -> np.ndarray:
    return lcb_values(draws, ctx, grid, kappa).argmax(axis=1)


# ---------------------------------------------------------------------------
# level rules consumed by env.sample_episode
# ---------------------------------------------------------------------------

def _eps_mix(best: np.ndarray, n: int, u: np.ndarray, eps: float):
    """Epsilon-greedy over a grid of size ``n`` driven by uniforms ``u``."""
    if eps <= 0:
        return best, np.ones(best.size)
    explore = u < eps
    idx = np.where(explore, np.minimum((u / eps * n).astype(int), n - 1), best)
    dens = np.where(idx == best, 1 - eps + eps / n, eps / n)
    return idx, dens


@dataclass
class InnerArgmax:
    """Thompson or greedy inner rule: argmax under a fixed draw."""

    draw: BeliefDraw
    epsilon: float = 0.0
    controlled: bool = True

    def act(self, ctx, grid, u):
        best, _ = inner_best_action(self.draw, ctx, grid)
        return _eps_mix(best, grid.size, u, self.epsilon)


@dataclass
class InnerLcb:
    draws: Sequence[BeliefDraw]
    kappa: float
    epsilon: float = 0.0
    controlled: bool = True

    def act(self, ctx, grid, u):
        best = lcb_inner_action(self.draws, ctx, grid, self.kappa)
        return _eps_mix(best, grid.size, u, self.epsilon)


@dataclass
class MetaRule:
    """Meta rule evaluated at the realised meta context.

    ``mode`` is one of the meta rules.  ``value_draw`` supplies the values for
    Thompson (the episode draw) or greedy (the posterior-mean draw).
    """

    mode: str
    value_draw: BeliefDraw
    a_grid: np.ndarray
    z: np.ndarray
    belief: FactorisedBelief | None = None
    n_rows: int = 20
    top_k: int = 3
    inner_controlled: bool = True
    inner_legacy: LegacyPolicy | None = None
    epsilon: float = 0.0
    controlled: bool = True
    last_values: np.ndarray | None = field(default=None, repr=False)

    def choose(self, t: float, m_grid: np.ndarray) -> int:
        if self.mode in ("thompson", "greedy"):
            v = meta_values(self.value_draw, t, m_grid, self.a_grid, self.z,
                            self.inner_controlled, self.inner_legacy)
            self.last_values = v
            return int(np.argmax(v))
        info = d_optimal_scores(self.belief, t, m_grid, self.n_rows)
        if self.mode == "d_optimal":
            return int(np.argmax(info))
        if self.mode == "d_opt_hybrid":
            top = np.argsort(-info, kind="stable")[: self.top_k]
            v = meta_values(self.value_draw, t, m_grid[top], self.a_grid, self.z,
                            self.inner_controlled, self.inner_legacy)
            return int(top[int(np.argmax(v))])
        raise ValueError(f"unknown meta rule {self.mode!r}")

    def act(self, ctx, grid, u):
        t = np.asarray(ctx["T"], dtype=float)
        best = np.array([self.choose(float(tt), grid) for tt in t])
        return _eps_mix(best, grid.size, u, self.epsilon)


@dataclass
class JointCommit:
    """Commit ``(m, a)`` jointly at the meta step and reuse ``a`` for every
    inner step of that meta step."""

    draw: BeliefDraw
    a_grid: np.ndarray
    chosen_a: int = 0

    @property
    def meta(self):
        return _JointMeta(self)

    @property
    def inner(self):
        return _JointInner(self)


@dataclass
class _JointMeta:
    owner: JointCommit
    controlled: bool = True

    def act(self, ctx, grid, u):
        t = float(np.asarray(ctx["T"]).ravel()[0])
        v = joint_commit_values(self.owner.draw, t, grid, self.owner.a_grid)
        flat = int(np.argmax(v))
        m_idx, self.owner.chosen_a = divmod(flat, v.shape[1])
        return np.array([m_idx]), np.ones(1)


@dataclass
class _JointInner:
    owner: JointCommit
    controlled: bool = True

    def act(self, ctx, grid, u):
        n = np.asarray(ctx["C"]).size
        return np.full(n, self.owner.chosen_a), np.ones(n)


@dataclass
class TableRule:
    """Fixed action per call (used by the tabular agent)."""

    index: int
    controlled: bool = True

    def act(self, ctx, grid, u):
        n = np.asarray(ctx["T"] if "C" not in ctx else ctx["C"]).size
        return np.full(n, self.index), np.ones(n)


# ---------------------------------------------------------------------------
# agents
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AgentConfig:
    """Hyperparameters of an agent.  ``kind`` selects the taxonomy entry."""

    kind: str = "nested_cts"
    backend: str = "rff"
    temperature: float = 1.0
    rff_dim: int = 128
    lengthscale: float = 1.0
    obs_scale: float = 1.0
    n_mc: int = 64
    meta_rule: str = "thompson"
    top_k: int = 3
    d_opt_mix: float = 1.0
    epsilon: float = 0.0

    def __post_init__(self):
        if self.kind not in AGENT_KINDS:
            raise UnknownAgent(f"unknown agent kind {self.kind!r}")
        if self.meta_rule not in META_RULES:
            raise ValueError(f"unknown meta rule {self.meta_rule!r}")

    @property
    def backend_config(self) -> BackendConfig:
        return BackendConfig(kind=self.backend, rff_dim=self.rff_dim,
                             lengthscale=self.lengthscale, temperature=self.temperature,
                             obs_scale=self.obs_scale)


COMMIT_SHAPE = {
    "flat_ts": "flat", "flat_cts": "flat", "joint_cts": "joint",
    "nested_cts": "nested", "aegis_cts": "nested", "aegis_handover": "nested",
    "icts_type1": "nested", "icts_type2": "nested", "flat_joint": "tabular",
}


class CausalAgent:
    """Posterior-sampling agent over a factorised or joint reward model.

    Parameters
    ----------
    spec : ScmSpec
        Environment the agent acts in; supplies grids, parent sets and scales.
    config : AgentConfig
    seed : int
        Seeds the random feature maps.
    """

    def __init__(self, spec: ScmSpec, config: AgentConfig, seed: int = 0):
        if config.kind == "flat_joint":
            raise UnknownAgent("flat_joint is served by TabularJointAgent")
        self.spec = spec
        self.config = config
        if config.kind == "icts_type2" and config.meta_rule == "thompson":
            self.config = config = replace(config, meta_rule="d_opt_hybrid")
        self.commit = COMMIT_SHAPE[config.kind]
        parents = ({"R": ("T", "M", "C", "A")} if config.kind == "flat_ts"
                   else spec.parent_map())
        self.belief = hyper_prior(parents, spec.scale_map(), config.backend_config, seed)
        self.scope = frozenset({1}) if self.commit == "flat" else frozenset({1, 2})

    # -- hooks used by the runners and AEGIS --------------------------------
    def sample_draw(self, rng: np.random.Generator) -> BeliefDraw:
        return self.belief.sample(rng)

    def mean_draw(self) -> BeliefDraw:
        return self.belief.mean_draw()

    def update(self, record: EpisodeRecord) -> None:
        self.belief.update(record.rows())

    def context_z(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(self.config.n_mc)

    def policy_stack(self, draw: BeliefDraw, legacy, rng: np.random.Generator,
                     meta_controlled: bool | None = None,
                     inner_rule=None, epsilon: tuple[float, float] = (0.0, 0.0)):
        """Per-level rules for one episode under the draw ``theta``.

        ``meta_controlled=None`` follows the agent's own commit shape.
        ``inner_rule`` replaces the Thompson inner rule (AEGIS LCB).
        """
        meta_leg, inner_leg = legacy
        spec = self.spec
        if self.commit == "joint":
            jc = JointCommit(draw, spec.action_values)
            return jc.meta, jc.inner
        inner = inner_rule if inner_rule is not None else InnerArgmax(draw, epsilon[1])
        if meta_controlled is None:
            meta_controlled = self.commit == "nested"
        if not meta_controlled:
            return meta_leg, inner
        mode = self.config.meta_rule
        z = self.context_z(rng)
        if mode in ("d_optimal", "d_opt_hybrid") and self.config.d_opt_mix < 1.0:
            if rng.random() >= self.config.d_opt_mix:
                mode = "thompson"
        value_draw = self.mean_draw() if mode == "greedy" else draw
        meta = MetaRule(mode, value_draw, spec.action_values, z, belief=self.belief,
                        n_rows=spec.inner_steps, top_k=self.config.top_k,
                        inner_controlled=getattr(inner, "controlled", True),
                        inner_legacy=inner_leg, epsilon=epsilon[0])
        return meta, inner

    def run_episode(self, legacy, k: int, seed: int) -> EpisodeRecord:
        rng = episode_rng(seed, AGENT_STREAM, k)
        draw = self.sample_draw(rng)
        stack = self.policy_stack(draw, legacy, rng)
        rec = sample_episode(self.spec, stack, episode_rng(seed, ENV_STREAM, k), k)
        self.update(rec)
        return rec


class TabularJointAgent:
    """Thompson sampling over every ``(M, A)`` cell with a per-cell NIG
    prior on a constant-only design.  The chosen cell is held for the whole
    episode."""

    def __init__(self, spec: ScmSpec, mu0=0.0, lam0=0.1, a0=2.0, b0=1.0):
        self.spec = spec
        self.n_meta, self.n_a = len(spec.meta_grid), len(spec.action_grid)
        n = self.n_meta * self.n_a
        self.mean = np.full(n, float(mu0))
        self.prec = np.full(n, float(lam0))
        self.a = np.full(n, float(a0))
        self.b = np.full(n, float(b0))
        self.scope = frozenset({1, 2})

    @property
    def n_cells(self) -> int:
        return self.mean.size

    def choose(self, rng: np.random.Generator) -> int:
        sigma2 = self.b / rng.gamma(self.a, 1.0)
        theta = self.mean + np.sqrt(sigma2 / self.prec) * rng.standard_normal(self.mean.size)
        return int(np.argmax(theta))

    def update(self, record: EpisodeRecord) -> None:
        for j in range(record.m_idx.size):
            cells = record.m_idx[j] * self.n_a + record.a_idx[j]
            for cell in np.unique(cells):
                y = record.r[j][cells == cell]
                lam_n = self.prec[cell] + y.size
                mu_n = (self.prec[cell] * self.mean[cell] + y.sum()) / lam_n
                self.a[cell] += 0.5 * y.size
                self.b[cell] += 0.5 * (y @ y + self.prec[cell] * self.mean[cell] ** 2
                                       - lam_n * mu_n ** 2)
                self.mean[cell], self.prec[cell] = mu_n, lam_n

    def run_episode(self, legacy, k: int, seed: int) -> EpisodeRecord:
        rng = episode_rng(seed, AGENT_STREAM, k)
        m_idx, a_idx = divmod(self.choose(rng), self.n_a)
        rec = sample_episode(self.spec, (TableRule(m_idx), TableRule(a_idx)),
                             episode_rng(seed, ENV_STREAM, k), k)
        self.update(rec)
        return rec


def build_agent(kind: str, spec: ScmSpec, seed: int = 0, **overrides):
    """Agent for a taxonomy entry.  ``overrides`` update :class:`AgentConfig`."""
    if kind == "flat_joint":
        return TabularJointAgent(spec)
    if kind not in AGENT_KINDS:
        raise UnknownAgent(f"unknown agent kind {kind!r}")
    return CausalAgent(spec, AgentConfig(kind=kind, **overrides), seed)


@dataclass
class RunResult:
    """Per-episode returns of one agent run and optionally the records."""

    returns: np.ndarray
    records: list[EpisodeRecord] | None = None
    agent: object | None = None

    @property
    def mean_return(self) -> float:
        return float(self.returns.mean())


def run_agent(agent, legacy, K: int, seed: int, keep_records: bool = False,
              start: int = 0) -> RunResult:
    """Run ``K`` episodes, updating the agent after each."""
    rets = np.zeros(K)
    recs = [] if keep_records else None
    for i in range(K):
        rec = agent.run_episode(legacy, start + i, seed)
        rets[i] = rec.total_reward
        if keep_records:
            recs.append(rec)
    return RunResult(rets, recs, agent)


def run_frozen(agent, legacy, K: int, seed: int, start: int = 0) -> RunResult:
    """Act for ``K`` episodes without posterior updates."""
    rets = np.zeros(K)
    for i in range(K):
        k = start + i
        rng = episode_rng(seed, AGENT_STREAM, k)
        draw = agent.sample_draw(rng)
        stack = agent.policy_stack(draw, legacy, rng)
        rets[i] = sample_episode(agent.spec, stack, episode_rng(seed, ENV_STREAM, k), k).total_reward
    return RunResult(rets)


# ---------------------------------------------------------------------------
# scope-aware target probabilities on logged data
# ---------------------------------------------------------------------------

def _t_key(legacy: LegacyPolicy, t: np.ndarray) -> np.ndarray:
    """Coarsest function of ``T`` that determines the legacy rule."""
    if legacy is None or legacy.kind == "uniform":
        return np.zeros_like(t)
    if legacy.kind == "sign":
        return np.sign(t)
    if legacy.kind == "linear_gaussian" and legacy.slope == 0:
        return np.zeros_like(t)
    return np.asarray(t, dtype=float)


def scoped_target_probs(draw: BeliefDraw, rows: Mapping[str, np.ndarray],
                        meta_t: np.ndarray, scope, spec: ScmSpec, inner_legacy,
                        z: np.ndarray, meta_rows: np.ndarray):
    """Probability that the scope-aware policy under ``draw`` takes the logged
    action, per sample and per level.

    Parameters
    ----------
    rows : mapping
        Flattened per-sample columns (``T, M, C, a_idx, m_idx``).
    meta_t : ndarray
        Meta context of every meta step in the data, one entry per step.
    meta_rows : ndarray of int
        For every sample, the index of its meta step in ``meta_t``.

    Returns
    -------
    (pi_meta, pi_inner) : ndarrays of shape (n_samples,)
        Levels outside the scope are reported as ``nan``.
    """
    scope = normalise_scope(scope)
    n = np.asarray(rows["R"]).size
    pi_inner = np.full(n, np.nan)
    pi_meta = np.full(n, np.nan)
    a_grid, m_grid = spec.action_values, spec.meta_values
    if 1 in scope:
        best, _ = inner_best_action(draw, rows, a_grid)
        pi_inner = (best == np.asarray(rows["a_idx"])).astype(float)
    if 2 in scope:
        # the meta choice depends on T only through mechanisms reading T or,
        # with the inner level uncontrolled, through the inner legacy rule
        uses_t = any("T" in part.parents for part in draw.parts.values())
        if uses_t:
            keys = np.asarray(meta_t, dtype=float)
        elif 1 in scope:
            keys = np.zeros_like(meta_t)
        else:
            keys = _t_key(inner_legacy, meta_t)
        uniq, inv = np.unique(keys, return_inverse=True)
        choice = np.empty(uniq.size, dtype=int)
        for i in range(uniq.size):
            t_rep = meta_t[np.flatnonzero(inv == i)[0]]
            choice[i] = meta_best_action(draw, t_rep, m_grid, a_grid, z,
                                         1 in scope, inner_legacy)
        chosen_per_step = choice[inv]
        pi_meta = (chosen_per_step[meta_rows] == np.asarray(rows["m_idx"])).astype(float)
    return pi_meta, pi_inner
