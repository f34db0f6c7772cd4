"""Hierarchical SCM environments, legacy logging policies and exogenous shifts.

Every environment in this package is a two-level nested contextual causal
bandit.  An episode runs ``J`` meta steps.  Each meta step observes a meta
context ``T``, takes a meta action ``M``, then runs ``I`` inner steps that
each observe an inner context ``C`` (drawn from a mechanism of ``M``), take an
inner action ``A`` and receive an outcome ``Y`` and reward ``R``.

All exogenous noise of an episode is drawn up front in a fixed order so that
two agents run on the same seed face identical noise (common random numbers).
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

VARIABLES = ("T", "M", "C", "A", "Y", "R")
FAMILIES = ("unified", "linear_anm", "additive_y")
SHIFTS = ("shift_t", "shift_sigma_q", "shift_u")


class ConfigError(ValueError):
    """Raised for an invalid environment or bench configuration."""


class ContractViolation(RuntimeError):
    """Raised when a caller breaks an interface contract at runtime."""


@dataclass(frozen=True)
class ScmSpec:
    """Immutable description of a two-level hierarchical SCM.

    Parameters
    ----------
    family : {"unified", "linear_anm", "additive_y"}
        Structural-equation set.
    meta_steps, inner_steps : int
        Loop counts ``J`` (meta) and ``I`` (inner) per episode.
    gamma, eta, nu, sigma_q, q : float
        The five axes of the unified family.
    lambda_u : float
        Bernoulli rate of the shared confounder ``U``.
    loadings : tuple of float
        Confounder loadings on ``(C, Y, R)``.
    noise : tuple of float
        Base noise standard deviations of ``(C, Y, R)``.  For the unified
        family the ``C`` entry is ignored in favour of ``sigma_q``.
    t_mean, t_std : float
        Continuous meta-context distribution (unified families).
    t_support : tuple of float or None
        Uniform discrete meta-context support (linear ANM).
    meta_grid, action_grid : tuple of float
        Finite action grids for ``M`` and ``A``.
    reward_range : tuple of float
        Fixed ``(R_lo, R_hi)`` used to rescale rewards to ``[0, 1]``.
    parents : tuple of (str, tuple of str)
        Parent sets of the learnable mechanisms used by factorised agents.
    scales : tuple of (str, float)
        Nominal scale of each variable, used to standardise model inputs.
    y_coefs : tuple of float
        ``(coef_A, coef_Q)`` of the additive-Y outcome equation.
    """

    family: str
    meta_steps: int = 1
    inner_steps: int = 20
    gamma: float = 1.0
    eta: float = 1.0
    nu: float = 0.0
    sigma_q: float = 3.0
    q: float = 0.0
    lambda_u: float = 0.5
    loadings: tuple[float, float, float] = (0.3, 0.3, 0.0)
    noise: tuple[float, float, float] = (3.0, 0.08, 0.5)
    t_mean: float = 0.0
    t_std: float = 0.3
    t_support: tuple[float, ...] | None = None
    meta_grid: tuple[float, ...] = ()
    action_grid: tuple[float, ...] = ()
    reward_range: tuple[float, float] = (0.0, 1.0)
    parents: tuple[tuple[str, tuple[str, ...]], ...] = ()
    scales: tuple[tuple[str, float], ...] = ()
    y_coefs: tuple[float, float] = (2.0, 0.5)
    levels: int = 2

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.levels != 2:
            raise ConfigError("only two-level hierarchies are executable")
        if self.meta_steps < 1 or self.inner_steps < 1:
            raise ConfigError("loop counts must be >= 1")
        scalars = (self.gamma, self.eta, self.nu, self.sigma_q, self.q,
                   self.lambda_u, self.t_mean, self.t_std, *self.loadings,
                   *self.noise, *self.y_coefs)
        if not all(math.isfinite(v) for v in scalars):
            raise ConfigError("non-finite axis or noise value")
        if not 0.0 <= self.lambda_u <= 1.0:
            raise ConfigError("lambda_u must lie in [0, 1]")
        if min(self.noise) < 0 or self.sigma_q < 0 or self.t_std < 0:
            raise ConfigError("noise scales must be non-negative")
        if len(self.meta_grid) == 0 or len(self.action_grid) == 0:
            raise ConfigError("action grids must be non-empty")
        lo, hi = self.reward_range
        if not hi > lo:
            raise ConfigError("reward_range must satisfy R_hi > R_lo")

    @property
    def samples_per_episode(self) -> int:
        return self.meta_steps * self.inner_steps

    @property
    def meta_values(self) -> np.ndarray:
        return np.asarray(self.meta_grid, dtype=float)

    @property
    def action_values(self) -> np.ndarray:
        return np.asarray(self.action_grid, dtype=float)

    def parent_map(self) -> dict[str, tuple[str, ...]]:
        return dict(self.parents)

    def scale_map(self) -> dict[str, float]:
        return dict(self.scales)

    def rescale(self, r: np.ndarray, anchor: str = "range") -> np.ndarray:
        """Affine map of raw rewards onto the unit scale.

        Rewards are first clipped into ``reward_range``.

        ``anchor="range"`` maps ``[R_lo, R_hi]`` onto ``[0, 1]``.
        ``anchor="zero"`` divides by the range width without shifting, so a
        raw reward of zero stays at zero.
        """
        lo, hi = self.reward_range
        r = np.clip(np.asarray(r, dtype=float), lo, hi)
        if anchor == "range":
            return (r - lo) / (hi - lo)
        if anchor == "zero":
            return r / (hi - lo)
        raise ConfigError(f"unknown reward anchor {anchor!r}")


def _grid(lo: float, hi: float, n: int) -> tuple[float, ...]:
    if n < 1:
        raise ConfigError("grid size must be >= 1")
    return tuple(float(v) for v in np.linspace(lo, hi, n))


RANGE_SIGMAS = 3.0


def _unified_reward_range(gamma, eta, sigma_q, nu, q, y_coefs=None,
                          z: float = RANGE_SIGMAS) -> tuple[float, float]:
    # envelope of the noise-free reward plus z standard deviations of the
    # combined noise reaching R; rewards outside are clipped when certified
    c_mean = abs(gamma) * ((1 - eta) * 3.0 + eta * 2.0 * math.tanh(4.0)) + 0.3
    sd_c = (1.0 + nu * 0.8 * abs(gamma)) * sigma_q
    sd_tail = math.hypot(0.08, 0.5)
    if y_coefs is not None:
        a_coef, c_coef = y_coefs
        mean_hi = 2.0 * abs(a_coef) + abs(c_coef) * c_mean + 0.3
        half = mean_hi + z * math.hypot(abs(c_coef) * sd_c, sd_tail)
        return (-half, half)
    c_abs = c_mean + z * sd_c
    bilinear = 2.0 * c_abs
    lo = -(1 - q) * bilinear + q * (4.0 - (2.0 + 0.5 * c_abs) ** 2)
    hi = (1 - q) * bilinear + q * 4.0
    head = 0.3 + z * sd_tail
    return (lo - head, hi + head)


def build_unified(
    gamma: float = 1.0,
    eta: float = 1.0,
    nu: float = 0.0,
    sigma_q: float = 3.0,
    q: float = 0.0,
    *,
    meta_steps: int = 1,
    inner_steps: int = 20,
    n_meta: int = 7,
    n_a: int = 21,
) -> ScmSpec:
    """Unified five-axis SCM.  Defaults give the stress preset."""
    for v in (gamma, eta, nu, sigma_q, q):
        if not math.isfinite(v):
            raise ConfigError("non-finite axis value")
    if sigma_q <= 0:
        raise ConfigError("sigma_q must be positive")
    c_scale = max(sigma_q, 1.0)
    return ScmSpec(
        family="unified",
        meta_steps=meta_steps,
        inner_steps=inner_steps,
        gamma=gamma, eta=eta, nu=nu, sigma_q=sigma_q, q=q,
        lambda_u=0.5,
        loadings=(0.3, 0.3, 0.0),
        noise=(sigma_q, 0.08, 0.5),
        t_mean=0.0, t_std=0.3,
        meta_grid=_grid(-2.0, 2.0, n_meta),
        action_grid=_grid(-2.0, 2.0, n_a),
        reward_range=_unified_reward_range(gamma, eta, sigma_q, nu, q),
        parents=(("C", ("M",)), ("Y", ("A", "C")), ("R", ("Y",))),
        scales=(("T", 0.3), ("M", 2.0), ("A", 2.0), ("C", c_scale),
                ("Y", 2.0 * c_scale), ("R", 2.0 * c_scale)),
    )


def build_stress_preset(**kwargs) -> ScmSpec:
    """Stress configuration: gamma=1, eta=1, nu=0, sigma_Q=3, q=0, J=1, I=20."""
    return build_unified(1.0, 1.0, 0.0, 3.0, 0.0, **kwargs)


def build_additive_y(*, sigma_q: float = 3.0, a_coef: float = 2.0,
                     n_meta: int = 7, n_a: int = 21) -> ScmSpec:
    """Unified SCM whose outcome is ``a_coef*A + 0.5*Q + 0.3U + N_Y``.

    ``a_coef=0`` gives a null environment in which every inner policy has the
    same value.
    """
    y_coefs = (float(a_coef), 0.5)
    return ScmSpec(
        family="additive_y",
        meta_steps=1, inner_steps=20,
        gamma=1.0, eta=1.0, nu=0.0, sigma_q=sigma_q, q=0.0,
        lambda_u=0.5,
        loadings=(0.3, 0.3, 0.0),
        noise=(sigma_q, 0.08, 0.5),
        meta_grid=_grid(-2.0, 2.0, n_meta),
        action_grid=_grid(-2.0, 2.0, n_a),
        reward_range=_unified_reward_range(1.0, 1.0, sigma_q, 0.0, 0.0, y_coefs),
        parents=(("C", ("M",)), ("Y", ("A", "C")), ("R", ("Y",))),
        scales=(("T", 0.3), ("M", 2.0), ("A", 2.0), ("C", sigma_q),
                ("Y", 2.0 * sigma_q), ("R", 2.0 * sigma_q)),
        y_coefs=y_coefs,
    )


LINEAR_ANM_COEFS = {
    "C": {"M": 0.8},
    "Y": {"A": 0.5, "C": 0.4},
    "R": {"Y": 0.3, "C": 0.08, "M": 0.1, "T": 0.05, "A": 0.02},
}


def build_linear_anm(*, inner_steps: int = 20) -> ScmSpec:
    """Linear additive-noise SCM with a clipped reward in ``[0, 1]``."""
    return ScmSpec(
        family="linear_anm",
        meta_steps=1, inner_steps=inner_steps,
        lambda_u=0.3,
        loadings=(0.2, 0.15, 0.1),
        noise=(0.3, 0.2, 0.15),
        t_support=(1.0, 2.0, 3.0),
        meta_grid=tuple(float(v) for v in range(1, 6)),
        action_grid=tuple(float(v) for v in range(1, 11)),
        reward_range=(0.0, 1.0),
        parents=(("C", ("M", "T")), ("Y", ("A", "C")),
                 ("R", ("Y", "C", "M", "T", "A"))),
        scales=(("T", 1.0), ("M", 2.0), ("A", 3.0), ("C", 2.0),
                ("Y", 2.0), ("R", 1.0)),
    )


@dataclass(frozen=True)
class ShiftSpec:
    """Exogenous distribution shift.  ``value`` overrides the default target."""

    kind: str
    value: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in SHIFTS:
            raise ConfigError(f"unknown shift {self.kind!r}")


_SHIFT_DEFAULTS = {"shift_t": 2.0, "shift_sigma_q": 6.0, "shift_u": 0.9}


def apply_shift(spec: ScmSpec, shift: ShiftSpec) -> ScmSpec:
    """Return a copy of ``spec`` with one exogenous parameter changed.

    Model-side constants (reward range, input scales) are left untouched so
    that an agent trained on the source sees the target through the same
    lens.
    """
    value = _SHIFT_DEFAULTS[shift.kind] if shift.value is None else float(shift.value)
    if shift.kind == "shift_t":
        if spec.t_support is not None:
            raise ConfigError("shift_t requires a continuous meta context")
        return dataclasses.replace(spec, t_mean=value)
    if shift.kind == "shift_sigma_q":
        if spec.family == "linear_anm":
            raise ConfigError("shift_sigma_q is defined for the unified families")
        return dataclasses.replace(
            spec, sigma_q=value, noise=(value, spec.noise[1], spec.noise[2]))
    if not 0.0 <= value <= 1.0:
        raise ConfigError("lambda_u must lie in [0, 1]")
    return dataclasses.replace(spec, lambda_u=value)


def structural_coefficients(spec: ScmSpec) -> dict:
    """Mechanism coefficients only; used to check shift invariance."""
    if spec.family == "linear_anm":
        return {k: dict(v) for k, v in LINEAR_ANM_COEFS.items()}
    return {"gamma": spec.gamma, "eta": spec.eta, "nu": spec.nu, "q": spec.q,
            "y_coefs": spec.y_coefs, "loadings": spec.loadings}


# ---------------------------------------------------------------------------
# structural equations
# ---------------------------------------------------------------------------

def context_mean(spec: ScmSpec, m: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Noise-free inner-context mechanism ``f_C(M, T)`` with ``U = 0``."""
    m = np.asarray(m, dtype=float)
    if spec.family == "linear_anm":
        return 0.8 * m + 0.0 * np.asarray(t, dtype=float)
    g, e = spec.gamma, spec.eta
    return g * ((1 - e) * 1.5 * m + e * 2.0 * np.tanh(2.0 * m))


def context_noise_scale(spec: ScmSpec, m: np.ndarray) -> np.ndarray:
    if spec.family == "linear_anm":
        return np.full(np.shape(m), spec.noise[0])
    het = (1 - spec.nu) + spec.nu * (1 + 0.4 * spec.gamma * np.abs(m))
    return het * spec.sigma_q


def outcome_mean(spec: ScmSpec, a: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Noise-free outcome mechanism ``f_Y(A, C)`` with ``U = 0``."""
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    if spec.family == "linear_anm":
        return 0.5 * a + 0.4 * c
    if spec.family == "additive_y":
        return spec.y_coefs[0] * a + spec.y_coefs[1] * c
    return (1 - spec.q) * a * c + spec.q * (-(a - 0.5 * c) ** 2 + 4.0)


def reward_pre_noise(spec, y, c, m, t, a) -> np.ndarray:
    if spec.family == "linear_anm":
        return 0.3 * y + 0.08 * c + 0.1 * m + 0.05 * t + 0.02 * a
    return np.asarray(y, dtype=float)


def forward(spec: ScmSpec, t, m, a, u=0.0, n_c=0.0, n_y=0.0, n_r=0.0):
    """Deterministic forward pass given every exogenous value.

    Returns
    -------
    tuple of ndarray
        ``(C, Y, R)`` broadcast over the inputs.
    """
    t, m, a, u = (np.asarray(v, dtype=float) for v in (t, m, a, u))
    c = context_mean(spec, m, t) + spec.loadings[0] * u + context_noise_scale(spec, m) * n_c
    y, r = outcome_and_reward(spec, t, m, a, c, u, n_y, n_r)
    return c, y, r


def outcome_and_reward(spec: ScmSpec, t, m, a, c, u, n_y, n_r):
    """Outcome and reward given a realised inner context ``c``."""
    y = outcome_mean(spec, a, c) + spec.loadings[1] * u + spec.noise[1] * n_y
    r = reward_pre_noise(spec, y, c, m, t, a) + spec.loadings[2] * u + spec.noise[2] * n_r
    if spec.family == "linear_anm":
        r = np.clip(r, 0.0, 1.0)
    return y, r


# ---------------------------------------------------------------------------
# legacy policies
# ---------------------------------------------------------------------------

def _sample_index(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf < (u[:, None] * cdf[:, -1:])).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


class LevelRule(Protocol):
    """Per-level action rule used by :func:`sample_episode`."""

    controlled: bool

    def act(self, ctx: Mapping[str, np.ndarray], grid: np.ndarray,
            u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return grid indices and behaviour densities, one per context row."""


@dataclass(frozen=True)
class LegacyPolicy:
    """Legacy logging rule at one level.

    Parameters
    ----------
    kind : {"uniform", "linear_gaussian", "sign", "epsilon_mix"}
        ``linear_gaussian`` is a Gaussian ``N(slope*T + intercept, sd)``
        discretised onto the grid by normalised density at the grid points.
        ``sign`` deterministically plays the grid point nearest
        ``scale*sign(T)``.
    """

    kind: str
    slope: float = 0.0
    intercept: float = 0.0
    sd: float = 1.0
    scale: float = 2.0
    epsilon: float = 0.0
    base: "LegacyPolicy | None" = None
    controlled: bool = field(default=False, init=False)

    def __post_init__(self) -> None:
        if self.kind not in ("uniform", "linear_gaussian", "sign", "epsilon_mix"):
            raise ConfigError(f"unknown legacy rule {self.kind!r}")
        if self.kind == "epsilon_mix" and (self.base is None or not 0 <= self.epsilon <= 1):
            raise ConfigError("epsilon_mix needs a base rule and epsilon in [0, 1]")

    @property
    def deterministic(self) -> bool:
        return self.kind == "sign" or (
            self.kind == "epsilon_mix" and self.epsilon == 0 and self.base.deterministic)

    def probs(self, ctx: Mapping[str, np.ndarray], grid: np.ndarray) -> np.ndarray:
        """Probability of every grid action for every context row."""
        t = np.atleast_1d(np.asarray(ctx["T"], dtype=float))
        n = t.shape[0]
        g = np.asarray(grid, dtype=float)
        if self.kind == "uniform":
            return np.full((n, g.size), 1.0 / g.size)
        if self.kind == "linear_gaussian":
            centre = self.slope * t + self.intercept
            logits = -0.5 * ((g[None, :] - centre[:, None]) / self.sd) ** 2
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            return p / p.sum(axis=1, keepdims=True)
        if self.kind == "sign":
            target = self.scale * np.sign(t)
            idx = np.abs(g[None, :] - target[:, None]).argmin(axis=1)
            p = np.zeros((n, g.size))
            p[np.arange(n), idx] = 1.0
            return p
        base = self.base.probs(ctx, g)
        return (1 - self.epsilon) * base + self.epsilon / g.size

    def act(self, ctx, grid, u):
        p = self.probs(ctx, grid)
        if p.shape[0] != u.shape[0]:
            p = np.broadcast_to(p, (u.shape[0], p.shape[1]))
        idx = _sample_index(p, u)
        return idx, p[np.arange(idx.size), idx]


def default_legacy(spec: ScmSpec) -> tuple[LegacyPolicy, LegacyPolicy]:
    """(meta, inner) legacy rules for a family."""
    if spec.family == "linear_anm":
        return (LegacyPolicy("linear_gaussian", slope=0.6, intercept=1.0, sd=0.5),
                LegacyPolicy("uniform"))
    meta = LegacyPolicy("linear_gaussian", slope=0.8, sd=0.2)
    if spec.family == "additive_y":
        return meta, LegacyPolicy("sign", scale=2.0)
    return meta, LegacyPolicy("linear_gaussian", slope=0.0, sd=0.1)


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

@dataclass
class EpisodeRecord:
    """One episode.  Per-sample arrays have shape ``(J, I)``.

    Meta quantities have shape ``(J,)``.  Densities are the behaviour
    densities of the actions actually taken.
    """

    k: int
    t: np.ndarray
    m: np.ndarray
    m_idx: np.ndarray
    m_density: np.ndarray
    meta_controlled: np.ndarray
    c: np.ndarray
    a: np.ndarray
    a_idx: np.ndarray
    a_density: np.ndarray
    inner_controlled: np.ndarray
    y: np.ndarray
    r: np.ndarray

    @property
    def n_samples(self) -> int:
        return int(self.r.size)

    @property
    def total_reward(self) -> float:
        return float(self.r.sum())

    @property
    def mean_reward(self) -> float:
        return float(self.r.mean())

    def rows(self) -> dict[str, np.ndarray]:
        """Flattened per-sample columns with meta values broadcast."""
        J, I = self.r.shape
        rep = lambda v: np.repeat(np.asarray(v), I)
        return {
            "T": rep(self.t), "M": rep(self.m), "m_idx": rep(self.m_idx),
            "m_density": rep(self.m_density),
            "meta_controlled": rep(self.meta_controlled),
            "C": self.c.ravel(), "A": self.a.ravel(), "a_idx": self.a_idx.ravel(),
            "a_density": self.a_density.ravel(),
            "inner_controlled": self.inner_controlled.ravel(),
            "Y": self.y.ravel(), "R": self.r.ravel(),
        }


CSV_COLUMNS = ("k", "j", "i", "T", "M", "C", "A", "Y", "R", "m_density",
               "a_density", "meta_controlled", "inner_controlled")


def write_episodes_csv(records: Sequence[EpisodeRecord], path) -> None:
    """One row per ``(k, j, i)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for rec in records:
            J, I = rec.r.shape
            for j in range(J):
                for i in range(I):
                    w.writerow([rec.k, j, i, repr(float(rec.t[j])), repr(float(rec.m[j])),
                                repr(float(rec.c[j, i])), repr(float(rec.a[j, i])),
                                repr(float(rec.y[j, i])), repr(float(rec.r[j, i])),
                                repr(float(rec.m_density[j])),
                                repr(float(rec.a_density[j, i])),
                                int(rec.meta_controlled[j]),
                                int(rec.inner_controlled[j, i])])


@dataclass
class Exogenous:
    """Exogenous draws of one episode (common random numbers)."""

    t: np.ndarray
    u_meta: np.ndarray
    u: np.ndarray
    n_c: np.ndarray
    u_inner: np.ndarray
    n_y: np.ndarray
    n_r: np.ndarray


def draw_exogenous(spec: ScmSpec, rng: np.random.Generator) -> Exogenous:
    J, I = spec.meta_steps, spec.inner_steps
    if spec.t_support is None:
        t = spec.t_mean + spec.t_std * rng.standard_normal(J)
    else:
        t = np.asarray(spec.t_support)[rng.integers(len(spec.t_support), size=J)]
    u_meta = rng.random(J)
    u = (rng.random((J, I)) < spec.lambda_u).astype(float)
    n_c = rng.standard_normal((J, I))
    u_inner = rng.random((J, I))
    n_y = rng.standard_normal((J, I))
    n_r = rng.standard_normal((J, I))
    return Exogenous(t, u_meta, u, n_c, u_inner, n_y, n_r)


def episode_rng(seed: int, stream: int, k: int) -> np.random.Generator:
    """Counter-based generator for episode ``k`` of a named stream."""
    return np.random.default_rng([int(seed), int(stream), int(k)])


ENV_STREAM, AGENT_STREAM, CERT_STREAM, SPLIT_STREAM = 11, 23, 37, 41


def _check_rule_output(idx, dens, n, size, level):
    idx = np.asarray(idx)
    if idx.shape != (n,) or np.any(idx < 0) or np.any(idx >= size):
        raise ContractViolation(f"{level} rule returned an off-grid action")
    dens = np.asarray(dens, dtype=float)
    if np.any(~(dens > 0)):
        raise ContractViolation(f"{level} rule reported a non-positive density")
    return idx.astype(int), dens


def sample_episode(spec: ScmSpec, stack: Sequence, rng: np.random.Generator,
                   k: int = 0) -> EpisodeRecord:
    """Run one episode outer-to-inner.

    Parameters
    ----------
    stack : (meta_rule, inner_rule)
        Objects with an ``act(ctx, grid, u)`` method and a ``controlled``
        attribute.  ``ctx`` holds arrays for the already realised variables.
    rng : Generator
        Source of every exogenous draw of this episode.
    """
    meta_rule, inner_rule = stack
    ex = draw_exogenous(spec, rng)
    J, I = spec.meta_steps, spec.inner_steps
    mg, ag = spec.meta_values, spec.action_values
    m_idx = np.zeros(J, dtype=int)
    m_den = np.zeros(J)
    c = np.zeros((J, I)); a_idx = np.zeros((J, I), dtype=int)
    a_den = np.zeros((J, I)); y = np.zeros((J, I)); r = np.zeros((J, I))
    for j in range(J):
        idx, den = meta_rule.act({"T": ex.t[j:j + 1]}, mg, ex.u_meta[j:j + 1])
        idx, den = _check_rule_output(idx, den, 1, mg.size, "meta")
        m_idx[j], m_den[j] = idx[0], den[0]
        m = mg[m_idx[j]]
        c[j] = (context_mean(spec, m, ex.t[j]) + spec.loadings[0] * ex.u[j]
                + context_noise_scale(spec, m) * ex.n_c[j])
        ctx = {"T": np.full(I, ex.t[j]), "M": np.full(I, m), "C": c[j]}
        idx, den = inner_rule.act(ctx, ag, ex.u_inner[j])
        a_idx[j], a_den[j] = _check_rule_output(idx, den, I, ag.size, "inner")
        a = ag[a_idx[j]]
        y[j], r[j] = outcome_and_reward(spec, ex.t[j], m, a, c[j], ex.u[j],
                                        ex.n_y[j], ex.n_r[j])
    return EpisodeRecord(
        k=k, t=ex.t, m=mg[m_idx], m_idx=m_idx, m_density=m_den,
        meta_controlled=np.full(J, bool(meta_rule.controlled)),
        c=c, a=ag[a_idx], a_idx=a_idx, a_density=a_den,
        inner_controlled=np.full((J, I), bool(inner_rule.controlled)),
        y=y, r=r,
    )


def simulate_constant_policy(spec: ScmSpec, m_value: float, a_value: float,
                             n_episodes: int, rng: np.random.Generator) -> np.ndarray:
    """Per-sample rewards of the policy that always plays ``(m_value, a_value)``.

    Vectorised over episodes; returns an array of shape ``(n_episodes, J*I)``.
    """
    J, I = spec.meta_steps, spec.inner_steps
    shape = (n_episodes, J, I)
    if spec.t_support is None:
        t = spec.t_mean + spec.t_std * rng.standard_normal((n_episodes, J, 1))
    else:
        t = np.asarray(spec.t_support)[rng.integers(len(spec.t_support), size=(n_episodes, J, 1))]
    u = (rng.random(shape) < spec.lambda_u).astype(float)
    _, _, r = forward(spec, t, np.full(shape, m_value), np.full(shape, a_value), u,
                      rng.standard_normal(shape), rng.standard_normal(shape),
                      rng.standard_normal(shape))
    return r.reshape(n_episodes, J * I)


def spec_from_config(cfg: Mapping) -> ScmSpec:
    """Build a spec from a mapping with keys ``family``, ``axes``, ``schedule``,
    ``grid`` and ``shift``."""
    cfg = dict(cfg or {})
    family = cfg.get("family", "unified")
    axes = dict(cfg.get("axes", {}) or {})
    sched = dict(cfg.get("schedule", {}) or {})
    grid = dict(cfg.get("grid", {}) or {})
    unknown = set(cfg) - {"family", "axes", "schedule", "grid", "shift", "legacy"}
    if unknown:
        raise ConfigError(f"unknown env keys {sorted(unknown)}")
    if family == "unified":
        spec = build_unified(**axes, meta_steps=int(sched.get("J", 1)),
                             inner_steps=int(sched.get("I", 20)),
                             n_meta=int(grid.get("n_meta", 7)), n_a=int(grid.get("n_a", 21)))
    elif family == "additive_y":
        spec = build_additive_y(**axes, n_meta=int(grid.get("n_meta", 7)),
                                n_a=int(grid.get("n_a", 21)))
    elif family == "linear_anm":
        spec = build_linear_anm(inner_steps=int(sched.get("I", 20)))
    else:
        raise ConfigError(f"unknown family {family!r}")
    shift = cfg.get("shift")
    if shift:
        if isinstance(shift, str):
            shift = {"kind": shift}
        spec = apply_shift(spec, ShiftSpec(**shift))
    return spec


def legacy_from_config(spec: ScmSpec, cfg: Mapping | None) -> tuple[LegacyPolicy, LegacyPolicy]:
    """Legacy pair from the ``legacy`` entry of an env mapping.

    The entry may hold ``meta`` and ``inner`` mappings of
    :class:`LegacyPolicy` fields; a missing level keeps the family default.
    """
    meta, inner = default_legacy(spec)
    entry = dict((cfg or {}).get("legacy", {}) or {})
    unknown = set(entry) - {"meta", "inner"}
    if unknown:
        raise ConfigError(f"unknown legacy keys {sorted(unknown)}")
    try:
        if entry.get("meta"):
            meta = LegacyPolicy(**entry["meta"])
        if entry.get("inner"):
            inner = LegacyPolicy(**entry["inner"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return meta, inner
