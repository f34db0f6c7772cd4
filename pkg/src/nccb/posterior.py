"""Mechanism-factorised posterior backends.

Two backends are provided.

* ``nig``: Normal-Inverse-Gamma conjugate linear regression on the raw parent
  values plus an intercept.
* ``rff``: Gibbs posterior over the weights of a random-Fourier-feature
  expansion of an RBF kernel, a tempered ridge regression in closed form.

A :class:`FactorisedBelief` holds one backend state per learnable mechanism
plus a frozen snapshot of the data-free reference prior ``p0``.
"""

from __future__ import annotations

import base64
import json
import zlib
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import digamma, gammaln

BLOB_VERSION = 1


class BackendMismatch(ValueError):
    """Raised when two posterior states cannot be compared."""


# ---------------------------------------------------------------------------
# Normal-Inverse-Gamma
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NigState:
    """``sigma^2 ~ IG(a, b)``, ``w | sigma^2 ~ N(mean, sigma^2 precision^-1)``."""

    mean: np.ndarray
    precision: np.ndarray
    a: float
    b: float

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def nig_prior(dim: int, mu0: float = 0.0, lam0: float = 0.1,
              a0: float = 2.0, b0: float = 1.0) -> NigState:
    """Hyper-prior with ``mu0*1``, ``lam0*I``, ``a0`` and ``b0``."""
    return NigState(np.full(dim, float(mu0)), lam0 * np.eye(dim), float(a0), float(b0))


def nig_update(state: NigState, design: np.ndarray, targets: np.ndarray,
               temperature: float = 1.0) -> NigState:
    """Conjugate update, optionally with a tempered likelihood.

    Parameters
    ----------
    design : ndarray of shape (n, p)
        Design rows; include an intercept column if one is wanted.
    targets : ndarray of shape (n,)
    temperature : float
        Power applied to the likelihood.  ``1`` is the Bayesian update.

    Returns
    -------
    NigState
    """
    X = np.asarray(design, dtype=float).reshape(-1, state.dim) if np.size(design) else \
        np.zeros((0, state.dim))
    y = np.asarray(targets, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise ValueError("design and targets disagree on row count")
    if np.asarray(design).ndim == 2 and np.asarray(design).shape[1] != state.dim:
        raise ValueError("design width does not match the state dimension")
    if y.size == 0:
        return state
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite targets")
    tau = float(temperature)
    lam0, mu0 = state.precision, state.mean
    lam_n = lam0 + tau * X.T @ X
    rhs = lam0 @ mu0 + tau * X.T @ y
    mu_n = np.linalg.solve(lam_n, rhs)
    a_n = state.a + 0.5 * tau * y.size
    b_n = state.b + 0.5 * (tau * y @ y + mu0 @ lam0 @ mu0 - mu_n @ lam_n @ mu_n)
    # guard against round-off driving b_n below its exact positive value
    b_n = max(b_n, 1e-12)
    return NigState(mu_n, 0.5 * (lam_n + lam_n.T), a_n, b_n)


def nig_kl(q: NigState, p: NigState) -> float:
    """Exact ``KL(q || p)`` between two NIG distributions."""
    if q.dim != p.dim:
        raise BackendMismatch("NIG states of different dimension")
    d = q.dim
    kl_ig = ((q.a - p.a) * digamma(q.a) - gammaln(q.a) + gammaln(p.a)
             + p.a * (np.log(q.b) - np.log(p.b)) + q.a * (p.b - q.b) / q.b)
    cov_q = np.linalg.inv(q.precision)
    _, logdet_q = np.linalg.slogdet(q.precision)
    _, logdet_p = np.linalg.slogdet(p.precision)
    diff = q.mean - p.mean
    kl_gauss = 0.5 * (np.trace(p.precision @ cov_q) - d + logdet_q - logdet_p
                      + (q.a / q.b) * diff @ p.precision @ diff)
    return float(max(kl_ig + kl_gauss, 0.0))


def nig_draw(state: NigState, rng: np.random.Generator, n: int | None = None):
    """Draw ``(weights, sigma2)``.  With ``n`` given, arrays of ``n`` draws."""
    m = 1 if n is None else n
    sigma2 = state.b / rng.gamma(state.a, 1.0, size=m)
    chol = np.linalg.cholesky(state.precision)
    z = rng.standard_normal((state.dim, m))
    w = state.mean[:, None] + np.linalg.solve(chol.T, z) * np.sqrt(sigma2)[None, :]
    if n is None:
        return w[:, 0], float(sigma2[0])
    return w, sigma2


# ---------------------------------------------------------------------------
# Gaussian weight posterior (RFF-Gibbs)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianState:
    """Gaussian weight posterior in information form plus a noise estimate."""

    precision: np.ndarray
    shift: np.ndarray
    resid_ss: float = 1.0
    resid_n: float = 1.0

    @property
    def dim(self) -> int:
        return self.shift.shape[0]

    @cached_property
    def mean(self) -> np.ndarray:
        return np.linalg.solve(self.precision, self.shift)

    @cached_property
    def cholesky(self) -> np.ndarray:
        return np.linalg.cholesky(self.precision)

    @property
    def noise_var(self) -> float:
        return self.resid_ss / self.resid_n


def gaussian_prior(dim: int, prior_var: float, noise_var: float = 1.0) -> GaussianState:
    return GaussianState(np.eye(dim) / prior_var, np.zeros(dim), float(noise_var), 1.0)


def gibbs_update(state: GaussianState, features: np.ndarray, targets: np.ndarray,
                 temperature: float = 1.0, obs_scale: float = 1.0) -> GaussianState:
    """Tempered ridge update ``prior * exp(-temperature * SSE / (2 obs_scale^2))``.

    The residual-variance estimate is updated prequentially from the
    residuals of the pre-update posterior mean.
    """
    if temperature <= 0:
        raise ValueError("Gibbs temperature must be positive")
    F = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float).ravel()
    if F.ndim != 2 or F.shape[1] != state.dim or F.shape[0] != y.size:
        raise ValueError("feature rows do not match the state dimension or targets")
    if y.size == 0:
        return state
    resid = y - F @ state.mean
    c = temperature / obs_scale ** 2
    prec = state.precision + c * F.T @ F
    return GaussianState(0.5 * (prec + prec.T), state.shift + c * F.T @ y,
                         state.resid_ss + float(resid @ resid), state.resid_n + y.size)


def gaussian_kl(q: GaussianState, p: GaussianState) -> float:
    """``KL(q || p)`` over weight space."""
    if q.dim != p.dim:
        raise BackendMismatch("Gaussian states of different dimension")
    cov_q = np.linalg.inv(q.precision)
    _, ld_q = np.linalg.slogdet(q.precision)
    _, ld_p = np.linalg.slogdet(p.precision)
    diff = q.mean - p.mean
    kl = 0.5 * (np.trace(p.precision @ cov_q) + diff @ p.precision @ diff - q.dim + ld_q - ld_p)
    return float(max(kl, 0.0))


def gaussian_draw(state: GaussianState, rng: np.random.Generator, n: int | None = None):
    m = 1 if n is None else n
    z = rng.standard_normal((state.dim, m))
    w = state.mean[:, None] + np.linalg.solve(state.cholesky.T, z)
    if n is None:
        return w[:, 0], state.noise_var
    return w, np.full(m, state.noise_var)


# ---------------------------------------------------------------------------
# feature maps
# ---------------------------------------------------------------------------

class LinearDesign:
    """Raw parent values plus an intercept column."""

    kind = "nig"

    def __init__(self, n_inputs: int):
        self.n_inputs = n_inputs
        self.dim = n_inputs + 1

    def features(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.n_inputs)
        return np.hstack([X, np.ones((X.shape[0], 1))])

    def smoothed_features(self, X, col, var) -> np.ndarray:
        # a linear map commutes with expectation over additive input noise
        return self.features(X)

    def predict(self, X, w, col=None, var=0.0) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.n_inputs)
        return X @ w[:-1] + w[-1]

    def outer_predict(self, X, col, values, w) -> np.ndarray:
        """Prediction on every (row, value) pair with ``values`` placed in ``col``."""
        X = np.array(X, dtype=float).reshape(-1, self.n_inputs)
        X[:, col] = 0.0
        base = self.features(X) @ w
        return base[:, None] + np.asarray(values, dtype=float)[None, :] * w[col]


class RffFeatures:
    """Random Fourier features of an RBF kernel on standardised inputs.

    ``phi(x) = sqrt(2/D) cos(Omega^T (x / scales) + b)`` with
    ``Omega ~ N(0, 1/lengthscale^2)`` and ``b ~ U(0, 2 pi)`` drawn once.
    """

    kind = "rff"

    def __init__(self, scales: Sequence[float], dim: int = 128,
                 lengthscale: float = 1.0, seed: int = 0):
        self.scales = np.asarray(scales, dtype=float)
        self.n_inputs = self.scales.size
        self.dim = int(dim)
        self.lengthscale = float(lengthscale)
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.omega = rng.standard_normal((self.n_inputs, self.dim)) / self.lengthscale
        self.phase = rng.uniform(0.0, 2.0 * np.pi, self.dim)
        self.amp = np.sqrt(2.0 / self.dim)
        self._omega_std = self.omega / self.scales[:, None]

    def _arg(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.n_inputs)
        return X @ self._omega_std + self.phase

    def features(self, X: np.ndarray) -> np.ndarray:
        return self.amp * np.cos(self._arg(X))

    def smoothed_features(self, X, col, var) -> np.ndarray:
        """``E[phi(X + e)]`` for ``e ~ N(0, var)`` added to input ``col``.

        Uses ``E cos(w e + z) = exp(-w^2 var / 2) cos z`` for Gaussian ``e``.
        """
        damp = np.exp(-0.5 * self._omega_std[col] ** 2 * float(var))
        return self.features(X) * damp

    def predict(self, X, w, col=None, var=0.0, chunk: int = 8192) -> np.ndarray:
        """``phi(X) @ w``, optionally smoothed over Gaussian noise on ``col``.

        Works in row chunks with in-place cosines, so the full feature
        matrix is never held in memory.
        """
        X = np.asarray(X, dtype=float).reshape(-1, self.n_inputs)
        coef = self.amp * np.asarray(w, dtype=float)
        if col is not None and var > 0:
            coef = coef * np.exp(-0.5 * self._omega_std[col] ** 2 * float(var))
        out = np.empty(X.shape[0])
        for lo in range(0, X.shape[0], chunk):
            arg = X[lo:lo + chunk] @ self._omega_std
            arg += self.phase
            np.cos(arg, out=arg)
            out[lo:lo + chunk] = arg @ coef
        return out

    def outer_predict(self, X, col, values, w) -> np.ndarray:
        """Predictions on the (row, value) product via the cosine addition rule."""
        X = np.array(X, dtype=float).reshape(-1, self.n_inputs)
        X[:, col] = 0.0
        beta = self._arg(X)
        alpha = np.asarray(values, dtype=float)[:, None] * self._omega_std[col][None, :]
        aw = self.amp * w
        return (np.cos(beta) * aw) @ np.cos(alpha).T - (np.sin(beta) * aw) @ np.sin(alpha).T


# ---------------------------------------------------------------------------
# mechanisms and draws
# ---------------------------------------------------------------------------

@dataclass
class MechanismDraw:
    """One parameter draw of a mechanism together with its feature map."""

    featurizer: object
    weights: np.ndarray
    noise_var: float
    parents: tuple[str, ...] = ()

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.featurizer.predict(X, self.weights)

    def predict_smoothed(self, X: np.ndarray, col: int | None, var: float) -> np.ndarray:
        """Mean prediction when input ``col`` carries extra Gaussian noise."""
        if col is None or var == 0:
            return self.predict(X)
        return self.featurizer.predict(X, self.weights, col, var)

    def outer_predict(self, X: np.ndarray, col: int, values: np.ndarray) -> np.ndarray:
        return self.featurizer.outer_predict(X, col, values, self.weights)


@dataclass
class Mechanism:
    """One learnable mechanism: parents, feature map and posterior state."""

    name: str
    parents: tuple[str, ...]
    featurizer: object
    state: object
    temperature: float = 1.0
    obs_scale: float = 1.0

    @property
    def backend(self) -> str:
        return self.featurizer.kind

    def design(self, rows: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.column_stack([np.asarray(rows[p], dtype=float) for p in self.parents])

    def updated(self, rows: Mapping[str, np.ndarray]) -> "Mechanism":
        X = self.featurizer.features(self.design(rows))
        y = np.asarray(rows[self.name], dtype=float)
        if self.backend == "nig":
            state = nig_update(self.state, X, y, self.temperature)
        else:
            state = gibbs_update(self.state, X, y, self.temperature, self.obs_scale)
        return replace(self, state=state)

    def draw(self, rng: np.random.Generator) -> MechanismDraw:
        if self.backend == "nig":
            w, s2 = nig_draw(self.state, rng)
        else:
            w, s2 = gaussian_draw(self.state, rng)
        return MechanismDraw(self.featurizer, w, s2, self.parents)

    def mean_draw(self) -> MechanismDraw:
        """Draw located at the posterior mean (greedy rules)."""
        if self.backend == "nig":
            s2 = self.state.b / (self.state.a - 1) if self.state.a > 1 else self.state.b / self.state.a
            return MechanismDraw(self.featurizer, self.state.mean.copy(), float(s2), self.parents)
        return MechanismDraw(self.featurizer, self.state.mean, self.state.noise_var, self.parents)

    def kl(self, other_state) -> float:
        if self.backend == "nig":
            if not isinstance(other_state, NigState):
                raise BackendMismatch("NIG state compared with a non-NIG state")
            return nig_kl(self.state, other_state)
        if not isinstance(other_state, GaussianState):
            raise BackendMismatch("Gaussian state compared with a non-Gaussian state")
        return gaussian_kl(self.state, other_state)

    def information(self, X: np.ndarray, n_rows: int) -> np.ndarray:
        """Expected log-determinant gain of the Fisher information per row.

        ``log det(F + n phi phi^T / s2) - log det F`` with ``F`` the posterior
        precision of the weights.  For NIG the weight covariance is
        ``sigma^2 F^-1`` and the noise is ``sigma^2``, so ``sigma^2`` cancels
        and the expectation over the posterior is exact.
        """
        F = self.featurizer.features(X)
        cov = np.linalg.inv(self.state.precision)
        lev = np.einsum("ij,jk,ik->i", F, cov, F)
        if self.backend == "nig":
            return np.log1p(n_rows * lev)
        tau = self.temperature / self.obs_scale ** 2
        return np.log1p(tau * n_rows * lev)


def scoped_mechanisms(scope: Iterable[int], names: Iterable[str]) -> tuple[str, ...]:
    """Mechanisms whose KL enters the certificate for ``scope`` at two levels.

    ``{C : 1 < max(scope)} | {Y, R}``.  The empty scope certifies the legacy
    alone and involves no mechanism.
    """
    scope = set(scope)
    if not scope:
        return ()
    if not scope <= {1, 2}:
        raise ValueError(f"scope {sorted(scope)} is not a subset of {{1, 2}}")
    wanted = {"Y", "R"} | ({"C"} if max(scope) > 1 else set())
    return tuple(n for n in names if n in wanted)


@dataclass
class BeliefDraw:
    """One joint draw ``theta`` over every mechanism."""

    parts: dict[str, MechanismDraw]

    def __getitem__(self, name: str) -> MechanismDraw:
        return self.parts[name]

    def __contains__(self, name: str) -> bool:
        return name in self.parts


@dataclass
class FactorisedBelief:
    """Product posterior over learnable mechanisms with a reference prior."""

    mechanisms: dict[str, Mechanism]
    reference: dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.reference:
            self.reference = {n: m.state for n, m in self.mechanisms.items()}

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.mechanisms)

    def copy(self) -> "FactorisedBelief":
        return FactorisedBelief(dict(self.mechanisms), dict(self.reference))

    def update(self, rows: Mapping[str, np.ndarray]) -> None:
        for n, m in self.mechanisms.items():
            self.mechanisms[n] = m.updated(rows)

    def update_records(self, records) -> None:
        for rec in records:
            self.update(rec.rows())

    def sample(self, rng: np.random.Generator) -> BeliefDraw:
        # one child generator per mechanism keeps the draws independent of
        # each other's dimensions
        seeds = rng.integers(0, 2 ** 63 - 1, size=len(self.mechanisms))
        return BeliefDraw({n: m.draw(np.random.default_rng(int(s)))
                           for (n, m), s in zip(self.mechanisms.items(), seeds)})

    def mean_draw(self) -> BeliefDraw:
        return BeliefDraw({n: m.mean_draw() for n, m in self.mechanisms.items()})

    def with_reference_here(self) -> "FactorisedBelief":
        """A copy whose reference prior is the current posterior."""
        return FactorisedBelief(dict(self.mechanisms),
                                {n: m.state for n, m in self.mechanisms.items()})

    def kl_to_prior(self, scope: Iterable[int] | None = None) -> tuple[dict[str, float], float]:
        """Per-mechanism ``KL(Q_X || p0_X)`` and the sum over the scoped set.

        ``scope=None`` sums over every mechanism.
        """
        per = {n: m.kl(self.reference[n]) for n, m in self.mechanisms.items()}
        keys = self.names if scope is None else scoped_mechanisms(scope, self.names)
        return per, float(sum(per[k] for k in keys))

    # -- serialisation -----------------------------------------------------
    def to_blob(self) -> str:
        """Compressed JSON text holding every state and feature-map seed."""
        def enc(state):
            if isinstance(state, NigState):
                return {"type": "nig", "mean": state.mean.tolist(),
                        "precision": state.precision.tolist(), "a": state.a, "b": state.b}
            return {"type": "gauss", "precision": state.precision.tolist(),
                    "shift": state.shift.tolist(), "resid_ss": state.resid_ss,
                    "resid_n": state.resid_n}

        def feat(f):
            if isinstance(f, LinearDesign):
                return {"type": "linear", "n_inputs": f.n_inputs}
            return {"type": "rff", "scales": f.scales.tolist(), "dim": f.dim,
                    "lengthscale": f.lengthscale, "seed": f.seed}

        payload = {"version": BLOB_VERSION, "mechanisms": [
            {"name": n, "parents": list(m.parents), "temperature": m.temperature,
             "obs_scale": m.obs_scale, "featurizer": feat(m.featurizer),
             "state": enc(m.state), "reference": enc(self.reference[n])}
            for n, m in self.mechanisms.items()]}
        raw = json.dumps(payload).encode()
        return base64.b64encode(zlib.compress(raw)).decode()

    @classmethod
    def from_blob(cls, blob: str) -> "FactorisedBelief":
        payload = json.loads(zlib.decompress(base64.b64decode(blob)))
        if payload.get("version") != BLOB_VERSION:
            raise ValueError("unsupported belief blob version")

        def dec(d):
            if d["type"] == "nig":
                return NigState(np.array(d["mean"]), np.array(d["precision"]), d["a"], d["b"])
            return GaussianState(np.array(d["precision"]), np.array(d["shift"]),
                                 d["resid_ss"], d["resid_n"])

        mechs, ref = {}, {}
        for d in payload["mechanisms"]:
            f = d["featurizer"]
            fz = LinearDesign(f["n_inputs"]) if f["type"] == "linear" else \
                RffFeatures(f["scales"], f["dim"], f["lengthscale"], f["seed"])
            mechs[d["name"]] = Mechanism(d["name"], tuple(d["parents"]), fz, dec(d["state"]),
                                         d["temperature"], d["obs_scale"])
            ref[d["name"]] = dec(d["reference"])
        return cls(mechs, ref)


@dataclass(frozen=True)
class BackendConfig:
    """Backend hyperparameters shared by every mechanism of a belief."""

    kind: str = "rff"
    rff_dim: int = 128
    lengthscale: float = 1.0
    temperature: float = 1.0
    obs_scale: float = 1.0
    mu0: float = 0.0
    lam0: float = 0.1
    a0: float = 2.0
    b0: float = 1.0


def make_mechanism(name: str, parents: Sequence[str], scales: Mapping[str, float],
                   cfg: BackendConfig, seed: int) -> Mechanism:
    parents = tuple(parents)
    if cfg.kind == "nig":
        fz = LinearDesign(len(parents))
        state = nig_prior(fz.dim, cfg.mu0, cfg.lam0, cfg.a0, cfg.b0)
    elif cfg.kind == "rff":
        fz = RffFeatures([scales[p] for p in parents], cfg.rff_dim, cfg.lengthscale, seed)
        state = gaussian_prior(fz.dim, prior_var=scales[name] ** 2,
                               noise_var=cfg.obs_scale ** 2)
    else:
        raise ValueError(f"unknown backend {cfg.kind!r}")
    return Mechanism(name, parents, fz, state, cfg.temperature, cfg.obs_scale)


def hyper_prior(parents: Mapping[str, Sequence[str]], scales: Mapping[str, float],
                cfg: BackendConfig, seed: int = 0) -> FactorisedBelief:
    """Data-free product prior over the given mechanisms.

    Feature-map seeds derive from ``seed`` and the mechanism position so that
    two beliefs built from the same seed share their feature maps.
    """
    mechs = {}
    for pos, (name, pa) in enumerate(parents.items()):
        mechs[name] = make_mechanism(name, pa, scales, cfg,
                                     int(np.random.SeedSequence([seed, pos]).generate_state(1)[0]))
    return FactorisedBelief(mechs)


def build_p0_from_prior_data(hyper: FactorisedBelief, prior_records: Sequence,
                             cert_ks: Iterable[int] | None = None) -> FactorisedBelief:
    """Reference prior ``p0``: the hyper-prior updated once on the prior set.

    ``cert_ks`` lists episode indices reserved for certification; an overlap
    with the prior set is a contract violation.
    """
    if cert_ks is not None:
        clash = {r.k for r in prior_records} & set(cert_ks)
        if clash:
            raise ValueError(f"prior and certificate sets overlap on episodes {sorted(clash)[:5]}")
    p0 = FactorisedBelief(dict(hyper.mechanisms))
    for rec in prior_records:
        p0.update(rec.rows())
    return p0.with_reference_here()
