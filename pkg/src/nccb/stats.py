"""Significance tests used by the benches.

Thin wrappers over :mod:`scipy.stats` that return a uniform
:class:`TestResult` record.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats as _st

_ALTERNATIVES = ("two-sided", "greater", "less")


@dataclass(frozen=True)
class TestResult:
    """Outcome of a significance test."""

    __test__ = False  # keep pytest from collecting this class

    test: str
    statistic: float
    df: float
    p_value: float
    alternative: str = "two-sided"
    n: tuple[int, ...] = ()

    def as_dict(self) -> dict:
        return {"test": self.test, "statistic": self.statistic, "df": self.df,
                "p_value": self.p_value, "alternative": self.alternative,
                "n": list(self.n)}


def _check_alt(alternative: str) -> str:
    if alternative not in _ALTERNATIVES:
        raise ValueError(f"unknown alternative {alternative!r}")
    return alternative


def welch_t(xs: Sequence[float], ys: Sequence[float],
            alternative: str = "two-sided") -> TestResult:
    """Welch's unequal-variance t-test of ``mean(xs) - mean(ys)``."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.size < 2 or y.size < 2:
        raise ValueError("Welch's test needs at least two samples per group")
    res = _st.ttest_ind(x, y, equal_var=False, alternative=_check_alt(alternative))
    vx, vy = x.var(ddof=1) / x.size, y.var(ddof=1) / y.size
    se2 = vx + vy
    if se2 > 0:
        df = se2 ** 2 / (vx ** 2 / (x.size - 1) + vy ** 2 / (y.size - 1))
    else:
        df = float(x.size + y.size - 2)
    return TestResult("welch_t", float(res.statistic), float(df), float(res.pvalue),
                      alternative, (x.size, y.size))


def paired_t(diffs: Sequence[float], one_sided: bool = False,
             alternative: str | None = None) -> TestResult:
    """One-sample t-test on paired differences.

    ``one_sided=True`` tests ``mean(diffs) > 0``.
    """
    d = np.asarray(diffs, dtype=float)
    if d.size < 2:
        raise ValueError("paired test needs at least two pairs")
    alt = _check_alt(alternative or ("greater" if one_sided else "two-sided"))
    res = _st.ttest_1samp(d, 0.0, alternative=alt)
    return TestResult("paired_t", float(res.statistic), float(d.size - 1),
                      float(res.pvalue), alt, (d.size,))


def spearman_rho(xs: Sequence[float], ys: Sequence[float]) -> TestResult:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.size != y.size or x.size < 3:
        raise ValueError("Spearman's rho needs at least three paired values")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        # undefined correlation for a constant input: report no association
        return TestResult("spearman_rho", 0.0, float(x.size - 2), 1.0, "two-sided", (x.size,))
    res = _st.spearmanr(x, y)
    rho, p = float(res.statistic), float(res.pvalue)
    return TestResult("spearman_rho", rho, float(x.size - 2), p, "two-sided", (x.size,))
