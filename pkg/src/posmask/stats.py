"""One-way ANOVA and Tukey HSD with their own F and studentized-range tails.

The F tail goes through the regularized incomplete beta function; the
studentized-range tail is a double Gauss-Legendre integral.  Both live in
:mod:`posmask.kernels`.
"""
import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.optimize import brentq

from posmask import kernels


def f_sf(f, df1, df2):
    """Upper tail P(F > f) of the F(df1, df2) distribution."""
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    return kernels.betainc_reg(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f))


def studentized_range_sf(q, k, df):
    return kernels.studentized_range_sf(q, k, df)


def studentized_range_ppf(p, k, df):
    """Quantile q with P(Q <= q) = p."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    target = 1.0 - p
    hi = 10.0
    while studentized_range_sf(hi, k, df) > target:
        hi *= 2.0
    return brentq(lambda q: studentized_range_sf(q, k, df) - target, 0.0, hi, xtol=1e-12)


def _check_groups(groups):
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(groups) < 2:
        raise ValueError("need at least 2 groups")
    if any(len(g) < 2 for g in groups):
        raise ValueError("every group needs at least 2 observations")
    return groups


@dataclass
class AnovaResult:
    f: float
    p: float
    df_between: int
    df_within: int
    ss_between: float
    ss_within: float
    degenerate: bool = False

    @property
    def ms_between(self):
        return self.ss_between / self.df_between

    @property
    def ms_within(self):
        return self.ss_within / self.df_within


def anova_oneway(groups):
    groups = _check_groups(groups)
    n = sum(len(g) for g in groups)
    k = len(groups)
    grand = np.concatenate(groups).mean()
    ss_between = float(sum(len(g) * (g.mean() - grand) ** 2 for g in groups))
    ss_within = float(sum(((g - g.mean()) ** 2).sum() for g in groups))
    dfb, dfw = k - 1, n - k
    scale = max(1.0, float(np.abs(np.concatenate(groups)).max()) ** 2)
    if ss_within <= 1e-24 * scale * n:
        if ss_between <= 1e-24 * scale * n:
            return AnovaResult(0.0, 1.0, dfb, dfw, ss_between, ss_within, degenerate=True)
        return AnovaResult(math.inf, 0.0, dfb, dfw, ss_between, ss_within, degenerate=True)
    f = (ss_between / dfb) / (ss_within / dfw)
    return AnovaResult(f, f_sf(f, dfb, dfw), dfb, dfw, ss_between, ss_within)


@dataclass
class TukeyPair:
    i: int
    j: int
    mean_diff: float  # mean_j - mean_i
    q: float
    p_adj: float
    lower: float
    upper: float
    reject: bool


@dataclass
class TukeyResult:
    pairs: list
    alpha: float
    q_crit: float
    mse: float
    df: int
    degenerate: bool = False

    def pair(self, i, j):
        for p in self.pairs:
            if (p.i, p.j) == (i, j) or (p.i, p.j) == (j, i):
                return p
        raise KeyError((i, j))


def tukey_hsd(groups, alpha=0.05):
    """Tukey-Kramer pairwise comparisons with family-wise level ``alpha``."""
    groups = _check_groups(groups)
    k = len(groups)
    n = sum(len(g) for g in groups)
    df = n - k
    mse = float(sum(((g - g.mean()) ** 2).sum() for g in groups) / df)
    means = [float(g.mean()) for g in groups]
    q_crit = studentized_range_ppf(1.0 - alpha, k, df)
    degenerate = mse <= 0.0
    pairs = []
    for i, j in combinations(range(k), 2):
        diff = means[j] - means[i]
        se = math.sqrt(mse / 2.0 * (1.0 / len(groups[i]) + 1.0 / len(groups[j])))
        if se == 0.0:
            q = 0.0 if diff == 0.0 else math.inf
        else:
            q = abs(diff) / se
        p = 0.0 if math.isinf(q) else min(1.0, max(0.0, studentized_range_sf(q, k, df)))
        half = q_crit * se
        pairs.append(TukeyPair(i, j, diff, q, p, diff - half, diff + half, p < alpha))
    return TukeyResult(pairs, alpha, q_crit, mse, df, degenerate)
