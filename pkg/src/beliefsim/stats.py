"""Statistics over Likert samples: distributions, divergences, rank tests.

Everything here is pure Python and deterministic, so identical inputs give
bitwise-identical outputs regardless of platform BLAS or thread count.
"""

from __future__ import annotations

import math
import statistics
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .core import LIKERT_VALUES
from .special import SMALLEST_P, normal_cdf, normal_sf, student_t_cdf, t_two_sided_p

__all__ = [
    "DegenerateError",
    "Distribution",
    "Method",
    "TestResult",
    "fisher_r_to_z",
    "kl_divergence",
    "mann_whitney_u",
    "mean_std",
    "normal_cdf",
    "pmf_of",
    "rankdata",
    "spearman",
    "student_t_cdf",
    "wasserstein_distance",
]

N_BINS = len(LIKERT_VALUES)
EXACT_MWU_MAX_PRODUCT = 400


class DegenerateError(ValueError):
    """A statistic is undefined for this input (e.g. constant series)."""


class Method(str, Enum):
    T_APPROX = "t_approx"
    NORMAL_APPROX = "normal_approx"
    EXACT = "exact"


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    method: Method
    n: tuple[int, ...]

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if not 0.0 < self.p_value <= 1.0:
            raise ValueError(f"p_value outside (0, 1]: {self.p_value}")


def _clamp_p(p: float) -> float:
    return min(1.0, max(p, SMALLEST_P))


@dataclass(frozen=True)
class Distribution:
    """PMF over the five Likert values; ``n`` is the sample count (0 for a given pmf)."""

    pmf: tuple[float, ...]
    n: int = 0

    def __post_init__(self):
        pmf = tuple(float(x) for x in self.pmf)
        if len(pmf) != N_BINS:
            raise ValueError(f"pmf must have {N_BINS} bins, got {len(pmf)}")
        if any(x < 0 or math.isnan(x) for x in pmf):
            raise ValueError("pmf entries must be nonnegative")
        if abs(math.fsum(pmf) - 1.0) > 1e-12:
            raise ValueError(f"pmf must sum to 1, sums to {math.fsum(pmf)!r}")
        if self.n < 0:
            raise ValueError("n must be nonnegative")
        object.__setattr__(self, "pmf", pmf)

    @property
    def cdf(self) -> tuple[float, ...]:
        out = [math.fsum(self.pmf[: i + 1]) for i in range(N_BINS)]
        out[-1] = 1.0
        return tuple(out)

    def smoothed(self, pseudocount: float) -> tuple[float, ...]:
        """Pmf after adding ``pseudocount`` observations to every bin."""
        if pseudocount < 0:
            raise ValueError("pseudocount must be nonnegative")
        if pseudocount == 0:
            return self.pmf
        if self.n <= 0:
            raise ValueError("pseudocount smoothing needs the sample count n")
        add = pseudocount / self.n
        total = 1.0 + N_BINS * add
        return tuple((x + add) / total for x in self.pmf)


def pmf_of(samples: Sequence[int]) -> Distribution:
    if not samples:
        raise ValueError("empty sample")
    counts = Counter(samples)
    bad = [v for v in counts if v not in LIKERT_VALUES]
    if bad:
        raise ValueError(f"values outside the Likert range: {sorted(bad)}")
    n = len(samples)
    return Distribution(tuple(counts.get(v, 0) / n for v in LIKERT_VALUES), n)


def kl_divergence(p: Distribution, q: Distribution, pseudocount: float = 0.0) -> float:
    """D(p || q) in nats.

    With ``pseudocount == 0`` and some bin where p > 0 but q == 0 the
    divergence is ``math.inf``.
    """
    ps = p.smoothed(pseudocount)
    qs = q.smoothed(pseudocount)
    terms = []
    for pv, qv in zip(ps, qs):
        if pv == 0.0:
            continue
        if qv == 0.0:
            return math.inf
        terms.append(pv * math.log(pv / qv))
    return max(0.0, math.fsum(terms))


def wasserstein_distance(p: Distribution, q: Distribution) -> float:
    """W1 between two distributions on the unit-spaced support 0..4."""
    return math.fsum(abs(a - b) for a, b in zip(p.cdf, q.cdf))


def mean_std(samples: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (divisor n - 1)."""
    if len(samples) < 2:
        raise ValueError("standard deviation needs at least 2 samples")
    return float(statistics.fmean(samples)), float(statistics.stdev(samples))


def rankdata(values: Sequence[float]) -> list[float]:
    """1-based ranks; tied values share the average of their positions."""
    order = sorted(range(len(values)), key=values.__getitem__)
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def _pearson(x: Sequence[float], y: Sequence[float]) -> float:
    n = len(x)
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    dx = [v - mx for v in x]
    dy = [v - my for v in y]
    sxx = math.fsum(v * v for v in dx)
    syy = math.fsum(v * v for v in dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateError("degenerate: zero rank variance")
    sxy = math.fsum(a * b for a, b in zip(dx, dy))
    r = sxy / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def spearman(x: Sequence[float], y: Sequence[float]) -> tuple[float, TestResult]:
    """Spearman's rho with a two-sided t-approximation p-value."""
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    n = len(x)
    if n < 3:
        raise ValueError("spearman needs at least 3 pairs")
    rx = rankdata(x)
    ry = rankdata(y)
    rho = _pearson(rx, ry)
    df = n - 2
    if abs(rho) == 1.0:
        return rho, TestResult(math.inf if rho > 0 else -math.inf, SMALLEST_P, Method.T_APPROX, (n,))
    t = rho * math.sqrt(df / (1.0 - rho * rho))
    return rho, TestResult(t, _clamp_p(t_two_sided_p(t, df)), Method.T_APPROX, (n,))


def _u_statistic(a: Sequence[float], b: Sequence[float]) -> tuple[float, list[float]]:
    ranks = rankdata(list(a) + list(b))
    na = len(a)
    return math.fsum(ranks[:na]) - na * (na + 1) / 2.0, ranks


def u_distribution(na: int, nb: int) -> list[int]:
    """Counts of rank arrangements by U for tie-free samples of sizes (na, nb).

    Coefficients of the Gaussian binomial [na+nb choose na]_q; they sum to
    C(na+nb, na).
    """
    m = min(na, nb)
    other = max(na, nb)
    poly = [1]
    for i in range(1, m + 1):
        # multiply by (1 - q^(other+i))
        shift = other + i
        grown = poly + [0] * shift
        for k, c in enumerate(poly):
            grown[k + shift] -= c
        # divide by (1 - q^i)
        for k in range(i, len(grown)):
            grown[k] += grown[k - i]
        while len(grown) > 1 and grown[-1] == 0:
            grown.pop()
        poly = grown
    return poly


def mann_whitney_u(a: Sequence[float], b: Sequence[float], method: str = "auto") -> TestResult:
    """Two-sided Mann-Whitney U test; ``statistic`` is U for ``a``.

    ``auto`` uses the exact null distribution when ``len(a)*len(b) <= 400``
    and there are no ties, otherwise the normal approximation with tie and
    continuity corrections.
    """
    na, nb = len(a), len(b)
    if na == 0 or nb == 0:
        raise ValueError("empty input")
    u_a, ranks = _u_statistic(a, b)
    n = na + nb
    tie_counts = Counter(ranks).values()
    has_ties = any(c > 1 for c in tie_counts)

    if method == "auto":
        method = "exact" if na * nb <= EXACT_MWU_MAX_PRODUCT and not has_ties else "normal"
    if method == "exact":
        if has_ties:
            raise ValueError("exact Mann-Whitney requires tie-free samples")
        counts = u_distribution(na, nb)
        total = math.comb(n, na)
        u = int(round(u_a))
        lower = sum(counts[: u + 1])
        upper = sum(counts[u:])
        p = min(1.0, 2 * min(lower, upper) / total)
        return TestResult(u_a, _clamp_p(p), Method.EXACT, (na, nb))
    if method != "normal":
        raise ValueError(f"unknown method {method!r}")

    mu = na * nb / 2.0
    tie_term = sum(c**3 - c for c in tie_counts)
    var = na * nb / 12.0 * ((n + 1) - tie_term / (n * (n - 1))) if n > 1 else 0.0
    if var <= 0.0:
        return TestResult(u_a, 1.0, Method.NORMAL_APPROX, (na, nb))
    z = max(0.0, abs(u_a - mu) - 0.5) / math.sqrt(var)
    return TestResult(u_a, _clamp_p(2.0 * normal_sf(z)), Method.NORMAL_APPROX, (na, nb))


def fisher_r_to_z(r1: float, n1: int, r2: float, n2: int) -> TestResult:
    """Test whether two independent correlations differ (arctanh transform)."""
    for r in (r1, r2):
        if not -1.0 < r < 1.0:
            raise DegenerateError(f"correlation must satisfy |r| < 1, got {r}")
    for n in (n1, n2):
        if n <= 3:
            raise ValueError(f"fisher r-to-z needs n > 3, got {n}")
    z = (math.atanh(r1) - math.atanh(r2)) / math.sqrt(1.0 / (n1 - 3) + 1.0 / (n2 - 3))
    return TestResult(z, _clamp_p(2.0 * normal_sf(abs(z))), Method.NORMAL_APPROX, (n1, n2))
