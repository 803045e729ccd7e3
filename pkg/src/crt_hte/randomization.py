"""Random allocation rule: assignments, size-weighted treatment fractions and psi.

psi(P; m) = E[1 / (Wbar_m (1 - Wbar_m))] over the uniform distribution on all
assignments with exactly ``i1`` treated clusters. It is available three ways:

* :func:`psi_exact` -- exact expectation. Assignments that pick the same number
  of clusters of each distinct size share a Wbar value, so the default path
  enumerates those size classes weighted by their binomial multiplicity. The
  plain lexicographic walk over all C(I, i1) assignments is kept behind
  ``grouped=False``.
* :func:`psi_approx` -- the fourth-order moment series, balanced arms only.
* :func:`psi_sampled` -- Monte Carlo over uniformly drawn assignments.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np

from .design import ClusterSizes, PsiEstimate
from .errors import (
    ArmCountOutOfRange,
    DegenerateAssignment,
    EnumerationTooLarge,
    TooFewClusters,
    UnequalArms,
)

DEFAULT_CAP = 10**7
_SAMPLE_CHUNK = 65_536

SizesLike = ClusterSizes | Sequence[int] | np.ndarray


def _as_sizes(m: SizesLike) -> np.ndarray:
    if isinstance(m, ClusterSizes):
        return m.as_array()
    return np.asarray(m, dtype=float)


def _int_sizes(m: SizesLike) -> tuple[int, ...] | None:
    raw = m.sizes if isinstance(m, ClusterSizes) else tuple(np.asarray(m).tolist())
    if all(float(v).is_integer() for v in raw):
        return tuple(int(v) for v in raw)
    return None


def _check_arms(n: int, i1: int) -> None:
    if not 1 <= i1 <= n - 1:
        raise ArmCountOutOfRange(f"i1 = {i1} must lie in [1, {n - 1}] for {n} clusters")


def check_assignment(w: Sequence[int] | np.ndarray, n: int | None = None) -> np.ndarray:
    arr = np.asarray(w)
    if arr.ndim != 1 or not np.isin(arr, (0, 1)).all():
        raise DegenerateAssignment("assignment must be a 1-d vector of 0/1 entries")
    if n is not None and arr.size != n:
        raise DegenerateAssignment(f"assignment has {arr.size} entries for {n} clusters")
    if arr.all() or not arr.any():
        raise DegenerateAssignment("all clusters in one arm")
    return arr.astype(np.int8)


def wbar(m: SizesLike, w: Sequence[int] | np.ndarray) -> float:
    """Size-weighted intervention fraction m'W / m'1."""
    sizes = _as_sizes(m)
    arr = check_assignment(w, sizes.size)
    return float(sizes @ arr / sizes.sum())


def cluster_weights(m: SizesLike, rho: float) -> np.ndarray:
    """m_i d_i(rho) with d_i(rho) = 1 / (1 - rho + m_i rho)."""
    sizes = _as_sizes(m)
    return sizes / (1.0 - rho + sizes * rho)


def wbar_rho(m: SizesLike, w: Sequence[int] | np.ndarray, rho: float) -> float:
    """Intervention fraction weighted by m_i d_i(rho); rho = 0 gives :func:`wbar`."""
    sizes = _as_sizes(m)
    arr = check_assignment(w, sizes.size)
    weights = cluster_weights(sizes, rho)
    return float(weights @ arr / weights.sum())


def iter_assignments(n: int, i1: int) -> Iterator[np.ndarray]:
    """All members of the allocation set, lexicographic in the treated index set."""
    _check_arms(n, i1)
    for idx in itertools.combinations(range(n), i1):
        w = np.zeros(n, dtype=np.int8)
        w[list(idx)] = 1
        yield w


@dataclass(frozen=True)
class SizeMoments:
    cv2: float
    kurt: float
    var_wbar: float
    m4_wbar: float


def _exact_moments(sizes: tuple[int, ...]) -> tuple[Fraction, Fraction, Fraction]:
    n = len(sizes)
    mean = Fraction(sum(sizes), n)
    c2 = sum((Fraction(m) - mean) ** 2 for m in sizes) / n
    c4 = sum((Fraction(m) - mean) ** 4 for m in sizes) / n
    return mean, c2, c4


def size_cv2_kurtosis(m: SizesLike, definition: str = "standard") -> tuple[float, float]:
    """Empirical CV^2 and kurtosis of the cluster sizes.

    ``definition="standard"`` uses the fourth central moment over the squared
    variance. ``"printed"`` keeps the alternative numerator
    sum m^4 - 4 mbar sum m^3 + 6 mbar^2 sum m^2 - 3 mbar^4 (scaled by 1/I),
    which only differs from the standard one in its last term.
    Kurtosis is NaN for constant sizes.
    """
    if definition not in ("standard", "printed"):
        raise ValueError(f"unknown kurtosis definition {definition!r}")
    ints = _int_sizes(m)
    if ints is not None:
        mean, c2, c4 = _exact_moments(ints)
        n = len(ints)
        cv2 = c2 / mean**2
        if c2 == 0:
            return 0.0, math.nan
        if definition == "standard":
            kurt = c4 / c2**2
        else:
            s2 = sum(Fraction(v) ** 2 for v in ints)
            s3 = sum(Fraction(v) ** 3 for v in ints)
            s4 = sum(Fraction(v) ** 4 for v in ints)
            kurt = ((s4 - 4 * mean * s3 + 6 * mean**2 * s2 - 3 * mean**4) / n) / c2**2
        return float(cv2), float(kurt)
    sizes = _as_sizes(m)
    mean = sizes.mean()
    dev = sizes - mean
    c2 = float(np.mean(dev**2))
    cv2 = c2 / mean**2
    if c2 == 0.0:
        return 0.0, math.nan
    if definition == "standard":
        kurt = float(np.mean(dev**4)) / c2**2
    else:
        num = (np.sum(sizes**4) - 4 * mean * np.sum(sizes**3) + 6 * mean**2 * np.sum(sizes**2)
               - 3 * mean**4) / sizes.size
        kurt = float(num) / c2**2
    return float(cv2), kurt


def size_moments(m: SizesLike, i1: int, *, fourth: bool = True,
                 kurtosis: str = "standard") -> SizeMoments:
    """Second and fourth central moments of Wbar_m under the random allocation rule."""
    n = len(_as_sizes(m))
    _check_arms(n, i1)
    i0 = n - i1
    cv2, kurt = size_cv2_kurtosis(m, kurtosis)
    var = i1 * i0 / (n**2 * (n - 1)) * cv2
    if not fourth:
        return SizeMoments(cv2, kurt, var, math.nan)
    if n < 4:
        raise TooFewClusters(f"the fourth moment needs at least 4 clusters, got {n}")
    if cv2 == 0.0:
        m4 = 0.0
    else:
        m4 = (((n**2 - 6 * i0 * i1 + n) / n) * kurt + 3 * (i1 - 1) * (i0 - 1)) \
            * i1 * i0 * cv2**2 / (n**3 * (n - 1) * (n - 2) * (n - 3))
    return SizeMoments(cv2, kurt, var, m4)


def _size_classes(m: SizesLike) -> tuple[np.ndarray, np.ndarray]:
    sizes = _as_sizes(m)
    values, counts = np.unique(sizes, return_counts=True)
    return values, counts


def size_class_enumeration(counts: Sequence[int], i1: int,
                           cap: int = DEFAULT_CAP) -> tuple[np.ndarray, np.ndarray]:
    """Every way to pick ``i1`` clusters, collapsed to per-size-class counts.

    Returns ``(picks, multiplicity)`` where ``picks[r, g]`` is how many clusters
    of class ``g`` are treated and ``multiplicity[r]`` is the number of
    assignments sharing that pattern (a product of binomial coefficients).
    """
    counts = [int(c) for c in counts]
    remaining = np.cumsum(counts[::-1])[::-1].tolist() + [0]
    picks = np.zeros((1, 0), dtype=np.int64)
    taken = np.zeros(1, dtype=np.int64)
    for g, c in enumerate(counts):
        k = np.arange(c + 1, dtype=np.int64)
        new_taken = (taken[:, None] + k[None, :]).ravel()
        rows = np.repeat(picks, c + 1, axis=0)
        new_col = np.tile(k, picks.shape[0])
        keep = (new_taken <= i1) & (new_taken + remaining[g + 1] >= i1)
        picks = np.column_stack([rows[keep], new_col[keep]])
        taken = new_taken[keep]
        if picks.shape[0] > cap:
            raise EnumerationTooLarge(
                f"{picks.shape[0]} size classes exceed the enumeration cap {cap}"
            )
    mult = np.ones(picks.shape[0])
    for g, c in enumerate(counts):
        table = np.array([math.comb(c, k) for k in range(c + 1)], dtype=float)
        mult *= table[picks[:, g]]
    return picks, mult


def _inverse_wbar_terms(wb: np.ndarray) -> np.ndarray:
    return 1.0 / (wb * (1.0 - wb))


def psi_exact(m: SizesLike, i1: int, *, cap: int = DEFAULT_CAP,
              grouped: bool = True) -> PsiEstimate:
    """Exact psi by enumeration of the allocation set."""
    sizes = _as_sizes(m)
    n = sizes.size
    _check_arms(n, i1)
    cv2, kurt = size_cv2_kurtosis(m)
    support = math.comb(n, i1)
    if grouped:
        values, counts = _size_classes(sizes)
        picks, mult = size_class_enumeration(counts, i1, cap)
        wb = (picks @ values) / sizes.sum()
        value = float(np.dot(mult, _inverse_wbar_terms(wb)) / mult.sum())
        evaluated = int(picks.shape[0])
    else:
        if support > cap:
            raise EnumerationTooLarge(f"C({n},{i1}) = {support} exceeds the cap {cap}")
        idx = np.fromiter(itertools.chain.from_iterable(itertools.combinations(range(n), i1)),
                          dtype=np.int64, count=support * i1).reshape(support, i1)
        wb = sizes[idx].sum(axis=1) / sizes.sum()
        value = float(np.mean(_inverse_wbar_terms(wb)))
        evaluated = support
    return PsiEstimate(value, "exact", cv2, kurt, evaluated,
                       extra={"support_size": support, "grouped": grouped})


def enumerated_wbar_moments(m: SizesLike, i1: int, cap: int = DEFAULT_CAP) -> tuple[float, float]:
    """Exact 2nd and 4th central moments of Wbar_m around i1/I by enumeration."""
    sizes = _as_sizes(m)
    _check_arms(sizes.size, i1)
    values, counts = _size_classes(sizes)
    picks, mult = size_class_enumeration(counts, i1, cap)
    dev = (picks @ values) / sizes.sum() - i1 / sizes.size
    total = mult.sum()
    return float(np.dot(mult, dev**2) / total), float(np.dot(mult, dev**4) / total)


def psi_series_value(cv2: float, kurt: float, n: int) -> float:
    """4(1 + CV^2/(I-1) + [3(I-2) - 2 Kurt] CV^4 / (I(I-1)(I-3)))."""
    if cv2 == 0.0:
        return 4.0
    return 4.0 * (1.0 + cv2 / (n - 1)
                  + (3.0 * (n - 2) - 2.0 * kurt) * cv2**2 / (n * (n - 1) * (n - 3)))


def psi_approx(m: SizesLike, i1: int | None = None, *,
               kurtosis: str = "standard") -> PsiEstimate:
    """Moment-series approximation of psi; requires I = 2 i1 and I >= 4."""
    sizes = _as_sizes(m)
    n = sizes.size
    if i1 is not None and 2 * i1 != n:
        raise UnequalArms(f"the series needs i1 = i0, got i1 = {i1} of {n} clusters")
    if n % 2:
        raise UnequalArms(f"the series needs an even number of clusters, got {n}")
    if n < 4:
        raise TooFewClusters(f"the series needs at least 4 clusters, got {n}")
    cv2, kurt = size_cv2_kurtosis(m, kurtosis)
    return PsiEstimate(psi_series_value(cv2, kurt, n), "series", cv2, kurt, 0,
                       extra={"kurtosis_definition": kurtosis})


def make_rng(seed: int | Sequence[int]) -> np.random.Generator:
    """Counter-based generator (Philox) keyed by ``seed`` or a tuple such as (seed, k)."""
    entropy = [int(s) for s in np.atleast_1d(seed)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def sample_allocation(m: SizesLike, i1: int,
                      seed: int | Sequence[int] | np.random.Generator) -> np.ndarray:
    """One uniform draw from the allocation set: shuffle, treat the first ``i1``."""
    n = _as_sizes(m).size
    _check_arms(n, i1)
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    w = np.zeros(n, dtype=np.int8)
    w[rng.permutation(n)[:i1]] = 1
    return w


def psi_sampled(m: SizesLike, i1: int, replicates: int, seed: int) -> PsiEstimate:
    """Monte Carlo estimate of psi from uniformly sampled assignments."""
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    sizes = _as_sizes(m)
    n = sizes.size
    _check_arms(n, i1)
    rng = make_rng(seed)
    total = sizes.sum()
    draws = []
    left = replicates
    while left > 0:
        size = min(left, _SAMPLE_CHUNK)
        order = np.argsort(rng.random((size, n)), axis=1)[:, :i1]
        draws.append(_inverse_wbar_terms(sizes[order].sum(axis=1) / total))
        left -= size
    values = np.concatenate(draws)
    se = float(values.std(ddof=1) / math.sqrt(replicates)) if replicates > 1 else math.nan
    cv2, kurt = size_cv2_kurtosis(m)
    return PsiEstimate(float(values.mean()), "sampled", cv2, kurt, replicates, std_error=se,
                       extra={"seed": seed})


def psi_rho(m: SizesLike, i1: int, rho: float, *, cap: int = DEFAULT_CAP) -> float:
    """Exact E[1/(Wbar_m(rho)(1 - Wbar_m(rho)))] over the allocation set."""
    sizes = _as_sizes(m)
    _check_arms(sizes.size, i1)
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    values, counts = _size_classes(sizes)
    picks, mult = size_class_enumeration(counts, i1, cap)
    class_weights = cluster_weights(values, rho)
    wb = (picks @ class_weights) / np.dot(counts, class_weights)
    return float(np.dot(mult, _inverse_wbar_terms(wb)) / mult.sum())


def compute_psi(m: SizesLike, i1: int, method: str = "auto", *, cap: int = DEFAULT_CAP,
                replicates: int = 100_000, seed: int = 0) -> PsiEstimate:
    """Dispatch on ``method``: exact, series, sampled, or auto.

    ``auto`` is exact when enumeration fits under ``cap`` and falls back to the
    series (balanced arms) or to sampling otherwise.
    """
    if method == "exact":
        return psi_exact(m, i1, cap=cap)
    if method == "series":
        return psi_approx(m, i1)
    if method == "sampled":
        return psi_sampled(m, i1, replicates, seed)
    if method != "auto":
        raise ValueError(f"unknown psi method {method!r}")
    try:
        return psi_exact(m, i1, cap=cap)
    except EnumerationTooLarge:
        n = len(_as_sizes(m))
        if 2 * i1 == n and n >= 4:
            return psi_approx(m, i1)
        return psi_sampled(m, i1, replicates, seed)
