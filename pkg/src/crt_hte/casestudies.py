"""Power and sample-size curves for the three trial case studies.

RECODE and PARTNER come in an equal-size variant and an extreme variant where
all but one cluster is tiny. EPIC has a drop-out variant, a no-drop-out
variant and a prevalence sweep. Every curve is a list of plain rows that the
CLI writes as CSV.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .design import TrialDesign, load_preset
from .dist import normal_cdf, normal_quantile
from .errors import DomainError, NoRootInBracket
from .power import (
    EPIC,
    epic_preset_power,
    epic_preset_size,
    required_m_bar,
    round_to_multiple,
    solve_equalizer,
)
from .randomization import psi_approx

STUDIES = {
    "recode": ("equal", "extreme"),
    "partner": ("equal", "extreme"),
    "epic": ("dropout", "nodropout", "theta-sweep"),
}
COLUMNS = ("study", "variant", "theta", "delta", "power", "m_bar_required", "m_last")
SWEEP_DELTAS = (2.5, 5.0, 7.5, 10.0)

# default delta grids (start, stop, step) and threshold reporting resolution
_GRIDS = {"recode": (0.05, 0.6, 0.005), "partner": (0.1, 1.2, 0.01), "epic": (1.0, 15.0, 0.05)}
_THETA_GRID = (0.01, 0.99, 0.01)
_RESOLUTION = {"recode": 0.001, "partner": 0.001, "epic": 0.01}
_ROUND_MULTIPLE = {"recode": 3, "partner": 4}


@dataclass(frozen=True)
class Threshold:
    study: str
    variant: str
    root: float
    reported: float
    resolution: float

    def as_dict(self) -> dict:
        return {"study": self.study, "variant": self.variant, "root": self.root,
                "reported": self.reported, "resolution": self.resolution}


def parse_grid(text: str) -> np.ndarray:
    """Parse ``start:stop:step`` (inclusive stop) or a comma list."""
    try:
        if ":" in text:
            start, stop, step = (float(t) for t in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            n = int(math.floor((stop - start) / step + 1e-9)) + 1
            return np.round(start + step * np.arange(n), 12)
        return np.array([float(t) for t in text.split(",") if t.strip()])
    except ValueError:
        raise DomainError(f"cannot parse grid {text!r}; use start:stop:step or a,b,c") from None


def default_grid(study: str, variant: str) -> np.ndarray:
    lo, hi, step = _THETA_GRID if variant == "theta-sweep" else _GRIDS[study]
    return parse_grid(f"{lo}:{hi}:{step}")


def _check(study: str, variant: str) -> None:
    if study not in STUDIES:
        raise DomainError(f"unknown case study {study!r}; choose from {sorted(STUDIES)}")
    if variant not in STUDIES[study]:
        raise DomainError(f"{study} has variants {STUDIES[study]}, got {variant!r}")


def _z(alpha: float, power: float) -> float:
    return normal_quantile(1.0 - alpha / 2.0) + normal_quantile(power)


def _ceil_to(x: float, step: float) -> float:
    k = math.ceil(x / step - 1e-9)
    decimals = max(0, -int(math.floor(math.log10(step))))
    return round(k * step, decimals)


class _WaldCurve:
    """Power and size for a fixed design under the normal approximation."""

    def __init__(self, design: TrialDesign, psi: float):
        self.design = design
        self.psi = psi
        self.theta = float(design.theta[0])
        self.n = design.clusters.n_clusters
        self.total = float(sum(design.clusters.sizes))

    def slope(self) -> float:
        # |delta| multiplier inside the normal cdf
        return math.sqrt(self.total * self.theta * (1.0 - self.theta) / self.psi) / self.design.sigma_eps

    def power(self, delta: float, alpha: float) -> float:
        return normal_cdf(normal_quantile(alpha / 2.0) + abs(delta) * self.slope())

    def threshold(self, power: float, alpha: float) -> float:
        return _z(alpha, power) / self.slope()


def _recode_partner(study: str, variant: str, grid: np.ndarray, power: float, alpha: float):
    equal = load_preset(f"{study}_equal")
    theta = float(equal.theta[0])
    sigma = equal.sigma_eps
    rows = []
    if variant == "equal":
        curve = _WaldCurve(equal, psi_approx(equal.clusters).value)
        for d in grid:
            raw = required_m_bar(d, curve.n, theta, sigma, curve.psi, power, alpha)
            rows.append((study, variant, theta, d, curve.power(d, alpha),
                         round_to_multiple(raw, _ROUND_MULTIPLE[study], "ceil"), ""))
        return rows, curve.threshold(power, alpha)
    extreme = load_preset(f"{study}_extreme")
    curve = _WaldCurve(extreme, psi_approx(extreme.clusters).value)
    fixed = list(extreme.clusters.sizes[:-1])
    for d in grid:
        try:
            eq = solve_equalizer(fixed, d, theta, sigma, power, alpha)
            m_bar, m_last = eq.m_bar, eq.m_last
        except NoRootInBracket:
            m_bar = m_last = ""
        rows.append((study, variant, theta, d, curve.power(d, alpha), m_bar, m_last))
    return rows, curve.threshold(power, alpha)


def _bisect_threshold(f, target: float, lo: float, hi: float) -> float:
    # f increasing in delta
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12 * hi:
            break
    return 0.5 * (lo + hi)


def _epic(variant: str, grid: np.ndarray, power: float, alpha: float, theta: float = 0.25):
    n = EPIC["n_clusters"]
    sigma = EPIC["sigma_eps"]
    m_obs = EPIC["m_planned"] * (1.0 - EPIC["r"])
    rows = []
    if variant == "dropout":
        f = lambda d: epic_preset_power(theta, d, alpha)
        for d in grid:
            rows.append(("epic", variant, theta, d, f(d), epic_preset_size(theta, d, power, alpha), ""))
        return rows, _bisect_threshold(f, power, 1e-6, 1e3)
    if variant == "nodropout":
        slope = math.sqrt(n * m_obs * theta * (1.0 - theta) / EPIC["psi"]) / sigma
        for d in grid:
            rows.append(("epic", variant, theta, d,
                         normal_cdf(normal_quantile(alpha / 2.0) + abs(d) * slope),
                         required_m_bar(d, n, theta, sigma, EPIC["psi"], power, alpha), ""))
        return rows, _z(alpha, power) / slope
    for d in SWEEP_DELTAS:
        for t in grid:
            if not 0.0 < t < 1.0:
                raise DomainError(f"prevalence grid values must lie in (0, 1), got {t}")
            rows.append(("epic", variant, t, d, epic_preset_power(t, d, alpha),
                         epic_preset_size(t, d, power, alpha), ""))
    return rows, None


def case_study(study: str, variant: str, grid: Sequence[float] | None = None,
               power: float = 0.8, alpha: float = 0.05) -> tuple[list[tuple], Threshold | None]:
    """Rows (columns as in ``COLUMNS``) and the 80%-power threshold on |delta|.

    The reported threshold is the smallest value on the study's reporting
    resolution whose power is at least the target, i.e. the root rounded up.
    The theta sweep has no single threshold and returns ``None``.
    """
    _check(study, variant)
    g = default_grid(study, variant) if grid is None else np.asarray(grid, dtype=float)
    if study == "epic":
        rows, root = _epic(variant, g, power, alpha)
    else:
        rows, root = _recode_partner(study, variant, g, power, alpha)
    if root is None:
        return rows, None
    res = _RESOLUTION[study]
    return rows, Threshold(study, variant, root, _ceil_to(root, res), res)


def thresholds(power: float = 0.8, alpha: float = 0.05) -> list[Threshold]:
    out = []
    for study, variants in STUDIES.items():
        for v in variants:
            if v == "theta-sweep":
                continue
            out.append(case_study(study, v, grid=[1.0], power=power, alpha=alpha)[1])
    return out


def prevalence_interval(delta: float, power: float = 0.8, alpha: float = 0.05,
                        step: float = 0.001) -> tuple[float, float] | None:
    """Range of theta on a grid where the EPIC drop-out design reaches ``power``."""
    th = np.arange(step, 1.0, step)
    ok = [t for t in th if epic_preset_power(float(t), delta, alpha) >= power]
    if not ok:
        return None
    return round(float(min(ok)), 6), round(float(max(ok)), 6)
