"""Monte Carlo data generation and operating characteristics.

Replicate k always draws from its own generator keyed by (seed, k), in a fixed
order: allocation, subgroup layout (or drop-out survivors), within-cluster
shuffle keys, cluster effects, residuals. The cluster effects are standard
normal and scaled by sigma_gamma(rho) afterwards, so runs at different ICCs or
different beta4 values share every random number.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .design import (
    INTEGRALITY_TOL,
    ModelParams,
    PsiEstimate,
    TrialDesign,
    subgroup_counts,
)
from .dist import chisq_quantile, normal_quantile
from .errors import NotUnivariate, SimulationFailed
from .gls import BatchFit, ClusterStats, fit_batch
from .power import DropoutSpec, dropout_power, power_chisq, power_wald_1d, psi_for_power
from .randomization import make_rng, sample_allocation

# fixed effects used throughout the simulation study
DEFAULT_PARAMS = ModelParams(beta1=0.15, beta2=0.25, beta3=0.1, beta4=0.0, rho=0.05)


@dataclass(frozen=True)
class Dataset:
    """Individual-level data; ``labels`` is 0 for the reference subgroup, l for subgroup l."""

    w: np.ndarray
    cluster: np.ndarray
    labels: np.ndarray
    y: np.ndarray
    p: int

    @property
    def n_clusters(self) -> int:
        return self.w.size

    @property
    def x(self) -> np.ndarray:
        return (self.labels[:, None] == np.arange(1, self.p + 1)[None, :]).astype(np.int8)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.cluster, minlength=self.n_clusters)

    def column_sums(self) -> np.ndarray:
        """Per-cluster count of each non-reference subgroup, shape (I, p)."""
        k = self.p + 1
        flat = np.bincount(self.cluster * k + self.labels, minlength=self.n_clusters * k)
        return flat.reshape(self.n_clusters, k)[:, 1:]

    def stats(self) -> ClusterStats:
        uu, n = _cross_products(self.cluster, self.labels, self.n_clusters, self.p)
        uy, yy = _outcome_products(self.cluster, self.labels, self.y, self.n_clusters, self.p)
        return ClusterStats(uu[None], uy[None], yy[None], n[None], self.w[None].astype(float))


@dataclass(frozen=True)
class _Base:
    w: np.ndarray
    cluster: np.ndarray
    labels: np.ndarray
    z_gamma: np.ndarray
    eps: np.ndarray


def _cross_products(cluster, labels, n_clusters, p):
    k = p + 1
    cnt = np.bincount(cluster * k + labels, minlength=n_clusters * k).reshape(n_clusters, k)
    n = cnt.sum(axis=1).astype(float)
    uu = np.zeros((n_clusters, k, k))
    uu[:, 0, 0] = n
    uu[:, 0, 1:] = cnt[:, 1:]
    uu[:, 1:, 0] = cnt[:, 1:]
    idx = np.arange(1, k)
    uu[:, idx, idx] = cnt[:, 1:]
    return uu, n


def _outcome_products(cluster, labels, y, n_clusters, p):
    k = p + 1
    by_label = np.bincount(cluster * k + labels, weights=y, minlength=n_clusters * k)
    by_label = by_label.reshape(n_clusters, k)
    uy = np.empty((n_clusters, k))
    uy[:, 0] = by_label.sum(axis=1)
    uy[:, 1:] = by_label[:, 1:]
    yy = np.bincount(cluster, weights=y * y, minlength=n_clusters)
    return uy, yy


def _layout(counts: np.ndarray, rng: np.random.Generator):
    """Cluster index and shuffled labels from a (I, p+1) count matrix."""
    n_clusters, k = counts.shape
    cluster = np.repeat(np.arange(n_clusters), counts.sum(axis=1))
    labels = np.repeat(np.tile(np.arange(k), n_clusters), counts.ravel())
    keys = rng.random(cluster.size)
    labels = labels[np.lexsort((keys, cluster))]
    return cluster, labels


def _fixed_counts(design: TrialDesign) -> np.ndarray:
    sub = subgroup_counts(design)
    ref = np.asarray(design.clusters.sizes) - sub.sum(axis=1)
    return np.column_stack([ref, sub])


def _integral(x: float, what: str) -> int:
    if abs(x - round(x)) > INTEGRALITY_TOL:
        raise ValueError(f"{what} = {x:g} must be an integer")
    return int(round(x))


@dataclass(frozen=True)
class _DropoutPlan:
    total: int
    target: int
    kept: int
    probs: np.ndarray


def _dropout_plan(design: TrialDesign, r: float) -> _DropoutPlan:
    DropoutSpec(r)
    if design.p != 1:
        raise NotUnivariate("the drop-out scheme is defined for one subgroup")
    total = design.clusters.total
    target = _integral(total * design.theta[0], "total * theta")
    kept = _integral(total * (1.0 - r), "total * (1 - r)")
    return _DropoutPlan(total, target, kept, design.clusters.as_array() / total)


def _draw_base(design: TrialDesign, rng: np.random.Generator, counts: np.ndarray | None,
               plan: _DropoutPlan | None) -> _Base:
    w = sample_allocation(design.clusters, design.i1, rng)
    if plan is not None:
        k_target = rng.hypergeometric(plan.target, plan.total - plan.target, plan.kept)
        mm = rng.multinomial(k_target, plan.probs)
        nn = rng.multinomial(plan.kept - k_target, plan.probs)
        counts = np.column_stack([nn, mm])
    cluster, labels = _layout(counts, rng)
    z_gamma = rng.standard_normal(design.n_clusters)
    eps = rng.standard_normal(cluster.size)
    return _Base(w, cluster, labels, z_gamma, eps)


def _outcome(base: _Base, params: ModelParams, sigma_eps: float) -> np.ndarray:
    wc = base.w[base.cluster].astype(float)
    b3 = np.r_[0.0, params.beta3][base.labels]
    b4 = np.r_[0.0, params.beta4][base.labels]
    sigma_gamma = math.sqrt(params.sigma2_gamma(sigma_eps))
    return (params.beta1 + params.beta2 * wc + b3 + b4 * wc
            + sigma_gamma * base.z_gamma[base.cluster] + sigma_eps * base.eps)


def _check_params(design: TrialDesign, params: ModelParams) -> None:
    if len(params.beta4) != design.p:
        raise ValueError(f"params have {len(params.beta4)} interaction terms for p = {design.p}")


def generate_dataset(design: TrialDesign, params: ModelParams,
                     seed: int | Sequence[int]) -> Dataset:
    """One dataset with exactly m_i theta_l members of subgroup l in cluster i."""
    _check_params(design, params)
    base = _draw_base(design, make_rng(seed), _fixed_counts(design), None)
    return Dataset(base.w, base.cluster, base.labels, _outcome(base, params, design.sigma_eps),
                   design.p)


def dropout_dataset(design: TrialDesign, params: ModelParams, r: float,
                    seed: int | Sequence[int]) -> Dataset:
    """Survivors of completely random drop-out at rate ``r`` from the planned design."""
    _check_params(design, params)
    base = _draw_base(design, make_rng(seed), None, _dropout_plan(design, r))
    return Dataset(base.w, base.cluster, base.labels, _outcome(base, params, design.sigma_eps),
                   design.p)


@dataclass(frozen=True)
class OperatingCharacteristics:
    rho: float
    esd: tuple[float, ...]
    se_bar: tuple[float, ...]
    type1: float
    power: float
    predicted: float
    replicates: int
    failed: int
    seed: int
    mean_beta4: tuple[float, ...] = field(default=())
    boundary_fits: int = 0


def _fsum_mean(x: np.ndarray) -> float:
    return math.fsum(x.tolist()) / x.size


def _esd(x: np.ndarray) -> float:
    mean = _fsum_mean(x)
    return math.sqrt(math.fsum(((x - mean) ** 2).tolist()) / (x.size - 1))


def rejections(fit: BatchFit, alpha: float) -> np.ndarray:
    """Wald test of beta4 = 0 per replicate: |b| > z se for p = 1, chi-square for p > 1."""
    b = fit.beta4
    if fit.p == 1:
        return np.abs(b[:, 0]) > normal_quantile(1.0 - alpha / 2.0) * fit.se_beta4[:, 0]
    stat = np.einsum("ri,ri->r", b, np.linalg.solve(fit.cov_beta4, b[..., None])[..., 0])
    return stat > chisq_quantile(1.0 - alpha, fit.p)


def _predicted(design: TrialDesign, params: ModelParams, psi: PsiEstimate, alpha: float,
               dropout: float | None, dropout_form: str) -> float:
    delta = np.asarray(params.beta4)
    if dropout is not None:
        return dropout_power(dropout, design.m_bar, float(delta[0]), design.subgroups,
                             design.clusters, psi, design.sigma_eps, alpha, dropout_form)
    if design.p == 1:
        return power_wald_1d(float(delta[0]), design, psi, alpha)
    return power_chisq(delta, design, psi, alpha)


def simulate_stats(design: TrialDesign, params_list: Sequence[ModelParams], replicates: int,
                   seed: int, dropout: float | None = None,
                   threads: int = 1) -> list[ClusterStats]:
    """Sufficient statistics for every parameter set, sharing the random draws.

    Replicate k of every entry of ``params_list`` uses the same allocation,
    layout and standard normal draws; only the outcome scaling differs.
    """
    for params in params_list:
        _check_params(design, params)
    counts = None if dropout is not None else _fixed_counts(design)
    plan = _dropout_plan(design, dropout) if dropout is not None else None
    n_clusters, k = design.n_clusters, design.p + 1
    n_sets = len(params_list)
    uu = np.empty((replicates, n_clusters, k, k))
    nn = np.empty((replicates, n_clusters))
    ww = np.empty((replicates, n_clusters))
    uy = np.empty((n_sets, replicates, n_clusters, k))
    yy = np.empty((n_sets, replicates, n_clusters))

    def work(block: range) -> None:
        for rep in block:
            base = _draw_base(design, make_rng((seed, rep)), counts, plan)
            uu[rep], nn[rep] = _cross_products(base.cluster, base.labels, n_clusters, design.p)
            ww[rep] = base.w
            for s, params in enumerate(params_list):
                y = _outcome(base, params, design.sigma_eps)
                uy[s, rep], yy[s, rep] = _outcome_products(base.cluster, base.labels, y,
                                                           n_clusters, design.p)

    threads = max(1, int(threads))
    step = max(1, math.ceil(replicates / threads))
    blocks = [range(a, min(a + step, replicates)) for a in range(0, replicates, step)]
    if threads == 1:
        for block in blocks:
            work(block)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, blocks))
    return [ClusterStats(uu, uy[s], yy[s], nn, ww) for s in range(n_sets)]


def operating_characteristics_sweep(design: TrialDesign, params: ModelParams,
                                    rhos: Sequence[float], replicates: int, seed: int,
                                    alpha: float = 0.05, dropout: float | None = None,
                                    threads: int = 1, psi: PsiEstimate | None = None,
                                    dropout_form: str = "literal"
                                    ) -> list[OperatingCharacteristics]:
    """Operating characteristics at each ICC in ``rhos`` on common random numbers.

    Every replicate is simulated twice, with beta4 = 0 (type-I error) and with
    ``params.beta4`` (power, ESD, mean SE); the same draws are reused across
    ICCs.
    """
    if replicates < 2:
        raise ValueError("need at least 2 replicates")
    null = params.with_beta4([0.0] * design.p)
    has_alt = any(b != 0.0 for b in params.beta4)
    sets = []
    for rho in rhos:
        sets.append(null.with_rho(rho))
        if has_alt:
            sets.append(params.with_rho(rho))
    stats = simulate_stats(design, sets, replicates, seed, dropout, threads)
    if psi is None:
        psi = psi_for_power(design)
    predicted = (_predicted(design, params, psi, alpha, dropout, dropout_form) if has_alt
                 else alpha)
    out = []
    per_rho = 2 if has_alt else 1
    for i, rho in enumerate(rhos):
        fit_null = fit_batch(stats[per_rho * i])
        fit_alt = fit_batch(stats[per_rho * i + 1]) if has_alt else fit_null
        ok = ~(fit_null.failed | fit_alt.failed)
        if not ok.any():
            raise SimulationFailed(f"all {replicates} replicates failed at rho = {rho}")
        b4 = fit_alt.beta4[ok]
        se = fit_alt.se_beta4[ok]
        out.append(OperatingCharacteristics(
            rho=float(rho),
            esd=tuple(_esd(b4[:, l]) for l in range(design.p)),
            se_bar=tuple(_fsum_mean(se[:, l]) for l in range(design.p)),
            type1=float(rejections(fit_null, alpha)[ok].mean()),
            power=float(rejections(fit_alt, alpha)[ok].mean()),
            predicted=float(predicted),
            replicates=int(ok.sum()),
            failed=int((~ok).sum()),
            seed=seed,
            mean_beta4=tuple(_fsum_mean(b4[:, l]) for l in range(design.p)),
            boundary_fits=int((~fit_alt.converged[ok]).sum()),
        ))
    return out


def operating_characteristics(design: TrialDesign, params: ModelParams, replicates: int,
                              alpha: float = 0.05, seed: int = 0, dropout: float | None = None,
                              threads: int = 1, psi: PsiEstimate | None = None,
                              dropout_form: str = "literal") -> OperatingCharacteristics:
    return operating_characteristics_sweep(design, params, [params.rho], replicates, seed,
                                           alpha, dropout, threads, psi, dropout_form)[0]
