"""Closed-form GLS for the random-intercept model and profile ML over the ICC.

Each cluster is summarised by U'U, U'Y, Y'Y and its size, with U = [1, X].
With R(rho) = (1-rho) I + rho J the inverse is rank-one,
R^{-1} = (I - rho d J) / (1-rho), d = 1/(1-rho+m rho), so every cross-product
needed by GLS is a small correction of the unweighted one. No m x m matrix is
ever formed.

Arrays carry a leading replicate axis so thousands of simulated datasets are
fitted together; the coefficient order inside this module is
[beta1, beta3, beta2, beta4] (columns U then W*U) and is reordered to
[beta1, beta2, beta3, beta4] on output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import SingularInformation

RHO_UPPER = 0.9999
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_GRID = np.array([0.0, 0.01, 0.025, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7,
                  0.8, 0.9, 0.95, 0.98, 0.99, 0.995, 0.999, RHO_UPPER])
_COND_LIMIT = 1e12


@dataclass
class ClusterStats:
    """Per-cluster sufficient statistics, shape (R, I, ...)."""

    uu: np.ndarray  # (R, I, k, k)
    uy: np.ndarray  # (R, I, k)
    yy: np.ndarray  # (R, I)
    n: np.ndarray  # (R, I)
    w: np.ndarray  # (R, I)

    @property
    def replicates(self) -> int:
        return self.uu.shape[0]

    @property
    def k(self) -> int:
        return self.uu.shape[-1]

    def subset(self, mask: np.ndarray) -> ClusterStats:
        return ClusterStats(self.uu[mask], self.uy[mask], self.yy[mask], self.n[mask], self.w[mask])


@dataclass
class FitResult:
    beta_hat: np.ndarray
    cov: np.ndarray
    se_beta4: np.ndarray
    rho_hat: float
    sigma2_y_hat: float
    loglik: float
    converged: bool

    @property
    def beta4(self) -> np.ndarray:
        p = self.se_beta4.size
        return self.beta_hat[-p:]


@dataclass
class BatchFit:
    """Vectorised fit results; rows with ``failed`` set hold NaN."""

    beta_hat: np.ndarray  # (R, 2k)
    cov: np.ndarray  # (R, 2k, 2k)
    rho_hat: np.ndarray
    sigma2_y_hat: np.ndarray
    loglik: np.ndarray
    converged: np.ndarray
    failed: np.ndarray

    @property
    def p(self) -> int:
        return (self.beta_hat.shape[1] - 2) // 2

    @property
    def beta4(self) -> np.ndarray:
        return self.beta_hat[:, -self.p:]

    @property
    def cov_beta4(self) -> np.ndarray:
        p = self.p
        return self.cov[:, -p:, -p:]

    @property
    def se_beta4(self) -> np.ndarray:
        return np.sqrt(np.diagonal(self.cov_beta4, axis1=1, axis2=2))

    def item(self, r: int) -> FitResult:
        return FitResult(self.beta_hat[r], self.cov[r], self.se_beta4[r], float(self.rho_hat[r]),
                         float(self.sigma2_y_hat[r]), float(self.loglik[r]),
                         bool(self.converged[r]))


def output_order(k: int) -> np.ndarray:
    """Permutation from [1, X, W, WX] columns to [beta1, beta2, beta3, beta4]."""
    return np.r_[0, k, 1:k, k + 1:2 * k]


def _blocks(stats: ClusterStats, rho: np.ndarray):
    rho = np.asarray(rho, dtype=float).reshape(-1, 1)
    d = 1.0 / (1.0 - rho + stats.n * rho)
    c = rho * d  # (R, I)
    u1 = stats.uu[..., 0, :]  # U'1, (R, I, k)
    sy = stats.uy[..., 0]
    g_mat = stats.uu - c[..., None, None] * u1[..., :, None] * u1[..., None, :]
    g_vec = stats.uy - c[..., None] * u1 * sy[..., None]
    h = stats.yy - c * sy**2
    w = stats.w
    scale = 1.0 / (1.0 - rho[:, 0])
    a = g_mat.sum(axis=1)
    aw = (w[..., None, None] * g_mat).sum(axis=1)
    info = np.block([[a, aw], [aw, aw]]) * scale[:, None, None]
    rhs = np.concatenate([g_vec.sum(axis=1), (w[..., None] * g_vec).sum(axis=1)], axis=1)
    rhs *= scale[:, None]
    yry = h.sum(axis=1) * scale
    logdet = ((stats.n - 1.0) * np.log1p(-rho) + np.log(1.0 - rho + stats.n * rho)).sum(axis=1)
    return info, rhs, yry, logdet


def _profile(stats: ClusterStats, rho: np.ndarray):
    info, rhs, yry, logdet = _blocks(stats, rho)
    beta = np.linalg.solve(info, rhs[..., None])[..., 0]
    q = yry - np.einsum("ri,ri->r", rhs, beta)
    n_obs = stats.n.sum(axis=1)
    sigma2 = np.maximum(q, 1e-300) / n_obs
    ll = -0.5 * (n_obs * np.log(2.0 * math.pi * sigma2) + n_obs + logdet)
    return ll, beta, info, sigma2


def singular_mask(stats: ClusterStats) -> np.ndarray:
    """Replicates whose stacked design [1, X, W, WX] is rank deficient."""
    info = _blocks(stats, np.zeros(stats.replicates))[0]
    return ~(np.linalg.cond(info) < _COND_LIMIT)


def profile_loglik(stats: ClusterStats, rho: float | np.ndarray) -> np.ndarray:
    rho_arr = np.broadcast_to(np.asarray(rho, dtype=float), (stats.replicates,))
    return _profile(stats, rho_arr)[0]


def _finish(stats: ClusterStats, rho: np.ndarray, converged: np.ndarray) -> BatchFit:
    ll, beta, info, sigma2 = _profile(stats, rho)
    cov = sigma2[:, None, None] * np.linalg.inv(info)
    order = output_order(stats.k)
    return BatchFit(beta[:, order], cov[:, order][:, :, order], rho, sigma2, ll, converged,
                    np.zeros(stats.replicates, dtype=bool))


def gls_batch(stats: ClusterStats, rho: float | np.ndarray) -> BatchFit:
    """GLS at a fixed ICC for every replicate."""
    rho_arr = np.array(np.broadcast_to(np.asarray(rho, dtype=float), (stats.replicates,)))
    bad = singular_mask(stats)
    if bad.any():
        raise SingularInformation(f"{int(bad.sum())} replicate(s) have a collinear design")
    return _finish(stats, rho_arr, np.ones(stats.replicates, dtype=bool))


def fit_batch(stats: ClusterStats, tol: float = 1e-8, upper: float = RHO_UPPER) -> BatchFit:
    """Profile ML over rho in [0, upper] for every replicate.

    A coarse grid picks the bracket around the best grid point, golden-section
    search refines it to ``tol``, and the better of the refined point and the
    best grid point is kept. Singular replicates are flagged and left as NaN.
    """
    r_total = stats.replicates
    bad = singular_mask(stats)
    good = np.flatnonzero(~bad)
    out_beta = np.full((r_total, 2 * stats.k), np.nan)
    out_cov = np.full((r_total, 2 * stats.k, 2 * stats.k), np.nan)
    out = BatchFit(out_beta, out_cov, np.full(r_total, np.nan), np.full(r_total, np.nan),
                   np.full(r_total, np.nan), np.zeros(r_total, dtype=bool), bad.copy())
    if good.size == 0:
        return out
    sub = stats.subset(good)
    r = sub.replicates
    grid = _GRID[_GRID <= upper]
    grid_ll = np.stack([profile_loglik(sub, g) for g in grid], axis=1)
    j = np.argmax(grid_ll, axis=1)
    lo = grid[np.maximum(j - 1, 0)]
    hi = grid[np.minimum(j + 1, grid.size - 1)]
    x1 = hi - _GOLDEN * (hi - lo)
    x2 = lo + _GOLDEN * (hi - lo)
    f1, f2 = profile_loglik(sub, x1), profile_loglik(sub, x2)
    while np.max(hi - lo) > tol:
        left = f1 >= f2
        hi = np.where(left, x2, hi)
        lo = np.where(left, lo, x1)
        x1, x2 = (np.where(left, hi - _GOLDEN * (hi - lo), x2),
                  np.where(left, x1, lo + _GOLDEN * (hi - lo)))
        fp = profile_loglik(sub, np.where(left, x1, x2))
        f1, f2 = np.where(left, fp, f2), np.where(left, f1, fp)
    rho_star = np.clip(0.5 * (lo + hi), 0.0, upper)
    ll_star = profile_loglik(sub, rho_star)
    best_grid = grid[j]
    use_grid = grid_ll[np.arange(r), j] > ll_star
    rho_hat = np.where(use_grid, best_grid, rho_star)
    interior = (rho_hat > 10.0 * tol) & (rho_hat < upper - 10.0 * tol)
    fit = _finish(sub, rho_hat, interior)
    out.beta_hat[good] = fit.beta_hat
    out.cov[good] = fit.cov
    out.rho_hat[good] = fit.rho_hat
    out.sigma2_y_hat[good] = fit.sigma2_y_hat
    out.loglik[good] = fit.loglik
    out.converged[good] = fit.converged
    return out


def information_matrix(uu: np.ndarray, n: np.ndarray, w: np.ndarray, rho: float) -> np.ndarray:
    """sum_i Z_i' R_i(rho)^{-1} Z_i for one design, columns [1, X, W, WX]."""
    yy = np.zeros(n.shape)
    uy = np.zeros(uu.shape[:-1])
    stats = ClusterStats(uu[None], uy[None], yy[None], n[None].astype(float), w[None].astype(float))
    return _blocks(stats, np.array([rho]))[0][0]


def design_cross_products(sizes: Sequence[int], counts: np.ndarray) -> np.ndarray:
    """U_i'U_i for clusters with ``counts[i, l]`` members in subgroup l (one-hot X)."""
    m = np.asarray(sizes, dtype=float)
    c = np.asarray(counts, dtype=float).reshape(m.size, -1)
    k = c.shape[1] + 1
    uu = np.zeros((m.size, k, k))
    uu[:, 0, 0] = m
    uu[:, 0, 1:] = c
    uu[:, 1:, 0] = c
    idx = np.arange(1, k)
    uu[:, idx, idx] = c
    return uu


def beta4_variance_from_information(sizes: Sequence[int], counts: np.ndarray,
                                    w: Sequence[int], rho: float, sigma_eps: float) -> np.ndarray:
    """sigma_{y|x}^2 times the beta4 block of the inverse information matrix."""
    uu = design_cross_products(sizes, counts)
    info = information_matrix(uu, np.asarray(sizes, dtype=float), np.asarray(w, dtype=float), rho)
    p = uu.shape[-1] - 1
    return sigma_eps**2 / (1.0 - rho) * np.linalg.inv(info)[-p:, -p:]


def _fraction_inverse(a: list[list[Fraction]]) -> list[list[Fraction]]:
    n = len(a)
    aug = [row[:] + [Fraction(int(i == j)) for j in range(n)] for i, row in enumerate(a)]
    for col in range(n):
        pivot = next((r for r in range(col, n) if aug[r][col] != 0), None)
        if pivot is None:
            raise SingularInformation("information matrix is singular")
        aug[col], aug[pivot] = aug[pivot], aug[col]
        inv_p = 1 / aug[col][col]
        aug[col] = [v * inv_p for v in aug[col]]
        for r in range(n):
            if r != col and aug[r][col] != 0:
                f = aug[r][col]
                aug[r] = [vr - f * vc for vr, vc in zip(aug[r], aug[col])]
    return [row[n:] for row in aug]


def beta4_variance_exact(sizes: Sequence[int], counts: Sequence[Sequence[int]],
                         w: Sequence[int], rho: Fraction,
                         sigma2_eps: Fraction = Fraction(1)) -> list[list[Fraction]]:
    """Exact rational version of :func:`beta4_variance_from_information`."""
    rho = Fraction(rho)
    k = len(counts[0]) + 1
    dim = 2 * k
    info = [[Fraction(0)] * dim for _ in range(dim)]
    for m, c, wi in zip(sizes, counts, w):
        u1 = [Fraction(m)] + [Fraction(v) for v in c]
        uu = [[Fraction(0)] * k for _ in range(k)]
        uu[0] = u1[:]
        for l in range(1, k):
            uu[l][0] = u1[l]
            uu[l][l] = u1[l]
        cr = rho / (1 - rho + m * rho)
        g = [[(uu[a][b] - cr * u1[a] * u1[b]) / (1 - rho) for b in range(k)] for a in range(k)]
        for a in range(k):
            for b in range(k):
                info[a][b] += g[a][b]
                if wi:
                    info[a][k + b] += g[a][b]
                    info[k + a][b] += g[a][b]
                    info[k + a][k + b] += g[a][b]
    inv = _fraction_inverse(info)
    p = k - 1
    scale = sigma2_eps / (1 - rho)
    return [[scale * inv[dim - p + a][dim - p + b] for b in range(p)] for a in range(p)]


def _single(data) -> ClusterStats:
    return data.stats() if hasattr(data, "stats") else data


def gls_given_rho(data, rho: float) -> FitResult:
    """GLS at a fixed ICC with the ML residual scale at that ICC."""
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    return gls_batch(_single(data), rho).item(0)


def fit_lmm(data, tol: float = 1e-8) -> FitResult:
    """Maximum likelihood fit of the random-intercept model (rho profiled out)."""
    fit = fit_batch(_single(data), tol=tol)
    if fit.failed[0]:
        raise SingularInformation("the stacked design [1, X, W, WX] is rank deficient")
    return fit.item(0)
