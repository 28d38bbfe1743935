"""Hypothesis tests for the shared/individual factor structure.

Two procedures operate on the two-step fit:

* a sequential test for the number of covariate-only factors, based on the
  changing ratio of gaps between eigenvalues of the residual covariance,
  calibrated against a simulated Gaussian null (parametric bootstrap); and
* per-column sum-of-squares tests on the network-factor loadings deciding,
  for each network factor, whether it also drives the covariates.  Their
  thresholds come either from the asymptotic normal law or (default) from
  row permutations of the covariate matrix, and a Fisher combination gives
  a global p-value.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2, norm

from .embedding import fit_network, select_embedding_dim
from .errors import NetfactorError, NetfactorWarning, ParameterError
from .factors import (
    FactorFit,
    em_factor_fit,
    estimate_mean,
    factor_scores,
    masked_column_means,
    masked_regress_loadings,
    regress_loadings,
    residual_matrix,
)
from .model import FactorDims
from .utils import STAGE_NULL_DRAWS, STAGE_PERMUTATIONS, parallel_map, substream_rng
from .validation import as_matrix, as_vector, check_consistent_nodes

DEFAULT_KMAX = 8
DEFAULT_NULL_DRAWS = 1000
DEFAULT_PERMUTATIONS = 500


@dataclass
class TestReport:
    """Statistics, p-values and selected dimensions of the inference step.

    k3_stats rows are (l, ratio, p_value, rejected) for each tested level;
    column_stats rows are (l, statistic, normal_p, threshold, shared).
    """

    d: int
    k1: int
    k2: int
    k3: int
    kmax: int
    alpha_level: float
    k3_stats: list = field(default_factory=list)
    column_stats: list = field(default_factory=list)
    fisher_p: float = None
    split_method: str = "permutation"
    n_null_draws: int = 0
    n_permutations: int = 0
    seed: int = 0
    notes: list = field(default_factory=list)

    def __post_init__(self):
        if self.k1 + self.k2 != self.d:
            raise ParameterError("k1 + k2 must equal d")
        if self.k3 > self.kmax:
            raise ParameterError("k3 cannot exceed kmax")
        for row in self.k3_stats:
            if not 0.0 <= row[2] <= 1.0:
                raise ParameterError("p-values must lie in [0, 1]")
        for row in self.column_stats:
            if not 0.0 <= row[2] <= 1.0:
                raise ParameterError("p-values must lie in [0, 1]")


def eigen_ratio_from_spectrum(phi, l, kmax):
    """Gap-ratio statistic from a descending eigenvalue sequence.

    phi[l] is the (l+1)-th largest eigenvalue; the statistic is
    (phi[l] - phi[kmax+1]) / (phi[kmax+1] - phi[kmax+2]).  A denominator
    within 1e-14 of zero returns +inf with a warning.
    """
    phi = as_vector(phi, "phi")
    if l > kmax:
        raise ParameterError("l must be at most kmax")
    if phi.shape[0] < kmax + 3:
        raise ParameterError(f"need at least kmax + 3 = {kmax + 3} eigenvalues")
    denom = phi[kmax + 1] - phi[kmax + 2]
    if denom <= 1e-14 * max(abs(phi[0]), 1.0):
        warnings.warn(
            "eigenvalue gap in the ratio denominator is numerically zero",
            NetfactorWarning,
            stacklevel=2,
        )
        return float("inf")
    return float((phi[l] - phi[kmax + 1]) / denom)


def _covariance_spectrum(R, top=None):
    """Descending eigenvalues of R^T R / n (sample covariance, divisor n)."""
    R = as_matrix(R, "R")
    n = R.shape[0]
    C = R.T @ R / n
    phi = np.linalg.eigvalsh(C)[::-1]
    return phi if top is None else phi[:top]


def eigen_ratio_statistic(R, l, kmax):
    """Gap-ratio statistic of the residual covariance spectrum."""
    R = as_matrix(R, "R")
    n, p = R.shape
    if kmax + 3 > min(n, p):
        raise ParameterError(f"kmax + 3 must be at most min(n, p) = {min(n, p)}")
    return eigen_ratio_from_spectrum(_covariance_spectrum(R, kmax + 3), l, kmax)


def _fixed_projection_basis(n, d):
    """Deterministic orthonormal basis of a (1 + d)-dimensional space.

    The constant vector plus the first d cosine profiles, mirroring the
    centering plus factor-regression residualization of the real fit.
    """
    idx = np.arange(n)
    cols = [np.full(n, 1.0 / np.sqrt(n))]
    for k in range(1, d + 1):
        v = np.cos(np.pi * k * (2 * idx + 1) / (2 * n))
        cols.append(v / np.linalg.norm(v))
    return np.column_stack(cols)


def simulate_null_spectra(n, p, psi, kmax, M, seed, d=0, threads=1):
    """Top kmax + 3 eigenvalues of M simulated null residual covariances.

    Each draw is an (n, p) Gaussian noise matrix with column variances psi,
    residualized against a fixed (1 + d)-dimensional column space, with the
    spectrum of its divisor-n covariance recorded.  Draw m uses the RNG
    substream (seed, null-stage, m), so the result is independent of
    execution order and thread count.
    """
    psi = as_vector(psi, "psi")
    if psi.shape[0] != p:
        raise ParameterError("psi must have length p")
    if kmax + 3 > min(n, p):
        raise ParameterError(f"kmax + 3 must be at most min(n, p) = {min(n, p)}")
    basis = _fixed_projection_basis(n, d)
    sigma = np.sqrt(psi)

    def one(m):
        rng = substream_rng(seed, STAGE_NULL_DRAWS, m)
        E = rng.standard_normal((n, p)) * sigma
        E -= basis @ (basis.T @ E)
        C = E.T @ E / n
        return np.linalg.eigvalsh(C)[::-1][: kmax + 3]

    return np.asarray(parallel_map(one, range(M), threads))


def simulate_null_ratios(n, p, psi, l, kmax, M, seed, d=0, threads=1, spectra=None):
    """Simulated null sample of the gap-ratio statistic at level l."""
    if M < 200:
        raise ParameterError("need at least 200 null draws")
    if spectra is None:
        spectra = simulate_null_spectra(n, p, psi, kmax, M, seed, d=d, threads=threads)
    return np.array([eigen_ratio_from_spectrum(row, l, kmax) for row in spectra])


def empirical_upper_pvalue(observed, null_sample):
    """Upper-tail empirical p-value with the +1/(M+1) correction."""
    null_sample = np.asarray(null_sample)
    return float((1 + np.count_nonzero(null_sample >= observed)) / (null_sample.size + 1))


def sequential_k3_test(
    R,
    kmax=DEFAULT_KMAX,
    alpha_level=0.05,
    M=DEFAULT_NULL_DRAWS,
    seed=0,
    d=0,
    psi=None,
    threads=1,
):
    """Sequential gap-ratio tests selecting the covariate-only factor count.

    Starting at l = 0, the hypothesis of exactly l extra factors is rejected
    when the observed ratio exceeds the (1 - alpha) quantile of the
    simulated null; the first accepted l is returned (kmax if every level is
    rejected).  Returns (k3, rows) with one (l, ratio, p_value, rejected)
    row per tested level.
    """
    R = as_matrix(R, "R")
    n, p = R.shape
    if psi is None:
        psi = np.sum(R * R, axis=0) / n
    phi_obs = _covariance_spectrum(R, kmax + 3)
    spectra = simulate_null_spectra(n, p, psi, kmax, M, seed, d=d, threads=threads)
    rows = []
    k3 = kmax
    for l in range(kmax):
        obs = eigen_ratio_from_spectrum(phi_obs, l, kmax)
        null = np.array([eigen_ratio_from_spectrum(s, l, kmax) for s in spectra])
        threshold = float(np.quantile(null, 1.0 - alpha_level))
        pval = empirical_upper_pvalue(obs, null)
        rejected = bool(obs > threshold)
        rows.append((l, obs, pval, rejected))
        if not rejected:
            k3 = l
            break
    return k3, rows


def column_test_statistic(loadings12, Z, psi, l):
    """Standardized sum-of-squares statistic for the l-th loading column."""
    return float(column_test_statistics(loadings12, Z, psi)[l])


def column_test_statistics(loadings12, Z, psi):
    """Vector of column statistics: sum_j (n lam_jl^2 - V_jl) / sqrt(2 sum_j V_jl^2)."""
    lam = as_matrix(loadings12, "loadings12")
    Z = as_matrix(Z, "Z")
    psi = as_vector(psi, "psi")
    n = Z.shape[0]
    M = Z.T @ Z / n
    try:
        Minv = np.linalg.inv(M)
    except np.linalg.LinAlgError as exc:
        from .errors import DegeneracyError

        raise DegeneracyError("factor Gram matrix is singular") from exc
    V = np.outer(psi, np.diag(Minv))  # (p, d) plug-in variances of sqrt(n) lam
    num = np.sum(n * lam * lam - V, axis=0)
    den = np.sqrt(2.0 * np.sum(V * V, axis=0))
    return num / den


def fisher_global_test(pvals):
    """Fisher combination: chi-square upper tail of -2 sum log p."""
    pvals = as_vector(pvals, "pvals")
    if np.any(pvals > 1.0) or np.any(pvals < 0.0):
        raise ParameterError("p-values must lie in [0, 1]")
    if np.any(pvals == 0.0):
        warnings.warn("zero p-value floored at 1e-300", NetfactorWarning, stacklevel=2)
        pvals = np.maximum(pvals, 1e-300)
    stat = -2.0 * float(np.sum(np.log(pvals)))
    return float(chi2.sf(stat, 2 * pvals.size))


def _split_statistics(Yc, Z, solver):
    """Observed-recipe column statistics for a (possibly permuted) Y.

    Loadings come from the precomputed normal-equations solver; the noise
    variances are the residual column mean squares, so permuted and observed
    statistics are exchangeable under the global null.
    """
    coef = (solver @ Yc).T
    resid = Yc - Z @ coef.T
    psi = np.sum(resid * resid, axis=0) / Yc.shape[0]
    return column_test_statistics(coef, Z, psi)


def permutation_split(
    Ycentered,
    Z,
    B=DEFAULT_PERMUTATIONS,
    alpha_level=0.05,
    seed=0,
    threads=1,
):
    """Classify each network factor as shared or network-only by permutation.

    Row permutations of Y break the factor/covariate link; each column's
    threshold is the (1 - alpha) empirical quantile of its permuted
    statistics.  Returns (k1, k2, rows, thresholds) where rows are
    (l, statistic, normal_p, threshold, shared).
    """
    if B < 100:
        raise ParameterError("need at least 100 permutations")
    Yc = as_matrix(Ycentered, "Y")
    Yc = Yc - Yc.mean(axis=0)
    Z = as_matrix(Z, "Z")
    n, d = Z.shape
    gram = Z.T @ Z
    solver = np.linalg.solve(gram, Z.T)  # (d, n) normal-equations solver
    observed = _split_statistics(Yc, Z, solver)

    def one(b):
        rng = substream_rng(seed, STAGE_PERMUTATIONS, b)
        perm = rng.permutation(n)
        return _split_statistics(Yc[perm], Z, solver)

    perm_stats = np.asarray(parallel_map(one, range(B), threads))
    thresholds = np.quantile(perm_stats, 1.0 - alpha_level, axis=0)
    shared = observed > thresholds
    normal_p = norm.sf(observed)
    rows = [
        (l, float(observed[l]), float(normal_p[l]), float(thresholds[l]), bool(shared[l]))
        for l in range(d)
    ]
    k2 = int(np.count_nonzero(shared))
    return d - k2, k2, rows, thresholds


def normal_split(loadings12, Z, psi, alpha_level=0.05):
    """Asymptotic-threshold variant of the shared/network-only split."""
    stats = column_test_statistics(loadings12, Z, psi)
    zq = norm.ppf(1.0 - alpha_level)
    normal_p = norm.sf(stats)
    rows = [
        (l, float(stats[l]), float(normal_p[l]), float(zq), bool(stats[l] > zq))
        for l in range(stats.size)
    ]
    k2 = int(np.count_nonzero(stats > zq))
    return stats.size - k2, k2, rows, np.full(stats.size, zq)


def fit_generalized_factor_model(
    A,
    Y,
    dims="auto",
    d=None,
    dmax=None,
    kmax=DEFAULT_KMAX,
    alpha_level=0.05,
    n_null_draws=DEFAULT_NULL_DRAWS,
    n_permutations=DEFAULT_PERMUTATIONS,
    use_permutation_split=True,
    em_max_iter=1000,
    em_tol=1e-8,
    seed=0,
    threads=1,
    mask=None,
):
    """Full two-step estimation and inference pipeline.

    dims may be "auto" (select the embedding dimension, then test for the
    factor split and count) or an explicit (k1, k2, k3), which pins all
    three and skips the corresponding tests.  Returns
    (NetworkFit, FactorFit, TestReport).  If a stage fails, the raised error
    carries the stages completed so far in its ``partial`` attribute.
    """
    Y = as_matrix(Y, "Y")
    n = check_consistent_nodes(A, Y)
    pinned = None
    if dims is not None and dims != "auto":
        pinned = dims if isinstance(dims, FactorDims) else FactorDims(*dims)

    partial = {}
    try:
        if pinned is not None:
            use_d = pinned.d
        elif d is not None:
            use_d = int(d)
        else:
            limit = dmax if dmax is not None else max(2, min(n // 10, 50))
            use_d = select_embedding_dim(A, limit)
        net = fit_network(A, use_d)
        partial["network_fit"] = net
        Z = net.factors

        if mask is None:
            mu = estimate_mean(Y)
            Yc = Y - mu
            coef = regress_loadings(Yc, Z)
            R = residual_matrix(Yc, Z)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != Y.shape:
                raise ParameterError("mask must have the same shape as Y")
            mu, _ = masked_column_means(Y, mask)
            Yc = np.where(mask, 0.0, Y - mu)
            coef = masked_regress_loadings(Y - mu, Z, mask)
            R = np.where(mask, 0.0, Y - mu - Z @ coef.T)

        if pinned is not None:
            k3 = pinned.k3
            k3_rows = []
        else:
            k3, k3_rows = sequential_k3_test(
                R,
                kmax=kmax,
                alpha_level=alpha_level,
                M=n_null_draws,
                seed=seed,
                d=use_d,
                threads=threads,
            )
        lam3, psi, trace, floors = em_factor_fit(
            R, k3, max_iter=em_max_iter, tol=em_tol
        )
        scores3 = factor_scores(R, lam3, psi)
        fac = FactorFit(
            mu=mu,
            loadings12=coef,
            loadings3=lam3,
            scores3=scores3,
            psi=psi,
            residuals=R,
            em_trace=trace,
            psi_floor_count=floors,
        )
        partial["factor_fit"] = fac

        if pinned is not None:
            k1, k2 = pinned.k1, pinned.k2
            col_rows, fisher_p, method = [], None, "pinned"
        elif use_permutation_split:
            k1, k2, col_rows, _ = permutation_split(
                Yc, Z, B=n_permutations, alpha_level=alpha_level,
                seed=seed, threads=threads,
            )
            fisher_p = fisher_global_test([row[2] for row in col_rows])
            method = "permutation"
        else:
            k1, k2, col_rows, _ = normal_split(coef, Z, psi, alpha_level=alpha_level)
            fisher_p = fisher_global_test([row[2] for row in col_rows])
            method = "normal"

        report = TestReport(
            d=use_d,
            k1=k1,
            k2=k2,
            k3=k3,
            kmax=kmax,
            alpha_level=alpha_level,
            k3_stats=k3_rows,
            column_stats=col_rows,
            fisher_p=fisher_p,
            split_method=method,
            n_null_draws=0 if pinned is not None else n_null_draws,
            n_permutations=0 if pinned is not None else n_permutations,
            seed=seed,
            notes=list(net.warnings),
        )
        return net, fac, report
    except NetfactorError as exc:
        if exc.partial is None:
            exc.partial = partial
        raise
