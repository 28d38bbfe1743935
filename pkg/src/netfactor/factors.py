"""Covariate factor model: loading regression, residual EM fit, scores.

Given the estimated network factors Z12, the covariate model is fitted by
OLS of the centered covariates on Z12; the residual matrix then carries the
covariate-only factor structure, which is estimated by an EM fit of a
low-rank-plus-diagonal covariance (quasi log-likelihood
p^-1 {ln|Sigma| + tr(M Sigma^-1)} with Sigma = Lambda Lambda^T + diag(Psi)).
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import DataWarning, DegeneracyError, NumericError, ParameterError
from .utils import check_distinct, eigh_descending, fix_column_signs_max_abs
from .validation import as_matrix, as_vector

EM_MAX_ITER = 1000
EM_TOL = 1e-8
PSI_FLOOR = 1e-6


@dataclass
class FactorFit:
    """Outputs of the covariate estimation step.

    mu : (p,) covariate means
    loadings12 : (p, d) loadings on the network factors
    loadings3 : (p, k3) loadings on the covariate-only factors
    scores3 : (n, k3) covariate-only factor scores
    psi : (p,) noise variance estimates (strictly positive)
    residuals : (n, p) residual matrix after the network-factor regression
    em_trace : per-iteration quasi log-likelihood values (minimized)
    rotation : optional orthogonal matrix applied to loadings12 post hoc
    psi_floor_count : how many times an EM update hit the variance floor
    """

    mu: np.ndarray
    loadings12: np.ndarray
    loadings3: np.ndarray
    scores3: np.ndarray
    psi: np.ndarray
    residuals: np.ndarray
    em_trace: list = field(default_factory=list)
    rotation: np.ndarray = None
    psi_floor_count: int = 0

    @property
    def k3(self):
        return self.loadings3.shape[1]


def estimate_mean(Y):
    """Column means of the covariate matrix."""
    return as_matrix(Y, "Y").mean(axis=0)


def _solve_gram(Z, rhs):
    """Solve (Z^T Z) x = rhs through a Cholesky factorization."""
    import scipy.linalg

    gram = Z.T @ Z
    try:
        c, low = scipy.linalg.cho_factor(gram)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError("factor Gram matrix is not positive definite") from exc
    except scipy.linalg.LinAlgError as exc:  # pragma: no cover - alias in scipy
        raise DegeneracyError("factor Gram matrix is not positive definite") from exc
    return scipy.linalg.cho_solve((c, low), rhs)


def regress_loadings(Ycentered, Z):
    """OLS loadings: the (p, d) solution of (Z^T Z) Lambda^T = Z^T Y."""
    Y = as_matrix(Ycentered, "Y")
    Z = as_matrix(Z, "Z")
    if Y.shape[0] != Z.shape[0]:
        raise ParameterError("Y and Z must have the same number of rows")
    s = np.linalg.svd(Z, compute_uv=False)
    if s.size == 0 or s[0] == 0.0 or s[-1] <= 1e-10 * s[0]:
        raise DegeneracyError("factor matrix is column-rank deficient")
    return _solve_gram(Z, Z.T @ Y).T


def loading_variance(Z, psi, j):
    """Plug-in covariance of the j-th loading row: (Z^T Z / n)^-1 psi_j / n."""
    Z = as_matrix(Z, "Z")
    psi = as_vector(psi, "psi")
    n = Z.shape[0]
    M = Z.T @ Z / n
    try:
        Minv = np.linalg.inv(M)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError("factor Gram matrix is singular") from exc
    return Minv * psi[j] / n


def residual_matrix(Ycentered, Z):
    """Residuals (I - P_1 - P_Z) Y of the network-factor regression."""
    Y = as_matrix(Ycentered, "Y")
    Z = as_matrix(Z, "Z")
    coef = regress_loadings(Y, Z)
    return Y - Y.mean(axis=0) - Z @ coef.T


def _em_objective(M, lam, psi):
    """p^-1 {ln|Sigma| + tr(M Sigma^-1)} with Sigma = lam lam^T + diag(psi)."""
    p = M.shape[0]
    psi_inv_lam = lam / psi[:, None]
    G = np.eye(lam.shape[1]) + lam.T @ psi_inv_lam
    sign, logdet_G = np.linalg.slogdet(G)
    if sign <= 0:
        raise NumericError("EM covariance has a non-positive determinant")
    logdet = float(np.sum(np.log(psi)) + logdet_G)
    inner = psi_inv_lam.T @ M @ psi_inv_lam
    trace_term = float(np.sum(np.diag(M) / psi) - np.trace(np.linalg.solve(G, inner)))
    return (logdet + trace_term) / p


def em_factor_fit(R, k3, max_iter=EM_MAX_ITER, tol=EM_TOL, psi_floor=PSI_FLOOR):
    """Low-rank-plus-diagonal covariance fit of the residual matrix.

    Returns (loadings3, psi, trace, floor_count).  With k3 = 0 the noise
    variances are the diagonal of the sample covariance of R (divisor n) and
    no EM runs.  Otherwise EM starts from a principal-components solution
    and, at convergence, the loadings are rotated so
    loadings^T diag(1/psi) loadings / p is diagonal descending, sign-fixed.
    """
    R = as_matrix(R, "R")
    n, p = R.shape
    if k3 < 0:
        raise ParameterError("k3 must be nonnegative")
    M = R.T @ R / n
    diag_M = np.diag(M).copy()
    if k3 == 0:
        return np.zeros((p, 0)), diag_M.copy(), [], 0
    if k3 >= min(n, p):
        raise ParameterError(f"k3 must be below min(n, p) = {min(n, p)}")

    vals, vecs = eigh_descending(M)
    resid_level = float(vals[k3:].mean()) if p > k3 else 0.0
    lam = vecs[:, :k3] * np.sqrt(np.maximum(vals[:k3] - resid_level, 1e-12))
    psi = np.maximum(diag_M - np.sum(lam * lam, axis=1), psi_floor)

    floor_count = 0
    trace = [_em_objective(M, lam, psi)]
    eye = np.eye(k3)
    for _ in range(max_iter):
        psi_inv_lam = lam / psi[:, None]
        G = eye + lam.T @ psi_inv_lam
        beta = np.linalg.solve(G, psi_inv_lam.T)  # Lambda^T Sigma^-1
        MB = M @ beta.T
        Czz = eye - beta @ lam + beta @ MB
        try:
            lam = np.linalg.solve(Czz.T, MB.T).T
        except np.linalg.LinAlgError as exc:
            raise NumericError("EM factor moment matrix is singular") from exc
        psi_new = diag_M - np.sum(lam * MB, axis=1)
        floored = psi_new < psi_floor
        if np.any(floored):
            floor_count += int(np.count_nonzero(floored))
            psi_new = np.maximum(psi_new, psi_floor)
        psi = psi_new
        obj = _em_objective(M, lam, psi)
        if not np.isfinite(obj):
            raise NumericError("EM objective became non-finite")
        prev = trace[-1]
        trace.append(obj)
        if abs(prev - obj) <= tol * max(1.0, abs(prev)):
            break

    metric = (lam.T / psi) @ lam / p
    mvals, U = eigh_descending((metric + metric.T) / 2.0)
    check_distinct(mvals, "loading metric of the residual factor fit")
    lam = lam @ U
    fix_column_signs_max_abs(lam)
    if floor_count:
        warnings.warn(
            f"EM floored {floor_count} noise variance updates at {psi_floor:g}",
            DataWarning,
            stacklevel=2,
        )
    return lam, psi, trace, floor_count


def factor_scores(R, loadings3, psi):
    """Generalized least squares factor scores of each residual row."""
    R = as_matrix(R, "R")
    lam = as_matrix(loadings3, "loadings3")
    psi = as_vector(psi, "psi")
    if lam.shape[1] == 0:
        return np.zeros((R.shape[0], 0))
    psi_inv_lam = lam / psi[:, None]
    B = lam.T @ psi_inv_lam
    try:
        Binv = np.linalg.inv(B)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError("loading precision matrix is singular") from exc
    return R @ psi_inv_lam @ Binv


def psi_variance(psi, j, n):
    """Plug-in variance of the j-th noise variance estimate: 2 psi_j^2 / n."""
    psi = as_vector(psi, "psi")
    return 2.0 * float(psi[j]) ** 2 / n


def _varimax_criterion(L):
    sq = L * L
    return float(np.sum(sq.var(axis=0)))


def varimax_rotate(loadings, factors, max_sweeps=1000, tol=1e-12):
    """Orthogonal rotation maximizing the varimax criterion.

    Pairwise planar rotations are swept until the criterion stops improving.
    Returns (rotated_loadings, rotated_factors, rotation); the product
    factors @ loadings^T is invariant.
    """
    L = as_matrix(loadings, "loadings").copy()
    Z = as_matrix(factors, "factors")
    p, q = L.shape
    if q < 1:
        raise ParameterError("need at least one column to rotate")
    R = np.eye(q)
    if q == 1:
        return L, Z.copy(), R
    crit = _varimax_criterion(L)
    for _ in range(max_sweeps):
        previous = crit
        for a in range(q - 1):
            for b in range(a + 1, q):
                x, y = L[:, a], L[:, b]
                u = x * x - y * y
                v = 2.0 * x * y
                su, sv = u.sum(), v.sum()
                num = 2.0 * float(u @ v) - 2.0 * su * sv / p
                den = float(u @ u - v @ v) - (su * su - sv * sv) / p
                phi = 0.25 * np.arctan2(num, den)
                if abs(phi) < 1e-14:
                    continue
                c, s = np.cos(phi), np.sin(phi)
                G = np.array([[c, -s], [s, c]])
                L[:, [a, b]] = L[:, [a, b]] @ G
                R[:, [a, b]] = R[:, [a, b]] @ G
        crit = _varimax_criterion(L)
        if crit - previous <= tol * max(1.0, abs(previous)):
            return L, Z @ R, R
    raise NumericError(f"varimax did not converge within {max_sweeps} sweeps")


@dataclass
class LoadingIntervals:
    """Entrywise confidence intervals for the network-factor loadings."""

    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float

    @property
    def significant(self):
        """True where the interval excludes zero."""
        return (self.lower > 0.0) | (self.upper < 0.0)


def loading_confidence_intervals(fit, Z, level=0.95):
    """Normal confidence intervals for each entry of the network loadings.

    With a stored rotation G the intervals are for the rotated loadings,
    using the rotated covariance G^T V_j G (the rotation is treated as
    fixed).
    """
    if not 0.0 < level < 1.0:
        raise ParameterError("level must be in (0, 1)")
    Z = as_matrix(Z, "Z")
    n = Z.shape[0]
    M = Z.T @ Z / n
    try:
        Minv = np.linalg.inv(M)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError("factor Gram matrix is singular") from exc
    est = fit.loadings12
    base_diag = np.diag(Minv).copy()
    if fit.rotation is not None:
        G = fit.rotation
        est = est @ G
        base_diag = np.diag(G.T @ Minv @ G).copy()
    se = np.sqrt(np.outer(fit.psi, base_diag) / n)
    zq = norm.ppf(0.5 + level / 2.0)
    return LoadingIntervals(
        estimate=est, lower=est - zq * se, upper=est + zq * se, level=level
    )


def masked_column_means(Y, mask):
    """Column means over observed entries; fully masked columns get 0."""
    Y = as_matrix(Y, "Y")
    obs = ~mask
    counts = obs.sum(axis=0)
    sums = np.where(obs, Y, 0.0).sum(axis=0)
    fully_masked = counts == 0
    means = np.where(fully_masked, 0.0, sums / np.maximum(counts, 1))
    if np.any(fully_masked):
        warnings.warn(
            f"{int(fully_masked.sum())} fully masked column(s); their mean is 0",
            DataWarning,
            stacklevel=2,
        )
    return means, fully_masked


def masked_regress_loadings(Ycentered, Z, mask):
    """Per-column OLS loadings using only each column's observed rows."""
    Y = as_matrix(Ycentered, "Y")
    Z = as_matrix(Z, "Z")
    n, p = Y.shape
    d = Z.shape[1]
    out = np.zeros((p, d))
    for j in range(p):
        rows = ~mask[:, j]
        m = int(rows.sum())
        if m == 0:
            continue
        if m <= d:
            raise DegeneracyError(
                f"column {j} has only {m} observed entries for {d} factors"
            )
        Zo = Z[rows]
        out[j] = _solve_gram(Zo, Zo.T @ Y[rows, j])
    return out


def impute_missing(Y, mask, fit, Z):
    """Replace masked entries by the fitted values mu + z12 loadings + z3 loadings."""
    Y = as_matrix(Y, "Y")
    fitted = fit.mu[None, :] + Z @ fit.loadings12.T
    if fit.k3:
        fitted = fitted + fit.scores3 @ fit.loadings3.T
    return np.where(mask, fitted, Y)
