"""Spectral embedding of the network and degree-parameter estimation.

The adjacency matrix is embedded through its leading eigenpairs (for a
symmetric matrix the singular values are the eigenvalue magnitudes; only
nonnegative eigenvalues are admitted, matching the positive-semidefinite
probability model).  Centering the embedding gives the estimate of the
network factor block; rotating it so its Gram matrix is diagonal descending
fixes the rotation indeterminacy, and the max-magnitude-positive sign rule
fixes reflections.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg

from .errors import DegeneracyError, NumericError, ParameterError, SelectionError, SpectralGapWarning
from .utils import eigh_descending, fix_column_signs_max_abs
from .validation import check_adjacency, check_finite

# Above this node count the truncated (Lanczos) eigensolver is used.
DENSE_EIGEN_LIMIT = 2000


@dataclass
class NetworkFit:
    """Outputs of the network estimation step.

    embedding : (n, d) raw spectral embedding (uncentered)
    factors : (n, d) centered embedding, rotated so factors.T @ factors is
        diagonal descending, sign-fixed
    alpha : (n,) degree heterogeneity estimates
    singular_values : top d + 2 singular values of A, descending
    dim : embedding dimension d
    warnings : diagnostic messages attached during fitting
    """

    embedding: np.ndarray
    factors: np.ndarray
    alpha: np.ndarray
    singular_values: np.ndarray
    dim: int
    warnings: list = field(default_factory=list)

    @property
    def n(self):
        return self.embedding.shape[0]


def _top_eigenpairs(A, k, dense):
    """Top-k eigenpairs by algebraic value, plus the largest magnitudes.

    Returns (vals_desc, vecs, magnitudes_desc) where magnitudes_desc holds
    min(k + 2, n) singular values (|eigenvalue|, descending).
    """
    n = A.shape[0]
    want = min(k + 2, n)
    if dense:
        Ad = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
        vals, vecs = eigh_descending(Ad)
        mags = np.sort(np.abs(vals))[::-1][:want]
        return vals[:k], vecs[:, :k], mags
    # Lanczos path: fixed start vector keeps results deterministic.
    v0 = np.full(n, 1.0)
    try:
        vals_la, vecs_la = sp.linalg.eigsh(A, k=min(k, n - 1), which="LA", v0=v0)
        vals_lm = sp.linalg.eigsh(
            A, k=min(want, n - 1), which="LM", v0=v0, return_eigenvectors=False
        )
    except sp.linalg.ArpackNoConvergence as exc:
        raise NumericError(f"eigensolver did not converge: {exc}") from exc
    order = np.argsort(vals_la)[::-1]
    mags = np.sort(np.abs(vals_lm))[::-1][:want]
    return vals_la[order], vecs_la[:, order], mags


def spectral_embed(A, dim, dense=None, return_singular_values=False):
    """Embedding U S^(1/2) from the top ``dim`` nonnegative eigenvalues of A.

    Column signs follow the max-magnitude-positive rule.  A (near) zero gap
    between the dim-th and (dim+1)-th singular values triggers a
    SpectralGapWarning; fewer than ``dim`` positive eigenvalues raises
    DegeneracyError.
    """
    A = check_finite(check_adjacency(A, strict=False))
    n = A.shape[0]
    if not 1 <= dim <= n - 1:
        raise ParameterError(f"dim must be in [1, {n - 1}], got {dim}")
    if dense is None:
        dense = n <= DENSE_EIGEN_LIMIT
    vals, vecs, mags = _top_eigenpairs(A, dim, dense)
    if vals.shape[0] < dim or vals[dim - 1] <= 0.0:
        raise DegeneracyError(
            f"adjacency matrix has fewer than {dim} positive eigenvalues"
        )
    if mags.shape[0] > dim and mags[dim - 1] - mags[dim] <= 1e-10 * max(mags[0], 1.0):
        warnings.warn(
            f"singular values {dim} and {dim + 1} coincide; the embedding "
            "dimension is ambiguous",
            SpectralGapWarning,
            stacklevel=2,
        )
    X = vecs[:, :dim] * np.sqrt(vals[:dim])
    fix_column_signs_max_abs(X)
    if return_singular_values:
        return X, mags
    return X


def estimate_alpha(A):
    """Degree parameter estimates (deg - mean(deg)/2) / n."""
    A = check_adjacency(A, strict=False)
    n = A.shape[0]
    if n < 2:
        raise ParameterError("need at least 2 nodes")
    deg = np.asarray(A.sum(axis=1)).ravel().astype(float)
    return (deg - deg.mean() / 2.0) / n


def fit_network(A, dim, dense=None):
    """Embed A, center, fix the rotation, and estimate degree parameters."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", SpectralGapWarning)
        X, mags = spectral_embed(A, dim, dense=dense, return_singular_values=True)
    notes = [str(w.message) for w in caught if issubclass(w.category, SpectralGapWarning)]
    for msg in notes:
        warnings.warn(msg, SpectralGapWarning, stacklevel=2)
    Z = X - X.mean(axis=0)
    _, V = eigh_descending(Z.T @ Z)
    Z = Z @ V
    fix_column_signs_max_abs(Z)
    return NetworkFit(
        embedding=X,
        factors=Z,
        alpha=estimate_alpha(A),
        singular_values=mags,
        dim=dim,
        warnings=notes,
    )


def profile_likelihood_elbow(values):
    """Elbow of a scree by the two-segment equal-variance Gaussian profile.

    Returns the split index q (1-based count of leading values) maximizing
    the profile log-likelihood, which for pooled equal variances is the
    minimizer of the total within-segment sum of squares.
    """
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise SelectionError("need at least two scree values")
    if np.max(v) - np.min(v) <= 1e-12 * max(abs(v[0]), 1.0):
        raise SelectionError("scree is flat; no elbow exists")
    best_q, best_sse = None, np.inf
    for q in range(1, v.size):
        head, tail = v[:q], v[q:]
        sse = float(np.sum((head - head.mean()) ** 2) + np.sum((tail - tail.mean()) ** 2))
        if sse < best_sse - 1e-15 * max(1.0, best_sse):
            best_q, best_sse = q, sse
    return best_q


def select_embedding_dim(A, dmax, dense=None):
    """Profile-likelihood elbow of the top min(dmax + 1, n/2) singular values."""
    A = check_adjacency(A, strict=False)
    n = A.shape[0]
    if dmax > n - 2:
        raise ParameterError(f"dmax must be at most n - 2 = {n - 2}")
    m = min(dmax + 1, n // 2)
    if dense is None:
        dense = n <= DENSE_EIGEN_LIMIT
    if dense:
        Ad = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
        svals = np.sort(np.abs(np.linalg.eigvalsh(Ad)))[::-1][:m]
    else:
        vals = sp.linalg.eigsh(
            A, k=m, which="LM", v0=np.full(n, 1.0), return_eigenvectors=False
        )
        svals = np.sort(np.abs(vals))[::-1]
    return min(profile_likelihood_elbow(svals), dmax)


def _clamped_inner_products(X, i):
    ips = X @ X[i]
    return np.clip(ips, 0.0, 1.0)


def latent_position_variance(fit, i):
    """Plug-in covariance of the i-th row of the embedding.

    Computed in the raw embedding coordinates; conjugate by the fixed
    rotation to express it in the coordinates of ``fit.factors``.
    """
    X = fit.embedding
    n, d = X.shape
    if not 0 <= i < n:
        raise ParameterError(f"node index {i} out of range")
    M = X.T @ X / n
    try:
        Minv = np.linalg.inv(M)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError("embedding Gram matrix is singular") from exc
    ips = _clamped_inner_products(X, i)
    w = ips * (1.0 - ips)
    w[i] = 0.0
    Q = (X * w[:, None]).T @ X / n
    return Minv @ Q @ Minv / n


def alpha_variance(fit, i):
    """Plug-in variance of the i-th degree parameter estimate."""
    X = fit.embedding
    n = X.shape[0]
    if not 0 <= i < n:
        raise ParameterError(f"node index {i} out of range")
    ips = _clamped_inner_products(X, i)
    w = ips * (1.0 - ips)
    w[i] = 0.0
    return float(np.sum(w) / n) / n
