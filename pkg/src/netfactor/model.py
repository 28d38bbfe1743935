"""Parameter types and canonical forms for the joint network/covariate factor model.

The generative model for n nodes with p covariates is

    Y = 1 mu^T + Z2 Lambda2^T + Z3 Lambda3^T + E,    E_ij ~ (0, Psi_j),
    A_ij ~ Bernoulli(P_ij),   P = alpha 1^T + 1 alpha^T + Z12 Z12^T,

where the latent factor blocks Z1 (network only), Z2 (shared) and Z3
(covariates only) have k1, k2 and k3 columns; Z12 = [Z1 Z2] and
Z23 = [Z2 Z3].  Gram matrices use the 1/n normalization throughout.

Factors and loadings are only determined up to linear transformations that
leave P and the mean structure of Y unchanged.  ``apply_identifiability``
maps a parameter set to the canonical representative of its equivalence
class under one of three condition sets (see ``IdentifiabilityScheme``).
"""

import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import DegeneracyError, ParameterError
from .utils import check_distinct, eigh_descending, fix_column_signs_first_nonzero
from .validation import as_matrix, as_vector


@dataclass(frozen=True)
class FactorDims:
    """Column counts of the three factor blocks."""

    k1: int
    k2: int
    k3: int

    def __post_init__(self):
        for name in ("k1", "k2", "k3"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ParameterError(f"{name} must be a nonnegative integer, got {v!r}")

    @property
    def d(self):
        """Network embedding dimension k1 + k2."""
        return self.k1 + self.k2

    @property
    def k(self):
        return self.k1 + self.k2 + self.k3


class IdentifiabilityScheme(enum.Enum):
    """Canonical-form condition sets removing rotation/scale indeterminacy.

    All three center Z columnwise and fix column signs.  They differ in how
    the remaining freedom is pinned:

    LOADING_METRIC_DIAGONAL (default)
        Z12^T Z3 = 0, Lambda2^T Psi^-1 Lambda2 / p diagonal with distinct
        descending elements, and the top k3 x k3 block of Lambda3 is the
        identity.
    FACTOR_GRAM_DIAGONAL
        Z^T Z diagonal with distinct (within-block) descending elements and
        Lambda3^T Psi^-1 Lambda3 / p = I.
    LOADING_TRIANGULAR
        Z12^T Z3 = 0, Lambda2 lower triangular, Z3^T Z3 diagonal with
        distinct descending elements, and Lambda3^T Psi^-1 Lambda3 / p = I.
    """

    LOADING_METRIC_DIAGONAL = "loading_metric_diagonal"
    FACTOR_GRAM_DIAGONAL = "factor_gram_diagonal"
    LOADING_TRIANGULAR = "loading_triangular"


DEFAULT_SCHEME = IdentifiabilityScheme.LOADING_METRIC_DIAGONAL

# Loading blocks whose largest magnitude falls below this (relative to 1)
# are treated as identically zero; the corresponding factor block is then
# canonicalized by diagonalizing its Gram matrix instead.
_ZERO_LOADING_TOL = 1e-12


@dataclass(frozen=True)
class ModelParams:
    """Full parameter set of the joint model.

    mu : (p,) covariate means
    lambda2 : (p, k2) loadings of the shared factors
    lambda3 : (p, k3) loadings of the covariate-only factors
    z1, z2, z3 : (n, k1), (n, k2), (n, k3) factor blocks
    psi : (p,) strictly positive noise variances
    alpha : (n,) degree heterogeneity parameters
    """

    mu: np.ndarray
    lambda2: np.ndarray
    lambda3: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    z3: np.ndarray
    psi: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", as_vector(self.mu, "mu"))
        object.__setattr__(self, "psi", as_vector(self.psi, "psi"))
        object.__setattr__(self, "alpha", as_vector(self.alpha, "alpha"))
        for name in ("lambda2", "lambda3", "z1", "z2", "z3"):
            object.__setattr__(self, name, as_matrix(getattr(self, name), name))
        n, p = self.n, self.p
        if self.z1.shape[0] != n or self.z2.shape[0] != n or self.z3.shape[0] != n:
            raise ParameterError("factor blocks must share the number of rows")
        if self.lambda2.shape != (p, self.dims.k2):
            raise ParameterError(
                f"lambda2 must be (p, k2) = ({p}, {self.dims.k2}), got {self.lambda2.shape}"
            )
        if self.lambda3.shape != (p, self.dims.k3):
            raise ParameterError(
                f"lambda3 must be (p, k3) = ({p}, {self.dims.k3}), got {self.lambda3.shape}"
            )
        if self.psi.shape[0] != p:
            raise ParameterError("psi must have length p")
        if np.any(self.psi <= 0):
            raise ParameterError("psi entries must be strictly positive")

    @property
    def n(self):
        return self.alpha.shape[0]

    @property
    def p(self):
        return self.mu.shape[0]

    @property
    def dims(self):
        return FactorDims(self.z1.shape[1], self.z2.shape[1], self.z3.shape[1])

    @property
    def z12(self):
        return np.hstack([self.z1, self.z2])

    @property
    def z23(self):
        return np.hstack([self.z2, self.z3])

    @property
    def z(self):
        return np.hstack([self.z1, self.z2, self.z3])

    @property
    def loadings(self):
        """[lambda2 lambda3], the loadings of Z23."""
        return np.hstack([self.lambda2, self.lambda3])

    def mean_matrix(self):
        """Deterministic part of Y: 1 mu^T + Z23 Lambda^T."""
        return self.mu[None, :] + self.z23 @ self.loadings.T


def model_probability_matrix(params):
    """Edge probability matrix alpha 1^T + 1 alpha^T + Z12 Z12^T.

    Exactly symmetric by construction.
    """
    a = params.alpha
    z12 = params.z12
    P = a[:, None] + a[None, :] + z12 @ z12.T
    return (P + P.T) / 2.0


def model_covariance(params):
    """Model-implied covariance of Y: Lambda (Z23^T Z23 / n) Lambda^T + diag(Psi)."""
    n = params.n
    if n < 2:
        raise ParameterError("need n >= 2 to form the factor Gram matrix")
    lam = params.loadings
    m23 = params.z23.T @ params.z23 / n
    C = lam @ m23 @ lam.T
    C = (C + C.T) / 2.0
    C[np.diag_indices_from(C)] += params.psi
    return C


def subspace_alignment(estimate, target):
    """Fraction of ``target``'s energy captured by the column space of ``estimate``.

    Returns tr(X^T P X) / tr(X^T X) in [0, 1], where P projects onto the
    column space of the estimate.  Invariant under invertible column
    transforms of the estimate.  Raises DegeneracyError when the estimate is
    column-rank deficient (no silent pseudo-inverse fallback).
    """
    Xhat = as_matrix(estimate, "estimate")
    X = as_matrix(target, "target")
    if Xhat.shape[0] != X.shape[0]:
        raise ParameterError("estimate and target must have the same number of rows")
    denom = float(np.sum(X * X))
    if denom == 0.0:
        raise ParameterError("target must be nonzero")
    if Xhat.shape[1] == 0:
        return 0.0
    U, s, _ = np.linalg.svd(Xhat, full_matrices=False)
    if s[0] == 0.0 or s[-1] <= 1e-10 * s[0]:
        raise DegeneracyError("estimate is column-rank deficient")
    proj = U.T @ X
    return float(np.sum(proj * proj) / denom)


def _center_params(params):
    """Center every Z column, absorbing the means into alpha and mu."""
    z1, z2, z3 = params.z1, params.z2, params.z3
    m1 = z1.mean(axis=0) if z1.shape[1] else np.zeros(0)
    m2 = z2.mean(axis=0) if z2.shape[1] else np.zeros(0)
    m3 = z3.mean(axis=0) if z3.shape[1] else np.zeros(0)
    z1c, z2c, z3c = z1 - m1, z2 - m2, z3 - m3
    m12 = np.concatenate([m1, m2])
    m23 = np.concatenate([m2, m3])
    alpha = params.alpha + np.hstack([z1c, z2c]) @ m12 + 0.5 * float(m12 @ m12)
    mu = params.mu + params.loadings @ m23
    return replace(params, z1=z1c, z2=z2c, z3=z3c, alpha=alpha, mu=mu)


def _orthogonalize_z3(params, tol=1e-8):
    """Remove the Z2 component of Z3 (loading-compensated), then require Z1 _|_ Z3.

    The Z2 component can always be transferred into lambda2 without changing
    the model; a Z1 component cannot, because Z1 carries no loadings.  Inputs
    whose Z3 retains a Z1 component (after the Z2 sweep) are not reducible to
    a scheme that demands Z12^T Z3 = 0, so that residual raises.
    """
    z2, z3 = params.z2, params.z3
    lambda2, lambda3 = params.lambda2, params.lambda3
    if z2.shape[1] and z3.shape[1]:
        gram2 = z2.T @ z2
        try:
            T = np.linalg.solve(gram2, z2.T @ z3)
        except np.linalg.LinAlgError as exc:
            raise DegeneracyError("z2 Gram matrix is singular") from exc
        z3 = z3 - z2 @ T
        lambda2 = lambda2 + lambda3 @ T.T
        params = replace(params, z3=z3, lambda2=lambda2)
    z1 = params.z1
    if z1.shape[1] and z3.shape[1]:
        scale = (
            np.linalg.norm(z1, axis=0).max() * np.linalg.norm(z3, axis=0).max()
        ) or 1.0
        resid = np.max(np.abs(z1.T @ z3)) / scale
        if resid > tol:
            raise DegeneracyError(
                "z3 has a component along z1; parameters are not reducible to "
                f"an orthogonal-blocks scheme (residual {resid:.2e})"
            )
    return params


def _loading_metric(lam, psi):
    """Lambda^T diag(1/psi) Lambda / p."""
    return (lam.T / psi) @ lam / lam.shape[0]


def _gram_rotation(z, context):
    """Orthogonal rotation diagonalizing z^T z with descending diagonal."""
    vals, vecs = eigh_descending(z.T @ z)
    check_distinct(vals, context)
    return vecs


def _rank_check(M, context, rel_tol=1e-10):
    s = np.linalg.svd(M, compute_uv=False)
    if s.size and (s[-1] <= rel_tol * s[0] or s[0] == 0.0):
        raise DegeneracyError(f"{context} is rank deficient")


def _loadings_are_zero(lam):
    return lam.size == 0 or np.max(np.abs(lam)) <= _ZERO_LOADING_TOL


def _sqrtm_spd(W, context):
    vals, vecs = np.linalg.eigh(W)
    if np.any(vals <= 0):
        raise DegeneracyError(f"{context} is not positive definite")
    return (vecs * np.sqrt(vals)) @ vecs.T


def _canonicalize_z3_unit_metric(z3, lambda3, psi, sign_free):
    """Transform so lambda3^T psi^-1 lambda3 / p = I and z3 Gram is diagonal.

    Returns (z3, lambda3, sign_free); sign_free reports whether column signs
    remain free to flip afterwards (always true here).
    """
    if z3.shape[1] == 0:
        return z3, lambda3, sign_free
    if _loadings_are_zero(lambda3):
        # degenerate signal: fall back to the Gram convention
        O = _gram_rotation(z3, "z3 Gram matrix")
        return z3 @ O, lambda3 @ O, True
    W = _loading_metric(lambda3, psi)
    Wh = _sqrtm_spd(W, "lambda3 loading metric")
    S = Wh @ (z3.T @ z3) @ Wh
    vals, U = eigh_descending((S + S.T) / 2.0)
    check_distinct(vals, "z3 Gram under unit loading metric")
    T = Wh @ U
    return z3 @ T, lambda3 @ np.linalg.inv(T).T, True


def apply_identifiability(params, scheme=DEFAULT_SCHEME):
    """Canonical representative of ``params`` under the chosen scheme.

    The output satisfies the scheme's constraints (to ~1e-10) and is
    model-equivalent to the input: the probability matrix, the mean
    structure of Y and the model covariance are unchanged.  Idempotent.

    Raises DegeneracyError for rank-deficient blocks or inputs not reducible
    to the scheme, and TieError when a distinct-elements condition is hit by
    a tie (downstream sign/rotation fixing would be ill-posed).
    """
    scheme = IdentifiabilityScheme(scheme)
    k1, k2, k3 = params.dims.k1, params.dims.k2, params.dims.k3
    if params.z12.shape[1]:
        _rank_check(params.z12, "z12")

    params = _center_params(params)
    params = _orthogonalize_z3(params)
    z1, z2, z3 = params.z1, params.z2, params.z3
    lambda2, lambda3 = params.lambda2.copy(), params.lambda3.copy()
    psi = params.psi
    z3_sign_free = True

    if scheme is IdentifiabilityScheme.FACTOR_GRAM_DIAGONAL and k1 and k2:
        scale = (
            np.linalg.norm(z1, axis=0).max() * np.linalg.norm(z2, axis=0).max()
        ) or 1.0
        if np.max(np.abs(z1.T @ z2)) / scale > 1e-8:
            raise DegeneracyError(
                "z1 and z2 are not orthogonal; parameters are not reducible to "
                "a diagonal joint Gram"
            )

    # z1 block: no loadings constrain it, so use the Gram convention in every
    # scheme (it is the requirement itself under FACTOR_GRAM_DIAGONAL).
    if k1:
        z1 = z1 @ _gram_rotation(z1, "z1 Gram matrix")

    if k2:
        if scheme is IdentifiabilityScheme.LOADING_METRIC_DIAGONAL:
            if _loadings_are_zero(lambda2):
                O2 = _gram_rotation(z2, "z2 Gram matrix")
            else:
                vals, O2 = eigh_descending(_loading_metric(lambda2, psi))
                check_distinct(vals, "lambda2 loading metric")
            z2 = z2 @ O2
            lambda2 = lambda2 @ O2
        elif scheme is IdentifiabilityScheme.FACTOR_GRAM_DIAGONAL:
            O2 = _gram_rotation(z2, "z2 Gram matrix")
            z2 = z2 @ O2
            lambda2 = lambda2 @ O2
        else:  # LOADING_TRIANGULAR
            if _loadings_are_zero(lambda2):
                O2 = _gram_rotation(z2, "z2 Gram matrix")
            else:
                top = lambda2[:k2, :]
                _rank_check(top, "leading block of lambda2")
                Q, R = np.linalg.qr(top.T)
                O2 = Q * np.sign(np.diag(R))
            z2 = z2 @ O2
            lambda2 = lambda2 @ O2

    if k3:
        if scheme is IdentifiabilityScheme.LOADING_METRIC_DIAGONAL:
            if _loadings_are_zero(lambda3):
                O3 = _gram_rotation(z3, "z3 Gram matrix")
                z3 = z3 @ O3
                lambda3 = lambda3 @ O3
            else:
                top = lambda3[:k3, :]
                _rank_check(top, "leading block of lambda3")
                z3 = z3 @ top.T
                lambda3 = lambda3 @ np.linalg.inv(top)
                # the unit leading block pins column signs
                z3_sign_free = False
        else:
            z3, lambda3, z3_sign_free = _canonicalize_z3_unit_metric(
                z3, lambda3, psi, z3_sign_free
            )

    # Column signs: first nonzero entry of each free Z column positive,
    # flipping the paired loading column to preserve the model.
    if k1:
        fix_column_signs_first_nonzero(z1)
    if k2:
        fix_column_signs_first_nonzero(z2, followers=(lambda2,))
    if k3 and z3_sign_free:
        fix_column_signs_first_nonzero(z3, followers=(lambda3,))

    return replace(params, z1=z1, z2=z2, z3=z3, lambda2=lambda2, lambda3=lambda3)


def canonical_network_coordinates(params):
    """True (Z12, Lambda12) expressed in the estimator's fixed-rotation frame.

    The network fit reports factors rotated so their Gram matrix is diagonal
    descending with max-magnitude-positive column signs; the comparable truth
    is Z12 rotated the same way, with Lambda12 = [0 lambda2] rotated along.
    """
    z12 = params.z12
    lam12 = np.hstack(
        [np.zeros((params.p, params.dims.k1)), params.lambda2]
    )
    vals, V = eigh_descending(z12.T @ z12)
    check_distinct(vals, "z12 Gram matrix")
    zc = z12 @ V
    lc = lam12 @ V
    from .utils import fix_column_signs_max_abs

    fix_column_signs_max_abs(zc, followers=(lc,))
    return zc, lc
