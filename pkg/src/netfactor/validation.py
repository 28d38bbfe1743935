"""Input validation helpers.

All fitting entry points funnel their inputs through these checks so the
estimators compose safely with the wider ecosystem.
"""

import numpy as np
import scipy.sparse as sp

from .errors import ParameterError


def as_matrix(X, name="X"):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ParameterError(f"{name} must be a 2-d array, got ndim={X.ndim}")
    return X


def as_vector(x, name="x"):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ParameterError(f"{name} must be a 1-d array, got ndim={x.ndim}")
    return x


def check_square_symmetric(A, name="A", tol=0.0):
    """Validate a square symmetric matrix (dense or sparse); returns it unchanged."""
    if sp.issparse(A):
        if A.shape[0] != A.shape[1]:
            raise ParameterError(f"{name} must be square, got {A.shape}")
        diff = (A - A.T).tocoo()
        if diff.nnz and np.max(np.abs(diff.data)) > tol:
            raise ParameterError(f"{name} must be symmetric")
        return A
    A = as_matrix(A, name)
    if A.shape[0] != A.shape[1]:
        raise ParameterError(f"{name} must be square, got {A.shape}")
    if not np.array_equal(A, A.T) and np.max(np.abs(A - A.T)) > tol:
        raise ParameterError(f"{name} must be symmetric")
    return A


def check_adjacency(A, name="A", strict=True):
    """Validate an adjacency matrix.

    With strict=True entries must be 0/1 with a zero diagonal.  With
    strict=False any real symmetric matrix is accepted (used when an exact
    probability matrix stands in for an observed network).
    """
    A = check_square_symmetric(A, name)
    if strict:
        if sp.issparse(A):
            data = A.data
            bad = data[(data != 0.0) & (data != 1.0)]
            if bad.size:
                raise ParameterError(f"{name} entries must be 0 or 1")
            if np.any(A.diagonal() != 0.0):
                raise ParameterError(f"{name} diagonal must be zero")
        else:
            if not np.isin(A, (0.0, 1.0)).all():
                raise ParameterError(f"{name} entries must be 0 or 1")
            if np.any(np.diagonal(A) != 0.0):
                raise ParameterError(f"{name} diagonal must be zero")
    return A


def check_finite(X, name="X"):
    arr = X.data if sp.issparse(X) else np.asarray(X)
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite entries")
    return X


def check_consistent_nodes(A, Y):
    n = A.shape[0]
    if Y.shape[0] != n:
        raise ParameterError(
            f"adjacency has {n} nodes but covariates have {Y.shape[0]} rows"
        )
    return n
