"""Small numeric helpers used throughout the package."""

import concurrent.futures

import numpy as np

from .errors import TieError

# Stage identifiers for derived RNG substreams.  A substream is addressed by
# (root_seed, stage, index...) so that results never depend on execution
# order or thread count.
STAGE_DEGREES = 1
STAGE_Z3 = 2
STAGE_LOADINGS = 3
STAGE_PSI = 4
STAGE_MU = 5
STAGE_EDGES = 6
STAGE_NOISE = 7
STAGE_NULL_DRAWS = 10
STAGE_PERMUTATIONS = 11
STAGE_REPLICATE = 20


def substream_rng(seed, *path):
    """Generator for the substream addressed by (seed, *path).

    Deterministic in its arguments and independent across distinct paths, so
    parallel work can draw from disjoint streams in any order.
    """
    parts = [int(seed)] + [int(x) for x in path]
    return np.random.default_rng(np.random.SeedSequence(parts))


def parallel_map(fn, items, threads=1):
    """Map ``fn`` over ``items`` preserving order.

    With ``threads > 1`` the work runs on a thread pool (numpy releases the
    GIL inside BLAS); results are identical to the serial path because each
    item must derive its own RNG substream.
    """
    items = list(items)
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def eigh_descending(S):
    """Eigendecomposition of a symmetric matrix, eigenvalues descending."""
    vals, vecs = np.linalg.eigh(S)
    return vals[::-1], vecs[:, ::-1]


def check_distinct(values, context, rel_tol=1e-8):
    """Raise TieError when consecutive sorted values are closer than rel_tol.

    ``values`` must already be sorted (either direction); the gap is measured
    relative to the largest magnitude in the set.
    """
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return
    scale = max(float(np.max(np.abs(v))), 1e-300)
    gaps = np.abs(np.diff(v))
    if np.any(gaps <= rel_tol * scale):
        raise TieError(f"tied values in {context}: relative gap below {rel_tol:g}")


def fix_column_signs_first_nonzero(M, followers=()):
    """Flip columns of M so each column's first nonzero entry is positive.

    "Nonzero" means magnitude above 1e-12 times the column's max magnitude.
    ``followers`` are matrices whose matching columns are flipped alongside.
    Returns the flip signs (+-1 per column); M and followers are modified in
    place.
    """
    M = np.asarray(M)
    signs = np.ones(M.shape[1])
    for j in range(M.shape[1]):
        col = M[:, j]
        top = np.max(np.abs(col)) if col.size else 0.0
        if top == 0.0:
            continue
        idx = np.flatnonzero(np.abs(col) > 1e-12 * top)
        if idx.size and col[idx[0]] < 0:
            signs[j] = -1.0
            M[:, j] = -col
            for F in followers:
                F[:, j] = -F[:, j]
    return signs


def fix_column_signs_max_abs(M, followers=()):
    """Flip columns of M so the entry of largest magnitude is positive.

    Ties resolve to the first such entry.  Used for estimated embeddings,
    where this rule is far more stable under noise than the first-entry rule.
    """
    M = np.asarray(M)
    signs = np.ones(M.shape[1])
    for j in range(M.shape[1]):
        col = M[:, j]
        if col.size == 0:
            continue
        i = int(np.argmax(np.abs(col)))
        if col[i] < 0:
            signs[j] = -1.0
            M[:, j] = -col
            for F in followers:
                F[:, j] = -F[:, j]
    return signs


def format_float(x):
    """17-significant-digit decimal representation (lossless round trip)."""
    return format(float(x), ".17g")
