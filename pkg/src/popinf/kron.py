"""Kronecker, Khatri-Rao, and compact Khatri-Rao products.

The compact products keep each distinct monomial of a vector's self-product
exactly once. Ordering follows the block recursion

    w (^) w       = [w_1^2; w_2 * w_{1:2}; ...; w_r * w_{1:r}]
    w (^) w (^) w = [w_1^3; w_2 * (w_{1:2} (^) w_{1:2}); ...]

so entry ``(i, j)`` with ``j <= i`` of the quadratic product is ``w_i w_j``.
"""
from functools import lru_cache
from itertools import permutations

import numpy as np


def num_quadratic(r):
    """Length of the compact quadratic product, C(r+1, 2)."""
    return r * (r + 1) // 2


def num_cubic(r):
    """Length of the compact cubic product, C(r+2, 3)."""
    return r * (r + 1) * (r + 2) // 6


@lru_cache(maxsize=None)
def compact_sq_indices(r):
    """Index pairs ``(i, j)``, ``j <= i``, in compact quadratic order.

    Returns
    -------
    (C(r+1,2), 2) ndarray of int
    """
    idx = [(i, j) for i in range(r) for j in range(i + 1)]
    out = np.array(idx, dtype=np.intp).reshape(-1, 2)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def compact_cube_indices(r):
    """Index triples ``(k, i, j)``, ``j <= i <= k``, in compact cubic order.

    Block ``k`` of the compact cubic product is ``w_k`` times the compact
    quadratic product of ``w_{1:k}``.
    """
    idx = [(k, i, j) for k in range(r) for i in range(k + 1)
           for j in range(i + 1)]
    out = np.array(idx, dtype=np.intp).reshape(-1, 3)
    out.setflags(write=False)
    return out


def kron(W, Z):
    """Kronecker product; block ``(i, j)`` of the result is ``W[i, j] * Z``."""
    return np.kron(np.atleast_2d(W), np.atleast_2d(Z))


def khatri_rao(W, Z):
    """Column-wise Kronecker product of ``(r, s)`` and ``(m, s)`` arrays.

    One-dimensional inputs are treated as single columns.
    """
    W = np.asarray(W)
    Z = np.asarray(Z)
    vector = W.ndim == 1 and Z.ndim == 1
    if W.ndim == 1:
        W = W[:, None]
    if Z.ndim == 1:
        Z = Z[:, None]
    if W.shape[1] != Z.shape[1]:
        raise ValueError(f"column counts differ: {W.shape[1]} != {Z.shape[1]}")
    out = (W[:, None, :] * Z[None, :, :]).reshape(-1, W.shape[1])
    return out[:, 0] if vector else out


def compact_sq(w):
    """Compact quadratic Khatri-Rao product of a vector (or of each column).

    Parameters
    ----------
    w : (r,) or (r, k) ndarray

    Returns
    -------
    (C(r+1,2),) or (C(r+1,2), k) ndarray
    """
    w = np.asarray(w)
    idx = compact_sq_indices(w.shape[0])
    return w[idx[:, 0]] * w[idx[:, 1]]


def compact_cube(w):
    """Compact cubic Khatri-Rao product of a vector (or of each column)."""
    w = np.asarray(w)
    idx = compact_cube_indices(w.shape[0])
    return w[idx[:, 0]] * w[idx[:, 1]] * w[idx[:, 2]]


def _expand(Hc, r, order):
    idx = compact_sq_indices(r) if order == 2 else compact_cube_indices(r)
    if Hc.shape[1] != len(idx):
        raise ValueError(f"expected {len(idx)} compact columns, "
                         f"got {Hc.shape[1]}")
    H = np.zeros((Hc.shape[0], r**order))
    strides = r ** np.arange(order - 1, -1, -1)
    for col, multi in enumerate(idx):
        perms = set(permutations(multi))
        weight = Hc[:, col] / len(perms)
        for perm in perms:
            H[:, int(np.dot(perm, strides))] += weight
    return H


def _compress(H, r, order):
    if H.shape[1] != r**order:
        raise ValueError(f"expected {r**order} columns, got {H.shape[1]}")
    idx = compact_sq_indices(r) if order == 2 else compact_cube_indices(r)
    Hc = np.zeros((H.shape[0], len(idx)))
    strides = r ** np.arange(order - 1, -1, -1)
    for col, multi in enumerate(idx):
        for perm in set(permutations(multi)):
            Hc[:, col] += H[:, int(np.dot(perm, strides))]
    return Hc


def _infer_dim(ncols, count):
    r = 0
    while count(r) < ncols:
        r += 1
    if count(r) != ncols:
        raise ValueError(f"{ncols} is not a valid compact column count")
    return r


def expand_quadratic_operator(Hc):
    """Map a compact ``(m, C(r+1,2))`` operator to full ``(m, r^2)`` form.

    The weight of each off-diagonal product is split evenly between the
    ``(i, j)`` and ``(j, i)`` Kronecker positions, so that
    ``Hc @ compact_sq(w) == H @ kron(w, w)`` and the result is symmetric in
    its two Kronecker indices.
    """
    Hc = np.atleast_2d(Hc)
    return _expand(Hc, _infer_dim(Hc.shape[1], num_quadratic), 2)


def expand_cubic_operator(Gc):
    """Map a compact ``(m, C(r+2,3))`` operator to full ``(m, r^3)`` form."""
    Gc = np.atleast_2d(Gc)
    return _expand(Gc, _infer_dim(Gc.shape[1], num_cubic), 3)


def compress_quadratic_operator(H):
    """Sum a full ``(m, r^2)`` operator onto compact columns.

    Inverse of :func:`expand_quadratic_operator` on symmetric operators, and
    for any ``H`` satisfies ``H @ kron(w, w) == Hc @ compact_sq(w)``.
    """
    H = np.atleast_2d(H)
    r = int(round(H.shape[1] ** 0.5))
    return _compress(H, r, 2)


def compress_cubic_operator(G):
    """Sum a full ``(m, r^3)`` operator onto compact cubic columns."""
    G = np.atleast_2d(G)
    r = int(round(G.shape[1] ** (1 / 3)))
    return _compress(G, r, 3)
