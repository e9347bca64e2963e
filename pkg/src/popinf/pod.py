"""Proper orthogonal decomposition bases and residual-energy rank selection."""
import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

logger = logging.getLogger(__name__)

# Above this many entries the snapshot SVD goes through the Gram matrix.
GRAM_THRESHOLD = 50_000_000


@dataclass(frozen=True)
class PodBasis:
    """Orthonormal basis ``V`` (N x r) plus the full singular-value list."""
    V: np.ndarray
    singular_values: np.ndarray
    var_label: str = "u"

    @property
    def n(self):
        return self.V.shape[0]

    @property
    def r(self):
        return self.V.shape[1]

    def residual_energy(self):
        return residual_energy(self.singular_values, self.r)


def _fix_signs(Phi):
    rows = np.argmax(np.abs(Phi), axis=0)
    signs = np.sign(Phi[rows, np.arange(Phi.shape[1])])
    signs[signs == 0] = 1
    return Phi * signs


def _svd_gram(X):
    N, M = X.shape
    if N <= M:
        evals, Phi = la.eigh(X @ X.T)
        order = np.argsort(evals)[::-1]
        evals, Phi = evals[order], Phi[:, order]
        sigma = np.sqrt(np.clip(evals, 0, None))
    else:
        evals, Psi = la.eigh(X.T @ X)
        order = np.argsort(evals)[::-1]
        evals, Psi = evals[order], Psi[:, order]
        sigma = np.sqrt(np.clip(evals, 0, None))
        keep = sigma > sigma[0] * np.finfo(float).eps * M if sigma[0] else \
            np.zeros_like(sigma, dtype=bool)
        Phi = np.zeros((N, M))
        Phi[:, keep] = (X @ Psi[:, keep]) / sigma[keep]
    return Phi, sigma


def compute_pod(snapshots, r, var_label="u", method="auto"):
    """Rank-``r`` POD basis of an ``N x (sK)`` concatenated snapshot matrix.

    Parameters
    ----------
    snapshots : (N, M) ndarray
    r : int
        Number of leading left singular vectors to keep, ``1 <= r <= min(N, M)``.
    method : {"auto", "svd", "gram"}
        "svd" runs a thin SVD directly; "gram" eigendecomposes the smaller
        Gram matrix. "auto" picks "svd" unless the matrix is very large.

    Returns
    -------
    PodBasis
        Columns signed so each one's largest-magnitude entry is positive.
    """
    X = np.asarray(snapshots, dtype=float)
    if X.ndim != 2:
        raise ValueError("snapshots must be a 2-D array")
    N, M = X.shape
    if not 1 <= r <= min(N, M):
        raise ValueError(f"rank r = {r} outside [1, {min(N, M)}]")
    if method == "auto":
        method = "gram" if X.size > GRAM_THRESHOLD else "svd"
    if method == "svd":
        Phi, sigma, _ = la.svd(X, full_matrices=False, lapack_driver="gesdd")
    elif method == "gram":
        Phi, sigma = _svd_gram(X)
    else:
        raise ValueError(f"unknown method {method!r}")
    V = _fix_signs(Phi[:, :r])
    return PodBasis(np.ascontiguousarray(V), np.asarray(sigma), var_label)


def _scaled_squares(sigma):
    # normalize first so tiny spectra do not underflow when squared
    peak = np.max(np.abs(sigma))
    return (sigma / peak)**2 if peak > 0 else np.zeros_like(sigma)


def _scaled_squares(sigma):
    # normalize first so tiny spectra do not underflow when squared
    peak = np.max(np.abs(sigma))
    return (sigma / peak)**2 if peak > 0 else np.zeros_like(sigma)


def residual_energy(singular_values, r):
    """Fraction ``1 - E(r)`` of squared singular-value mass beyond mode ``r``.

    Computed from the tail sum, so values far below machine epsilon relative
    to one are still resolved.
    """
    sigma = np.asarray(singular_values, dtype=float)
    if sigma.size == 0:
        raise ValueError("empty singular-value spectrum")
    if not 0 <= r <= sigma.size:
        raise ValueError(f"r = {r} outside [0, {sigma.size}]")
    sq = _scaled_squares(sigma)
    total = sq.sum()
    if total == 0:
        return 0.0
    return float(sq[r:].sum() / total)


def cumulative_energy(singular_values):
    """``E(r)`` for r = 1, ..., len(singular_values)."""
    sq = _scaled_squares(np.asarray(singular_values, dtype=float))
    return np.cumsum(sq) / sq.sum()


def choose_rank(singular_values, threshold):
    """Smallest ``r >= 1`` whose residual energy is below ``threshold``."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    sigma = np.asarray(singular_values, dtype=float)
    if sigma.size == 0:
        raise ValueError("empty singular-value spectrum")
    sq = _scaled_squares(sigma)
    total = sq.sum()
    if total == 0:
        warnings.warn("all-zero spectrum; returning full rank", RuntimeWarning)
        return int(sigma.size)
    # tails[k] = residual energy after keeping k modes
    tails = np.concatenate([np.cumsum(sq[::-1])[::-1], [0.0]]) / total
    hits = np.nonzero(tails[1:] < threshold)[0]
    return int(hits[0] + 1)


def project(basis, U):
    """Reduced coordinates ``V^T U``."""
    V = basis.V if isinstance(basis, PodBasis) else basis
    U = np.asarray(U)
    if U.shape[0] != V.shape[0]:
        raise ValueError(f"state dimension {U.shape[0]} != basis rows "
                         f"{V.shape[0]}")
    return V.T @ U


def lift(basis, Uhat):
    """Full-space reconstruction ``V Uhat``."""
    V = basis.V if isinstance(basis, PodBasis) else basis
    Uhat = np.asarray(Uhat)
    if Uhat.shape[0] != V.shape[1]:
        raise ValueError(f"reduced dimension {Uhat.shape[0]} != basis "
                         f"columns {V.shape[1]}")
    return V @ Uhat
