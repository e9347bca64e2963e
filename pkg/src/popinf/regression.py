"""Regularized affine-parametric operator inference.

For every equation ``ell`` the learning problem is the Tikhonov-regularized
least-squares problem

    min_O  || D_ell O^T - R_ell^T ||_F^2 + || Lambda O^T ||_F^2,

where row block ``i`` of the data matrix ``D_ell`` holds the products of the
sampled coefficients ``theta(mu_i)`` with the (transposed) state features of
the projected snapshots at ``mu_i``.
"""
import itertools
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as la
import scipy.optimize as opt

from . import kron
from .affine import AffineStructure, Verdict, check_well_posedness
from .dataset import estimate_time_derivatives, load_matrix, save_matrix

logger = logging.getLogger(__name__)

# Solutions whose regularized Gram matrix looks worse conditioned than this
# are recomputed with the SVD of the augmented system.
COND_FALLBACK = 1e14


# Layout =======================================================================
@dataclass(frozen=True)
class Block:
    """Columns ``start:stop`` of one equation's operator matrix.

    They hold the operator of expansion index ``p`` (0-based) of ``term``.
    """
    term: object
    p: int
    start: int
    stop: int

    @property
    def kind(self):
        return self.term.kind

    @property
    def label(self):
        return f"{self.term.name}_p{self.p + 1}"


def equation_layout(structure, ell, ranks):
    """Column blocks of equation ``ell`` in operator-matrix order."""
    blocks = []
    col = 0
    for term in structure.equation_terms(ell):
        width = term.block_width(ranks)
        for p in range(term.q):
            blocks.append(Block(term, p, col, col + width))
            col += width
    return blocks


def term_features(term, states, input_values=None):
    """State features a term multiplies, one column per time/sample.

    Parameters
    ----------
    term : TermSpec
    states : list of (r_m, k) ndarray
        Reduced states of every variable.
    input_values : (k,) ndarray, optional
        Input signal samples; required for input terms.

    Returns
    -------
    (width, k) ndarray
    """
    k = states[0].shape[1]
    if term.kind == "constant":
        return np.ones((1, k))
    if term.kind == "input":
        if input_values is None:
            raise ValueError(f"term {term.name} needs input samples")
        return np.asarray(input_values, dtype=float).reshape(1, k)
    U = [states[m] for m in term.sources]
    if term.kind == "linear":
        return U[0]
    if term.kind == "quadratic":
        if term.sources[0] == term.sources[1]:
            return kron.compact_sq(U[0])
        return kron.khatri_rao(U[0], U[1])
    return kron.compact_cube(U[0])


# Data matrices ================================================================
@dataclass
class EquationData:
    """Regression data of one equation.

    ``D`` is ``sK x q``, ``R`` is ``r_ell x sK``. The Gram products are
    cached because the hyperparameter search re-solves with many
    regularizers.
    """
    ell: int
    D: np.ndarray
    R: np.ndarray
    blocks: list

    def __post_init__(self):
        self.DtD = self.D.T @ self.D
        self.DtRt = self.D.T @ self.R.T
        self._qr = None

    @property
    def q(self):
        return self.D.shape[1]

    @property
    def reduced_qr(self):
        """``(R_D, Q^T R^T)`` from an economic QR of ``D``, computed once.

        ``[R_D; Lambda]`` has the same least-squares solution and singular
        values as ``[D; Lambda]`` but only ``2q`` rows.
        """
        if self._qr is None:
            Q, RD = la.qr(self.D, mode="economic")
            self._qr = (RD, Q.T @ self.R.T)
        return self._qr


@dataclass
class DataMatrixBundle:
    structure: AffineStructure
    ranks: tuple
    equations: list
    num_samples: int
    num_times: int


def build_data_matrix(structure, params, reduced_states, time,
                      derivatives=None, input_values=None, check=True):
    """Assemble ``D_ell`` and ``R_ell`` for every equation.

    Parameters
    ----------
    structure : AffineStructure
    params : (s, d_mu) ndarray
    reduced_states : list over samples of list over variables of (r, K)
        Projected snapshots ``Vhat_ell^T U_ell(mu_i)``.
    time : (K,) ndarray
    derivatives : same nesting as ``reduced_states``, optional
        Time derivatives of the projected states. Estimated with
        second-order finite differences when omitted.
    input_values : (K,) ndarray, optional
        Input signal samples; evaluated from ``structure.input_signal``
        when omitted.
    check : bool
        Warn when the Theta matrices guarantee an ill-posed problem.
    """
    params = np.atleast_2d(np.asarray(params, dtype=float))
    s = len(params)
    if len(reduced_states) != s:
        raise ValueError(f"{len(reduced_states)} state entries for {s} params")
    d = structure.num_vars
    ranks = tuple(reduced_states[0][m].shape[0] for m in range(d))
    K = np.asarray(time).size
    for i, entry in enumerate(reduced_states):
        for m, U in enumerate(entry):
            if U.shape != (ranks[m], K):
                raise ValueError(f"sample {i}, variable {m}: shape {U.shape} "
                                 f"!= {(ranks[m], K)}")
    if check:
        report = check_well_posedness(structure, params)
        if report.verdict is not Verdict.ok:
            warnings.warn(f"ill-posed regression ({report.verdict.value}): "
                          f"deficient {report.deficient_terms}",
                          RuntimeWarning)
    if input_values is None and structure.input_signal is not None:
        input_values = structure.input_function()(time)
    if derivatives is None:
        derivatives = [[estimate_time_derivatives(U, time) for U in entry]
                       for entry in reduced_states]

    equations = []
    for ell in range(d):
        blocks = equation_layout(structure, ell, ranks)
        q = blocks[-1].stop if blocks else 0
        D = np.empty((s * K, q))
        for i, (mu, entry) in enumerate(zip(params, reduced_states)):
            rows = slice(i * K, (i + 1) * K)
            cache = {}
            for b in blocks:
                if b.term.name not in cache:
                    cache[b.term.name] = (
                        b.term.theta(mu),
                        term_features(b.term, entry, input_values).T)
                theta, XT = cache[b.term.name]
                D[rows, b.start:b.stop] = theta[b.p] * XT
        if not np.all(np.isfinite(D)):
            raise FloatingPointError(f"non-finite entries in D_{ell + 1}")
        R = np.hstack([entry[ell] for entry in derivatives])
        equations.append(EquationData(ell, D, R, blocks))
    return DataMatrixBundle(structure, ranks, equations, s, K)


# Regularization ===============================================================
@dataclass(frozen=True)
class Regularizer:
    """Diagonal Tikhonov weights grouped by polynomial order.

    ``lam1`` weights constant, input, and linear blocks, ``lam2`` quadratic
    blocks, ``lam3`` cubic blocks. The penalty is
    ``lam1^2 (sum ||c||^2 + ||B||^2 + ||A||^2) + lam2^2 sum ||H||^2 +
    lam3^2 sum ||G||^2``.
    """
    lam1: float = 0.0
    lam2: float = 0.0
    lam3: float = 0.0

    def __post_init__(self):
        for name in ("lam1", "lam2", "lam3"):
            value = getattr(self, name)
            if not value >= 0:
                raise ValueError(f"{name} must be nonnegative, got {value}")

    def weight(self, kind):
        if kind in ("constant", "input", "linear"):
            return self.lam1
        return self.lam2 if kind == "quadratic" else self.lam3

    def diagonal(self, blocks):
        """Diagonal of ``Lambda`` for a given column layout."""
        q = blocks[-1].stop if blocks else 0
        out = np.zeros(q)
        for b in blocks:
            out[b.start:b.stop] = self.weight(b.kind)
        return out

    def as_tuple(self):
        return (self.lam1, self.lam2, self.lam3)


def build_regularizer(structure, lam1=0.0, lam2=0.0, lam3=0.0):
    """Regularizer with the weights relevant to ``structure``.

    Weights for polynomial orders absent from the structure are ignored
    (set to zero) so that artifacts record only effective values.
    """
    kinds = structure.kinds
    has1 = bool(kinds & {"constant", "input", "linear"})
    return Regularizer(lam1 if has1 else 0.0,
                       lam2 if "quadratic" in kinds else 0.0,
                       lam3 if "cubic" in kinds else 0.0)


# Operator matrices ============================================================
@dataclass
class OperatorMatrix:
    """Learned operator matrices ``O_ell`` (``r_ell x q_ell``) with layouts."""
    structure: AffineStructure
    ranks: tuple
    matrices: list
    layouts: list
    info: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, structure, ranks):
        layouts = [equation_layout(structure, ell, ranks)
                   for ell in range(structure.num_vars)]
        mats = [np.zeros((ranks[ell], lay[-1].stop if lay else 0))
                for ell, lay in enumerate(layouts)]
        return cls(structure, tuple(ranks), mats, layouts)

    def block(self, name, p=0):
        """Sub-block for term ``name`` and expansion index ``p`` (0-based)."""
        term = self.structure.term(name)
        for b in self.layouts[term.target]:
            if b.term.name == name and b.p == p:
                return self.matrices[term.target][:, b.start:b.stop]
        raise KeyError((name, p))

    def set_block(self, name, p, value):
        term = self.structure.term(name)
        for b in self.layouts[term.target]:
            if b.term.name == name and b.p == p:
                self.matrices[term.target][:, b.start:b.stop] = value
                return
        raise KeyError((name, p))

    def blocks(self):
        """Iterate ``(Block, sub-matrix)`` over all equations."""
        for ell, layout in enumerate(self.layouts):
            for b in layout:
                yield b, self.matrices[ell][:, b.start:b.stop]

    def frobenius_norm(self):
        return float(np.sqrt(sum(np.sum(O**2) for O in self.matrices)))

    def save(self, directory):
        """One PMX1 file per sub-block; returns the manifest fragment."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for b, M in self.blocks():
            fname = f"op_{b.label}.pmx"
            save_matrix(directory / fname, M)
            entries.append({"term": b.term.name, "p": b.p, "file": fname,
                            "shape": list(M.shape)})
        return entries

    @classmethod
    def load(cls, directory, structure, ranks, entries):
        ops = cls.zeros(structure, ranks)
        for e in entries:
            M = load_matrix(Path(directory) / e["file"])
            ops.set_block(e["term"], e["p"], M.reshape(e["shape"]))
        return ops


def _solve_equation(eq, lam_diag, method):
    q = eq.q
    info = {}
    if method in ("auto", "normal"):
        M = eq.DtD + np.diag(lam_diag**2)
        try:
            factor = la.cho_factor(M, lower=False, check_finite=True)
            diag = np.abs(np.diag(factor[0]))
            cond_est = (diag.max() / diag.min())**2 if diag.min() > 0 \
                else math.inf
            info["cond_estimate"] = float(cond_est)
            if method == "normal" or cond_est < COND_FALLBACK:
                OT = la.cho_solve(factor, eq.DtRt)
                # one refinement step with the residual formed from D itself
                # recovers most of the accuracy lost by squaring cond(D)
                resid = eq.D.T @ (eq.R.T - eq.D @ OT) \
                    - (lam_diag**2)[:, None] * OT
                OT = OT + la.cho_solve(factor, resid)
                if np.all(np.isfinite(OT)):
                    info["method"] = "normal"
                    return OT.T, info
        except la.LinAlgError:
            if method == "normal":
                raise
            info["cond_estimate"] = math.inf
        logger.info("equation %d: falling back to SVD solve", eq.ell + 1)
    elif method != "svd":
        raise ValueError(f"unknown solve method {method!r}")
    RD, QtRt = eq.reduced_qr
    A = np.vstack([RD, np.diag(lam_diag)])
    B = np.vstack([QtRt, np.zeros((q, eq.R.shape[0]))])
    OT, _, rank, sv = la.lstsq(A, B, lapack_driver="gelsd")
    info["method"] = "svd"
    info["rank"] = int(rank)
    info["cond"] = float(sv[0] / sv[-1]) if sv[-1] > 0 else math.inf
    return OT.T, info


def solve_regularized(bundle, reg, method="auto"):
    """Solve the regularized normal equations for every equation.

    ``method="auto"`` uses a Cholesky factorization of
    ``D^T D + Lambda^T Lambda`` and falls back to an SVD-based least-squares
    solve of the augmented system ``[D; Lambda] O^T = [R^T; 0]`` when the
    factorization fails or looks badly conditioned.
    """
    mats, infos = [], []
    for eq in bundle.equations:
        O, info = _solve_equation(eq, reg.diagonal(eq.blocks), method)
        mats.append(O)
        infos.append(info)
    return OperatorMatrix(bundle.structure, bundle.ranks, mats,
                          [eq.blocks for eq in bundle.equations],
                          {"solve": infos, "regularizer": reg.as_tuple()})


def data_residual(bundle, ops):
    """Squared data misfit ``sum_ell ||D_ell O_ell^T - R_ell^T||_F^2``."""
    return float(sum(np.sum((eq.D @ O.T - eq.R.T)**2)
                     for eq, O in zip(bundle.equations, ops.matrices)))


# Training error ===============================================================
# Unstable trajectories score INSTABILITY_PENALTY plus up to the same amount
# again, scaled by the fraction of the time horizon left at failure.
INSTABILITY_PENALTY = 1e10


def training_error(rom, params, reduced_states, time, scheme="rk4", dt=None):
    """Mean squared deviation between projected data and ROM trajectories.

    Each training trajectory is re-integrated from its first projected
    snapshot. The value is ``1/(s d) sum_ell sum_i ||Uhat - Utilde||_F^2``;
    an unstable integration returns a large finite penalty instead, larger
    the earlier the failure. ROMs without a stored state bound are guarded
    against the largest norm in the data.
    """
    from .rom import integrate_many

    params = np.atleast_2d(params)
    s = len(params)
    d = rom.structure.num_vars
    u0s = [[entry[ell][:, 0] for ell in range(d)] for entry in reduced_states]
    bound = rom.state_bound
    if bound is None:
        bound = max(float(np.max(np.linalg.norm(np.vstack(entry), axis=0)))
                    for entry in reduced_states) or 1.0
    trajs = integrate_many(rom, params, u0s, time, scheme=scheme, dt=dt,
                           state_bound=bound)
    total = 0.0
    penalty = 0.0
    span = time[-1] - time[0]
    for traj, entry in zip(trajs, reduced_states):
        if not traj.stable:
            frac = (time[-1] - traj.fail_time) / span if span else 1.0
            penalty = max(penalty, INSTABILITY_PENALTY * (1 + frac))
            continue
        total += sum(np.sum((U - Ut)**2)
                     for U, Ut in zip(entry, traj.states))
    if penalty:
        return penalty
    return total / (s * d)


# Hyperparameter search ========================================================
@dataclass(frozen=True)
class LogGrid:
    """``num`` points logarithmically spaced from ``lo`` to ``hi``."""
    lo: float
    hi: float
    num: int

    def __post_init__(self):
        if self.num < 1 or not 0 < self.lo <= self.hi:
            raise ValueError(f"invalid grid {self}")

    def points(self):
        if self.num == 1:
            return np.array([self.lo])
        return np.logspace(math.log10(self.lo), math.log10(self.hi), self.num)

    @classmethod
    def parse(cls, text):
        """Parse ``"lo:hi:num"`` (e.g. ``"1e-12:1e6:7"``) or one value."""
        parts = text.split(":")
        if len(parts) == 1:
            v = float(parts[0])
            return cls(v, v, 1)
        if len(parts) != 3:
            raise ValueError(f"grid must be 'lo:hi:num', got {text!r}")
        return cls(float(parts[0]), float(parts[1]), int(parts[2]))


DEFAULT_GRID = LogGrid(1e-12, 1e6, 7)


@dataclass
class SearchResult:
    best: np.ndarray
    value: float
    trace: list
    grid_best: np.ndarray
    grid_value: float
    on_boundary: bool
    refined: bool


def optimize_hyperparams(objective, grids, refine=True, maxiter=200,
                         xatol=1e-3, map_func=map):
    """Grid search over log-spaced hyperparameters, then Nelder-Mead.

    Parameters
    ----------
    objective : callable
        Maps a 1-D array of hyperparameters to a float.
    grids : LogGrid or sequence of LogGrid
        One grid per hyperparameter axis.
    refine : bool
        Run a Nelder-Mead search in ``log10`` space from the grid minimizer,
        bounded by the grid box, until the simplex is smaller than ``xatol``
        or ``maxiter`` iterations.
    map_func : callable
        ``map``-like function used for the grid evaluations, e.g. a worker
        pool's ``map``; results must come back in input order.

    Returns
    -------
    SearchResult
        Never worse than the best grid point.
    """
    if isinstance(grids, LogGrid):
        grids = [grids]
    axes = [g.points() for g in grids]
    points = [np.array(p) for p in itertools.product(*axes)]
    if not points:
        raise ValueError("empty hyperparameter grid")
    values = [float(v) for v in map_func(objective, points)]
    trace = list(zip(points, values))
    finite = [i for i, v in enumerate(values) if math.isfinite(v)]
    if not finite:
        raise FloatingPointError("objective non-finite at every grid point")
    ibest = min(finite, key=lambda i: values[i])
    grid_best, grid_value = points[ibest], values[ibest]
    best, value = grid_best.copy(), grid_value

    lo = np.log10([g.lo for g in grids])
    hi = np.log10([g.hi for g in grids])
    can_move = hi > lo
    if refine and np.any(can_move):
        free = np.nonzero(can_move)[0]
        x0 = np.log10(grid_best)

        def f(z):
            x = x0.copy()
            x[free] = z
            lam = 10.0**x
            v = float(objective(lam))
            trace.append((lam, v))
            return v if math.isfinite(v) else math.inf

        spacing = np.array([(h - l) / max(g.num - 1, 1)
                            for g, l, h in zip(grids, lo, hi)])[free]
        z0 = x0[free]
        simplex = [z0]
        for j in range(len(free)):
            step = np.zeros(len(free))
            # step inward so the initial simplex stays inside the box
            up = z0[j] + spacing[j] <= hi[free][j] + 1e-12
            step[j] = spacing[j] if up else -spacing[j]
            simplex.append(z0 + step)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = opt.minimize(f, z0, method="Nelder-Mead",
                               bounds=list(zip(lo[free], hi[free])),
                               options={"initial_simplex": np.array(simplex),
                                        "xatol": xatol, "fatol": 0.0,
                                        "maxiter": maxiter})
        if math.isfinite(res.fun) and res.fun < value:
            x = x0.copy()
            x[free] = res.x
            best, value = 10.0**x, float(res.fun)
    xb = np.log10(best)
    on_boundary = bool(np.any(np.isclose(xb, lo, atol=1e-2) & can_move)
                       or np.any(np.isclose(xb, hi, atol=1e-2) & can_move))
    return SearchResult(np.asarray(best), value, trace, grid_best, grid_value,
                        on_boundary, refine)
