"""End-to-end training and evaluation: POD, regression, search, errors."""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .affine import Verdict, check_well_posedness
from .dataset import backward_difference_pairs, estimate_time_derivatives
from .metrics import ErrorSurface, projection_error, relative_l2_error
from .pod import choose_rank, compute_pod
from .regression import (DEFAULT_GRID, LogGrid, build_data_matrix,
                         build_regularizer, optimize_hyperparams,
                         solve_regularized, training_error)
from .rom import Rom, integrate_many

logger = logging.getLogger(__name__)

LAMBDA_NAMES = ("lam1", "lam2", "lam3")


@dataclass
class TrainConfig:
    """Settings for learning a ROM from a snapshot set.

    ``ranks`` overrides ``energy``-based rank selection. ``search`` names
    the regularization weights that are optimized; the others stay at
    their ``fixed`` value (default 0). When ``search`` is None the weights
    of the highest-order terms are searched: ``lam2``/``lam3`` for
    structures with quadratic or cubic terms, ``lam1`` otherwise.
    """
    ranks: tuple = None
    energy: float = 1e-10
    grid: LogGrid = DEFAULT_GRID
    search: tuple = None
    fixed: dict = field(default_factory=dict)
    refine: bool = True
    scheme: str = "rk4"
    dt: object = "auto"
    solve_method: str = "auto"
    derivatives: str = "central"

    def search_axes(self, structure):
        if self.search is not None:
            return tuple(self.search)
        axes = tuple(n for n, kind in (("lam2", "quadratic"),
                                       ("lam3", "cubic"))
                     if kind in structure.kinds)
        return axes or ("lam1",)


@dataclass
class TrainingProblem:
    """Projected data and cached regression matrices for one snapshot set."""
    structure: object
    params: np.ndarray
    time: np.ndarray
    bases: list
    reduced: list
    bundle: object
    state_bound: float

    def fit(self, reg, method="auto"):
        ops = solve_regularized(self.bundle, reg, method)
        return Rom(ops, self.bases, self.state_bound,
                   {"regularizer": list(reg.as_tuple())})

    def objective(self, config):
        axes = config.search_axes(self.structure)

        def f(lams):
            values = dict(config.fixed)
            values.update(zip(axes, (float(v) for v in np.atleast_1d(lams))))
            reg = build_regularizer(self.structure, **values)
            rom = self.fit(reg, config.solve_method)
            return training_error(rom, self.params, self.reduced, self.time,
                                  config.scheme, config.dt)
        return f


def select_ranks(snapshots, ranks=None, energy=1e-10, method="auto"):
    """POD bases per variable with explicit or energy-selected ranks."""
    bases = []
    for ell, name in enumerate(snapshots.var_names):
        X = snapshots.concatenated(ell)
        full = compute_pod(X, min(X.shape), name, method)
        r = ranks[ell] if ranks is not None else \
            choose_rank(full.singular_values, energy)
        bases.append(type(full)(np.ascontiguousarray(full.V[:, :r]),
                                full.singular_values, name))
    return bases


def prepare(structure, snapshots, ranks=None, energy=1e-10, bases=None,
            check=True, derivatives="central"):
    """Project snapshots, estimate derivatives, and assemble ``D``/``R``.

    ``derivatives="central"`` uses second-order finite differences at every
    snapshot; ``"backward"`` pairs each snapshot after the first with the
    backward difference leading to it (see
    :func:`~popinf.dataset.backward_difference_pairs`).
    """
    if structure.num_vars != snapshots.num_vars:
        raise ValueError(f"structure has {structure.num_vars} variables, "
                         f"dataset {snapshots.num_vars}")
    if bases is None:
        bases = select_ranks(snapshots, ranks, energy)
    reduced = snapshots.project(bases).states
    if derivatives == "central":
        states = reduced
        derivs = [[estimate_time_derivatives(U, snapshots.time) for U in entry]
                  for entry in reduced]
        time = snapshots.time
    elif derivatives == "backward":
        pairs = [[backward_difference_pairs(U, snapshots.time) for U in entry]
                 for entry in reduced]
        states = [[p[0] for p in entry] for entry in pairs]
        derivs = [[p[1] for p in entry] for entry in pairs]
        time = snapshots.time[1:]
    else:
        raise ValueError(f"unknown derivative estimate {derivatives!r}")
    bundle = build_data_matrix(structure, snapshots.params, states, time,
                               derivatives=derivs, check=check)
    bound = max(float(np.max(np.linalg.norm(np.vstack(entry), axis=0)))
                for entry in reduced)
    return TrainingProblem(structure, snapshots.params, snapshots.time, bases,
                           reduced, bundle, bound)


@dataclass
class TrainResult:
    rom: Rom
    problem: TrainingProblem
    search: object
    report: object
    lambdas: dict


def train(structure, snapshots, config=None, map_func=map, force=False):
    """Learn a ROM: POD, regression, and regularization search.

    Raises
    ------
    WellPosednessError
        If the sampled Theta matrices make the regression ill-posed and
        ``force`` is False.
    """
    config = config or TrainConfig()
    report = check_well_posedness(structure, snapshots.params)
    if report.verdict is not Verdict.ok and not force:
        raise WellPosednessError(report)
    problem = prepare(structure, snapshots, config.ranks, config.energy,
                      check=False, derivatives=config.derivatives)
    axes = config.search_axes(structure)
    objective = problem.objective(config)
    search = optimize_hyperparams(objective, [config.grid] * len(axes),
                                  refine=config.refine, map_func=map_func)
    lambdas = dict(config.fixed)
    lambdas.update(zip(axes, (float(v) for v in search.best)))
    reg = build_regularizer(structure, **lambdas)
    rom = problem.fit(reg, config.solve_method)
    rom.meta.update({
        "lambdas": {k: lambdas.get(k, 0.0) for k in LAMBDA_NAMES},
        "training_error": search.value,
        "on_boundary": search.on_boundary,
        "scheme": config.scheme,
        "dt": config.dt,
        "derivatives": config.derivatives,
        "ranks": list(problem.bundle.ranks),
        "residual_energy": [b.residual_energy() for b in problem.bases],
    })
    if search.on_boundary:
        logger.warning("optimal regularization %s lies on the search "
                       "boundary", search.best)
    return TrainResult(rom, problem, search, report, lambdas)


class WellPosednessError(RuntimeError):
    def __init__(self, report):
        self.report = report
        terms = ", ".join(f"Theta_{t}" for t in report.deficient_terms)
        super().__init__(f"{report.verdict.value}: {terms}")


@dataclass
class Evaluation:
    rom_surface: ErrorSurface
    projection_surface: ErrorSurface
    fom_failures: list


def evaluate(rom, params, solve, scheme="rk4", dt="auto", retry=False,
             chunk=64, param_names=None):
    """ROM and projection errors at each parameter against FOM solves.

    ``solve`` maps a parameter vector to a FomResult. Work proceeds in
    chunks so that only ``chunk`` full-order solutions live in memory.
    """
    params = np.atleast_2d(np.asarray(params, dtype=float))
    n = len(params)
    rom_err = np.full(n, np.nan)
    proj_err = np.full(n, np.nan)
    stable = np.zeros(n, dtype=bool)
    fom_failures = []
    for start in range(0, n, chunk):
        idx = list(range(start, min(n, start + chunk)))
        results = [solve(params[i]) for i in idx]
        good = [j for j, res in zip(idx, results) if res.ok]
        fom_failures += [j for j, res in zip(idx, results) if not res.ok]
        by_index = dict(zip(idx, results))
        if not good:
            continue
        u0s = [rom.reduce([U[:, 0] for U in by_index[j].states])
               for j in good]
        time = by_index[good[0]].time
        trajs = integrate_many(rom, params[good], u0s, time, scheme, dt,
                               retry=retry)
        for j, traj in zip(good, trajs):
            full = np.vstack(by_index[j].states)
            Vs = rom.bases
            proj_err[j] = math.sqrt(sum(
                projection_error(V, U, time)**2 * _sq_norm(U, time)
                for V, U in zip(Vs, by_index[j].states)) /
                _sq_norm(full, time))
            stable[j] = traj.stable
            if traj.stable:
                approx = np.vstack(rom.reconstruct(traj))
                rom_err[j] = relative_l2_error(full, approx, time)
    names = param_names or rom.structure.param_names
    return Evaluation(
        ErrorSurface(params, rom_err, names, stable,
                     {"projection_error": proj_err}),
        ErrorSurface(params, proj_err, names),
        fom_failures)


def _sq_norm(U, time):
    sq = np.sum(U**2, axis=0)
    return float(np.trapezoid(sq, time)) if sq.size > 1 else float(sq[0])
