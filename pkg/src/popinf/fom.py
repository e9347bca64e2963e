"""Finite-difference full-order solvers and the benchmark ROM structures.

Two benchmarks are provided: a heat equation on a two-material rod with
homogeneous Dirichlet ends, and the FitzHugh-Nagumo neuron model with a
Neumann boundary pulse. A synthetic generator of exactly representable
quadratic systems supports recovery tests.
"""
import itertools
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .affine import AffineStructure, TermSpec, fhn_pulse
from .rom import Pointwise

logger = logging.getLogger(__name__)


@dataclass
class FomResult:
    """Snapshots of one solve. ``ok`` is False when the solve diverged."""
    states: list
    time: np.ndarray
    ok: bool = True
    fail_time: float = None


def make_param_grid(ranges, exclude=(), keep=None, rtol=1e-12):
    """Cartesian product of per-component value lists.

    The first component varies slowest. Points matching an entry of
    ``exclude`` (to ``rtol``) are dropped, as are points for which the
    optional predicate ``keep`` returns False.

    Returns
    -------
    (n, d_mu) ndarray
    """
    ranges = [np.atleast_1d(np.asarray(r, dtype=float)) for r in ranges]
    if not ranges or any(r.size == 0 for r in ranges):
        raise ValueError("every parameter component needs at least one value")
    pts = np.array(list(itertools.product(*ranges)), dtype=float)
    mask = np.ones(len(pts), dtype=bool)
    exclude = np.asarray(exclude, dtype=float).reshape(-1, len(ranges)) \
        if len(exclude) else np.zeros((0, len(ranges)))
    for e in exclude:
        mask &= ~np.all(np.isclose(pts, e, rtol=rtol, atol=0), axis=1)
    if keep is not None:
        mask &= np.array([bool(keep(p)) for p in pts])
    return pts[mask]


def screen_sensitive(params, solve, solve_refined, threshold=0.3):
    """Keep parameters whose solution is insensitive to refinement.

    ``solve`` and ``solve_refined`` map a parameter vector to a list of
    snapshot matrices on a shared time grid. A parameter is dropped when the
    relative L2 change between the two exceeds ``threshold``.
    """
    from .metrics import relative_l2_error

    kept = []
    for mu in np.atleast_2d(params):
        a, b = solve(mu), solve_refined(mu)
        ref = np.vstack(b.states)
        if not (a.ok and b.ok) or \
                relative_l2_error(ref, np.vstack(a.states), b.time) > threshold:
            logger.info("dropping sensitive parameter %s", mu)
            continue
        kept.append(mu)
    return np.array(kept).reshape(-1, np.atleast_2d(params).shape[1])


# Heat equation ================================================================
@dataclass
class HeatConfig:
    N: int = 200
    interface: float = 2 / 3
    t0: float = 0.0
    tf: float = 1.5
    K: int = 300
    initial: str = "steep"

    def __post_init__(self):
        if not 0 < self.interface < 1:
            raise ValueError("interface must lie in (0, 1)")
        if self.N < 3 or self.K < 2 or not self.tf > self.t0:
            raise ValueError("invalid grid sizes or time interval")

    @property
    def x(self):
        return np.arange(1, self.N + 1) / (self.N + 1)

    @property
    def time(self):
        return np.linspace(self.t0, self.tf, self.K)

    def initial_condition(self):
        x = self.x
        if self.initial == "steep":
            return 1 - (1 - x)**50 - x**50
        if self.initial == "sine":
            return np.sin(np.pi * x)
        raise ValueError(f"unknown initial profile {self.initial!r}")

    def to_dict(self):
        return asdict(self)


def heat_operators(config):
    """Masked second-difference matrices ``(A1, A2)`` on interior points.

    Rows left of the interface (snapped to the nearest grid point) belong to
    ``A1``, the remaining rows to ``A2``; ``A1 + A2`` is the full Dirichlet
    Laplacian.
    """
    N = config.N
    h = 1.0 / (N + 1)
    x = config.x
    lap = sp.diags([np.ones(N - 1), -2 * np.ones(N), np.ones(N - 1)],
                   [-1, 0, 1], format="csr") / h**2
    snapped = x[np.argmin(np.abs(x - config.interface))]
    left = (x < snapped).astype(float)
    A1 = (sp.diags(left) @ lap).tocsr()
    A2 = (sp.diags(1 - left) @ lap).tocsr()
    return A1, A2


def heat_structure():
    """Linear ROM family ``du/dt = (alpha A1 + beta A2) u``."""
    return AffineStructure(
        num_vars=1, param_dim=2,
        terms=(TermSpec("linear", 0, (0,), ("mu[0]", "mu[1]"), name="A"),),
        var_names=("u",), param_names=("alpha", "beta"))


def heat_full_operators(config):
    A1, A2 = heat_operators(config)
    return {"A": [A1, A2]}


def heat_solve(config, mu, operators=None):
    """Implicit-Euler solve; snapshot columns at ``config.time``."""
    alpha, beta = (float(v) for v in mu)
    if not (alpha > 0 and beta > 0):
        raise ValueError(f"diffusivities must be positive, got {mu}")
    A1, A2 = operators or heat_operators(config)
    t = config.time
    dt = t[1] - t[0]
    lu = spla.splu((sp.identity(config.N) - dt * (alpha * A1 + beta * A2))
                   .tocsc())
    U = np.empty((config.N, config.K))
    U[:, 0] = config.initial_condition()
    for k in range(1, config.K):
        U[:, k] = lu.solve(U[:, k - 1])
    return FomResult([U], t)


# FitzHugh-Nagumo ==============================================================
@dataclass
class FhnConfig:
    nx: int = 128
    t0: float = 0.0
    tf: float = 4.0
    dt: float = 1e-3
    stride: int = 10

    def __post_init__(self):
        if self.stride < 1 or self.nx < 3 or not self.dt > 0:
            raise ValueError("invalid FHN discretization")
        n = (self.tf - self.t0) / self.dt
        if abs(n - round(n)) > 1e-9 * n:
            raise ValueError("dt must divide the time interval")
        if round(n) % self.stride:
            raise ValueError("stride must divide the number of steps")

    @property
    def num_steps(self):
        return int(round((self.tf - self.t0) / self.dt))

    @property
    def x(self):
        return np.linspace(0.0, 1.0, self.nx)

    @property
    def time(self):
        """Recorded times: ``t0`` and every ``stride``-th step, ``K`` total."""
        K = self.num_steps // self.stride
        return self.t0 + self.dt * self.stride * np.arange(K)

    def to_dict(self):
        return asdict(self)


def fhn_laplacian(nx):
    """Neumann second-difference matrix and boundary-flux column.

    Ghost nodes mirror the state across both ends; the left ghost value also
    carries the prescribed flux, producing the input column
    ``b = -(2/h) e_0`` so that the discrete Laplacian of ``u`` with
    ``u_x(0) = f`` is ``L u + b f``.
    """
    h = 1.0 / (nx - 1)
    upper = np.ones(nx - 1)
    lower = np.ones(nx - 1)
    upper[0] = 2.0
    lower[-1] = 2.0
    L = sp.diags([lower, -2 * np.ones(nx), upper], [-1, 0, 1],
                 format="csr") / h**2
    b = np.zeros(nx)
    b[0] = -2.0 / h
    return L, b


def fhn_structure():
    """FitzHugh-Nagumo ROM family with parameters (alpha, beta, gamma, eps)."""
    T = TermSpec
    return AffineStructure(
        num_vars=2, param_dim=4,
        terms=(
            T("constant", 0, (), ("mu[0]*mu[3]^-1",)),
            T("input", 0, (), ("mu[3]",)),
            T("linear", 0, (0,), ("mu[3]", "-0.1*mu[3]^-1")),
            T("linear", 0, (1,), ("-1*mu[3]^-1",)),
            T("quadratic", 0, (0, 0), ("1.1*mu[3]^-1",)),
            T("cubic", 0, (0, 0, 0), ("-1*mu[3]^-1",)),
            T("constant", 1, (), ("mu[0]",)),
            T("linear", 1, (0,), ("mu[1]",)),
            T("linear", 1, (1,), ("-1*mu[2]",)),
        ),
        input_signal="fhn_pulse",
        var_names=("u1", "u2"),
        param_names=("alpha", "beta", "gamma", "epsilon"))


def fhn_full_operators(config):
    """Full-order operators in the layout of :func:`fhn_structure`."""
    nx = config.nx
    L, b = fhn_laplacian(nx)
    eye = sp.identity(nx, format="csr")
    ones = np.ones(nx)
    return {
        "c1": [ones], "B1": [b], "A11": [L, eye], "A12": [eye],
        "H111": [Pointwise(ones)], "G1111": [Pointwise(ones)],
        "c2": [ones], "A21": [eye], "A22": [eye],
    }


def fhn_solve(config, mu, input_fn=fhn_pulse):
    """IMEX Euler: linear terms implicit, the rest explicit at ``t_n``.

    Returns
    -------
    FomResult
        ``states = [U1, U2]`` with columns at ``config.time``; on divergence
        ``ok`` is False and the columns after the failure are NaN.
    """
    _, beta, gamma, eps = (float(v) for v in mu)
    if not eps > 0:
        raise ValueError(f"epsilon must be positive, got {eps}")
    nx, dt = config.nx, config.dt
    L, b = fhn_laplacian(nx)
    eye = sp.identity(nx, format="csr")
    lin = sp.bmat([[eps * L - (0.1 / eps) * eye, -(1 / eps) * eye],
                   [beta * eye, -gamma * eye]], format="csc")
    lu = spla.splu(sp.identity(2 * nx, format="csc") - dt * lin)
    time = config.time
    K = time.size
    U = np.full((2 * nx, K), np.nan)
    U[:, 0] = 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        ok, fail_time = _fhn_march(config, mu, input_fn, lu, b, U)
    return FomResult([U[:nx], U[nx:]], time, ok, fail_time)


def _fhn_march(config, mu, input_fn, lu, b, U):
    """Step in place, filling recorded columns of ``U``; ``(ok, fail_time)``."""
    alpha, _, _, eps = (float(v) for v in mu)
    nx, dt = config.nx, config.dt
    K = U.shape[1]
    w = U[:, 0].copy()
    for n in range(config.num_steps):
        t = config.t0 + n * dt
        u1 = w[:nx]
        expl = np.empty(2 * nx)
        expl[:nx] = (alpha + 1.1 * u1**2 - u1**3) / eps \
            + eps * b * float(input_fn(t))
        expl[nx:] = alpha
        w = lu.solve(w + dt * expl)
        if not np.all(np.isfinite(w)):
            return False, t + dt
        if (n + 1) % config.stride == 0 and (n + 1) // config.stride < K:
            U[:, (n + 1) // config.stride] = w
    return True, None


# Synthetic systems ============================================================
@dataclass
class SyntheticSystem:
    """An exactly representable affine quadratic ROM used as a generator.

    ``rom`` has identity bases, so its reduced state is the full state.
    """
    rom: object
    params: np.ndarray
    initial: list = field(default_factory=list)

    def trajectories(self, time, dt=None):
        """RK4 trajectories at ``time``, optionally with a finer step."""
        from .rom import integrate_many
        return integrate_many(self.rom, self.params,
                              [[u] for u in self.initial], time,
                              scheme="rk4", dt=dt, guard_factor=None)

    def derivatives(self, states, mu):
        """Exact right-hand side evaluated along a trajectory."""
        return np.column_stack([self.rom.rhs(mu, 0.0, [u])[0]
                                for u in states.T])


def synthetic_quadratic_system(r=3, qA=2, qH=1, s=4, seed=0, decay=1.0,
                               scale=0.3):
    """Random stable affine system ``du/dt = sum th_A A u + sum th_H H (u^u)``.

    Linear blocks are shifted to be strongly damped so trajectories stay
    bounded on ``[0, 1]``. The coefficient functions are the monomials
    ``mu[0]``, ``mu[1]``, ... and parameters are drawn well separated in
    ``[0.5, 2]^qA``.
    """
    from .regression import OperatorMatrix
    from .rom import Rom

    rng = np.random.default_rng(seed)
    d_mu = max(qA, qH)
    terms = (TermSpec("linear", 0, (0,), tuple(f"mu[{p}]" for p in range(qA)),
                      name="A"),
             TermSpec("quadratic", 0, (0, 0),
                      tuple(f"mu[{p}]" for p in range(qH)), name="H"))
    structure = AffineStructure(1, d_mu, terms, var_names=("u",))
    ops = OperatorMatrix.zeros(structure, (r,))
    for p in range(qA):
        A = scale * rng.standard_normal((r, r))
        ops.set_block("A", p, A - decay * np.eye(r))
    for p in range(qH):
        ops.set_block("H", p, scale * rng.standard_normal((r, r * (r + 1) // 2)))
    params = rng.uniform(0.5, 2.0, size=(s, d_mu))
    initial = [rng.uniform(-1, 1, size=r) for _ in range(s)]
    rom = Rom(ops, None, None, {"kind": "synthetic"})
    return SyntheticSystem(rom, params, initial)
