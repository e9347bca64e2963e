"""Parametric polynomial ROMs: assembly, right-hand side, time integration.

States of several parameter values are integrated together. A batch holds
``S`` parameter vectors and stacks all variables of one sample into a row of
an ``(S, r_1 + ... + r_d)`` array.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import kron
from .affine import AffineStructure
from .dataset import load_matrix, save_matrix, uniform_step
from .pod import PodBasis, lift, project
from .regression import OperatorMatrix

logger = logging.getLogger(__name__)

SCHEMES = ("rk4", "imex_euler")
GUARD_FACTOR = 100.0
RETRY_FACTOR = 10
# RK4 is stable on the negative real axis up to about -2.78; stay inside.
RK4_STABILITY = 2.5


@dataclass
class AssembledOperators:
    """Operators of one equation at a fixed parameter value."""
    c: np.ndarray = None
    B: np.ndarray = None
    A: dict = field(default_factory=dict)
    H: dict = field(default_factory=dict)
    G: dict = field(default_factory=dict)


@dataclass
class Rom:
    """Learned (or projected) operators together with their bases.

    ``state_bound`` is the largest norm of a stacked training state; the
    integrator's divergence guard is a multiple of it.
    """
    operators: OperatorMatrix
    bases: list = None
    state_bound: float = None
    meta: dict = field(default_factory=dict)

    @property
    def structure(self):
        return self.operators.structure

    @property
    def ranks(self):
        return self.operators.ranks

    def assemble_at(self, mu):
        """Theta-weighted sums of the stored blocks at ``mu``."""
        out = [AssembledOperators() for _ in range(self.structure.num_vars)]
        thetas = {}
        for b, M in self.operators.blocks():
            term = b.term
            if term.name not in thetas:
                thetas[term.name] = term.theta(mu)
            contrib = thetas[term.name][b.p] * M
            eq = out[term.target]
            if term.kind in ("constant", "input"):
                attr = "c" if term.kind == "constant" else "B"
                prev = getattr(eq, attr)
                setattr(eq, attr, contrib[:, 0] if prev is None
                        else prev + contrib[:, 0])
                continue
            table = {"linear": eq.A, "quadratic": eq.H, "cubic": eq.G}[term.kind]
            key = term.sources if term.kind == "quadratic" else term.sources[0]
            table[key] = table[key] + contrib if key in table else contrib
        return out

    def rhs(self, mu, t, states):
        """Time derivative of every reduced variable at one parameter."""
        states = [np.asarray(u, dtype=float) for u in states]
        for ell, u in enumerate(states):
            if u.shape != (self.ranks[ell],):
                raise ValueError(f"variable {ell}: shape {u.shape} != "
                                 f"{(self.ranks[ell],)}")
            if not np.all(np.isfinite(u)):
                raise FloatingPointError(f"non-finite state in variable {ell}")
        f = self.structure.input_function()
        out = []
        for ops in self.assemble_at(mu):
            ell = len(out)
            du = np.zeros(self.ranks[ell])
            if ops.c is not None:
                du += ops.c
            if ops.B is not None:
                du += ops.B * float(f(t))
            for m, A in ops.A.items():
                du += A @ states[m]
            for (m, n), H in ops.H.items():
                prod = kron.compact_sq(states[m]) if m == n \
                    else kron.khatri_rao(states[m], states[n])
                du += H @ prod
            for m, G in ops.G.items():
                du += G @ kron.compact_cube(states[m])
            out.append(du)
        return out

    def reduce(self, full_states):
        """Initial reduced states ``V_ell^T u_ell``."""
        if self.bases is None:
            raise ValueError("ROM has no bases")
        return [project(b, u) for b, u in zip(self.bases, full_states)]

    def reconstruct(self, traj):
        if self.bases is None:
            raise ValueError("ROM has no bases")
        return [lift(b, U) for b, U in zip(self.bases, traj.states)]

    # Persistence -------------------------------------------------------------
    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        doc = {
            "format": "popinf-rom",
            "version": 1,
            "structure": self.structure.to_dict(),
            "ranks": list(self.ranks),
            "operators": self.operators.save(directory),
            "state_bound": self.state_bound,
            "meta": self.meta,
            "bases": [],
        }
        for b in self.bases or []:
            save_matrix(directory / f"basis_{b.var_label}.pmx", b.V)
            save_matrix(directory / f"sigma_{b.var_label}.pmx",
                        b.singular_values)
            doc["bases"].append({"variable": b.var_label,
                                 "V": f"basis_{b.var_label}.pmx",
                                 "singular_values": f"sigma_{b.var_label}.pmx"})
        path = directory / "rom.json"
        path.write_text(json.dumps(doc, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "rom.json"
        doc = json.loads(path.read_text())
        if doc.get("format") != "popinf-rom":
            raise ValueError(f"{path}: not a ROM manifest")
        structure = AffineStructure.from_dict(doc["structure"])
        ranks = tuple(doc["ranks"])
        ops = OperatorMatrix.load(path.parent, structure, ranks,
                                  doc["operators"])
        bases = [PodBasis(load_matrix(path.parent / e["V"]),
                          load_matrix(path.parent / e["singular_values"])[:, 0],
                          e["variable"]) for e in doc["bases"]] or None
        return cls(ops, bases, doc.get("state_bound"), doc.get("meta", {}))


@dataclass
class ReducedTrajectory:
    """Integrated reduced states; truncated at the first guard violation."""
    states: list
    time: np.ndarray
    stable: bool = True
    fail_time: float = None
    scheme: str = "rk4"
    dt: float = None
    retried: bool = False

    @property
    def num_valid(self):
        return self.states[0].shape[1]

    def save(self, directory, prefix="traj"):
        """One PMX1 file per variable plus the time grid; returns the paths."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for ell, U in enumerate(self.states):
            paths.append(directory / f"{prefix}_{ell + 1}.pmx")
            save_matrix(paths[-1], U)
        paths.append(directory / f"{prefix}_time.pmx")
        save_matrix(paths[-1], self.time[None, :self.num_valid])
        return paths


# Batched evaluation ===========================================================
class _Batch:
    """Right-hand side of ``S`` parameter instances evaluated together."""

    def __init__(self, rom, params):
        self.rom = rom
        params = np.atleast_2d(np.asarray(params, dtype=float))
        self.S = S = len(params)
        ranks = rom.ranks
        self.offsets = np.concatenate([[0], np.cumsum(ranks)]).astype(int)
        self.slices = [slice(self.offsets[m], self.offsets[m + 1])
                       for m in range(len(ranks))]
        n = self.offsets[-1]
        self.L = np.zeros((S, n, n))
        self.c = np.zeros((S, n))
        self.b = np.zeros((S, n))
        self.has_input = False
        nonlinear = {}
        thetas = {}
        for blk, M in rom.operators.blocks():
            term = blk.term
            if term.name not in thetas:
                thetas[term.name] = np.array([term.theta(mu) for mu in params])
                if not np.all(np.isfinite(thetas[term.name])):
                    raise FloatingPointError(f"non-finite theta for {term.name}")
            w = thetas[term.name][:, blk.p]
            rows = self.slices[term.target]
            if term.kind == "constant":
                self.c[:, rows] += w[:, None] * M[:, 0]
            elif term.kind == "input":
                self.b[:, rows] += w[:, None] * M[:, 0]
                self.has_input = True
            elif term.kind == "linear":
                cols = self.slices[term.sources[0]]
                self.L[:, rows, cols] += w[:, None, None] * M
            else:
                if term.name not in nonlinear:
                    nonlinear[term.name] = (term, np.zeros((S,) + M.shape))
                nonlinear[term.name][1][...] += w[:, None, None] * M
        self.nonlinear = list(nonlinear.values())
        self.input_fn = rom.structure.input_function()

    def features(self, term, u):
        parts = [u[:, self.slices[m]].T for m in term.sources]
        if term.kind == "quadratic":
            X = kron.compact_sq(parts[0]) if term.sources[0] == term.sources[1]\
                else kron.khatri_rao(parts[0], parts[1])
        else:
            X = kron.compact_cube(parts[0])
        return X.T

    def explicit(self, t, u):
        """Constant, input, and nonlinear contributions."""
        out = self.c.copy()
        if self.has_input:
            out += float(self.input_fn(t)) * self.b
        for term, W in self.nonlinear:
            X = self.features(term, u)
            out[:, self.slices[term.target]] += np.matmul(
                W, X[:, :, None])[:, :, 0]
        return out

    def linear(self, u):
        return np.matmul(self.L, u[:, :, None])[:, :, 0]

    def full(self, t, u):
        return self.explicit(t, u) + self.linear(u)

    def spectral_radius(self):
        if self.L.shape[1] == 0:
            return 0.0
        return float(np.max(np.abs(np.linalg.eigvals(self.L))))


def _substeps(h, dt):
    n = int(round(h / dt))
    if n < 1 or abs(n * dt - h) > 1e-9 * h:
        raise ValueError(f"integration step {dt} does not divide the output "
                         f"spacing {h}")
    return n


def _run(batch, u0, time, scheme, dt, bound):
    """Integrate a batch; returns ``(U[S, n, K], fail_index[S])``."""
    K = len(time)
    S, n = u0.shape
    h = uniform_step(time) if K > 1 else 0.0
    nsub = _substeps(h, dt) if K > 1 else 1
    dt = h / nsub if K > 1 else 0.0
    out = np.full((S, n, K), np.nan)
    out[:, :, 0] = u0
    fail = np.full(S, K, dtype=int)
    alive = np.ones(S, dtype=bool)
    u = u0.copy()
    if scheme == "imex_euler":
        eye = np.eye(n)
        Minv = np.linalg.inv(eye[None] - dt * batch.L)
    elif scheme != "rk4":
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, K):
            t = time[k - 1]
            for j in range(nsub):
                tj = t + j * dt
                if scheme == "rk4":
                    k1 = batch.full(tj, u)
                    k2 = batch.full(tj + dt / 2, u + dt / 2 * k1)
                    k3 = batch.full(tj + dt / 2, u + dt / 2 * k2)
                    k4 = batch.full(tj + dt, u + dt * k3)
                    u = u + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
                else:
                    rhs = u + dt * batch.explicit(tj, u)
                    u = np.matmul(Minv, rhs[:, :, None])[:, :, 0]
                norms = np.sqrt(np.sum(u**2, axis=1))
                bad = alive & ~(np.isfinite(norms) & (norms <= bound))
                if np.any(bad):
                    fail[bad] = k
                    alive &= ~bad
                    u[bad] = 0.0
            out[alive, :, k] = u[alive]
            if not np.any(alive):
                break
    return out, fail


def integrate_many(rom, params, u0s, time, scheme="rk4", dt="auto",
                   guard_factor=GUARD_FACTOR, retry=False, state_bound=None):
    """Integrate the ROM at several parameter values.

    Parameters
    ----------
    rom : Rom
    params : (S, d_mu) ndarray
    u0s : list over samples of list over variables of (r_ell,) arrays
    time : (K,) uniformly spaced output times; ``u0`` sits at ``time[0]``
    scheme : {"rk4", "imex_euler"}
    dt : float, None, or "auto"
        Internal step; must divide the output spacing. None uses the output
        spacing. "auto" uses the output spacing unless the linear part is
        too stiff for explicit RK4, in which case it subdivides each output
        interval just enough for stability (IMEX Euler always takes the
        output spacing).
    guard_factor : float
        A trajectory is abandoned once its stacked norm exceeds
        ``guard_factor * rom.state_bound`` or turns non-finite.
    retry : bool
        Re-integrate failed instances with a step ``RETRY_FACTOR`` times
        larger (when that still divides the output spacing).
    state_bound : float, optional
        Overrides ``rom.state_bound`` for the guard.

    Returns
    -------
    list of ReducedTrajectory
    """
    time = np.asarray(time, dtype=float)
    params = np.atleast_2d(np.asarray(params, dtype=float))
    batch = _Batch(rom, params)
    u0 = np.array([np.concatenate([np.asarray(v, dtype=float).ravel()
                                   for v in entry]) for entry in u0s])
    u0 = u0.reshape(batch.S, batch.offsets[-1])
    h = uniform_step(time) if time.size > 1 else 1.0
    if dt is None or (dt == "auto" and scheme == "imex_euler"):
        dt = h
    elif dt == "auto":
        rho = batch.spectral_radius()
        dt = h / max(1, math.ceil(h * rho / RK4_STABILITY))
    bound = math.inf
    state_bound = rom.state_bound if state_bound is None else state_bound
    if state_bound is not None and guard_factor is not None:
        bound = guard_factor * state_bound
    U, fail = _run(batch, u0, time, scheme, dt, bound)
    retried = np.zeros(batch.S, dtype=bool)
    dt_retry = dt
    if retry and np.any(fail < time.size):
        idx = np.nonzero(fail < time.size)[0]
        big = dt * RETRY_FACTOR
        try:
            _substeps(h, big)
        except ValueError:
            logger.info("retry step %g does not divide %g; skipped", big, h)
        else:
            sub = _Batch(rom, params[idx])
            U2, fail2 = _run(sub, u0[idx], time, scheme, big, bound)
            U[idx], fail[idx] = U2, fail2
            retried[idx] = True
            dt_retry = big
    trajs = []
    for i in range(batch.S):
        k = fail[i]
        states = [U[i, sl, :k] for sl in batch.slices]
        trajs.append(ReducedTrajectory(
            states, time, stable=bool(k == time.size),
            fail_time=None if k == time.size else float(time[k]),
            scheme=scheme, dt=dt_retry if retried[i] else dt,
            retried=bool(retried[i])))
    return trajs


def integrate(rom, mu, u0, time, scheme="rk4", dt="auto",
              guard_factor=GUARD_FACTOR, retry=False):
    """Integrate the ROM at one parameter value; see :func:`integrate_many`."""
    if isinstance(u0, np.ndarray) and u0.ndim == 1 and rom.structure.num_vars == 1:
        u0 = [u0]
    return integrate_many(rom, [mu], [u0], time, scheme, dt, guard_factor,
                          retry)[0]


# Intrusive projection =========================================================
@dataclass(frozen=True)
class Pointwise:
    """Diagonal polynomial tensor: ``weights * u_m * u_n (* u_k)`` entrywise."""
    weights: np.ndarray


def _project_nonlinear(op, V_out, V_in, order):
    if isinstance(op, Pointwise):
        w = np.asarray(op.weights, dtype=float)
        Vt = [v.T for v in V_in]
        prod = kron.khatri_rao(Vt[0], Vt[1])
        if order == 3:
            prod = kron.khatri_rao(prod, Vt[2])
        return (V_out * w[:, None]).T @ prod.T
    op = op.toarray() if sp.issparse(op) else np.asarray(op, dtype=float)
    W = V_in[0]
    for V in V_in[1:]:
        W = np.kron(W, V)
    return V_out.T @ (op @ W)


def intrusive_rom(structure, full_ops, bases, state_bound=None):
    """Galerkin projection of known full-order affine operators.

    Parameters
    ----------
    structure : AffineStructure
    full_ops : dict
        Term name -> list of ``q`` full-order operators: vectors for
        constant and input terms, (sparse) matrices for linear terms, and
        :class:`Pointwise` weights or dense Kronecker-form matrices for
        quadratic and cubic terms.
    bases : list of PodBasis or (N_ell, r_ell) arrays
    """
    Vs = [b.V if isinstance(b, PodBasis) else np.asarray(b) for b in bases]
    ranks = tuple(V.shape[1] for V in Vs)
    ops = OperatorMatrix.zeros(structure, ranks)
    for term in structure.terms:
        if term.name not in full_ops:
            raise KeyError(f"no full-order operator for term {term.name}")
        mats = full_ops[term.name]
        if len(mats) != term.q:
            raise ValueError(f"term {term.name}: {len(mats)} operators for "
                             f"q = {term.q}")
        Vl = Vs[term.target]
        for p, op in enumerate(mats):
            if term.kind in ("constant", "input"):
                vec = np.asarray(op, dtype=float).ravel()
                if vec.shape[0] != Vl.shape[0]:
                    raise ValueError(f"term {term.name}: length {vec.shape[0]}"
                                     f" != {Vl.shape[0]}")
                block = (Vl.T @ vec)[:, None]
            elif term.kind == "linear":
                Vm = Vs[term.sources[0]]
                if op.shape != (Vl.shape[0], Vm.shape[0]):
                    raise ValueError(f"term {term.name}: shape {op.shape}")
                block = Vl.T @ (op @ Vm)
            elif term.kind == "quadratic":
                m, n = term.sources
                full = _project_nonlinear(op, Vl, [Vs[m], Vs[n]], 2)
                block = kron.compress_quadratic_operator(full) if m == n \
                    else full
            else:
                m = term.sources[0]
                full = _project_nonlinear(op, Vl, [Vs[m]] * 3, 3)
                block = kron.compress_cubic_operator(full)
            ops.set_block(term.name, p, block)
    bases = [b if isinstance(b, PodBasis) else PodBasis(V, np.zeros(0), name)
             for b, V, name in zip(bases, Vs, structure.var_names)]
    return Rom(ops, bases, state_bound, {"kind": "intrusive"})
