"""Snapshot containers, PMX1 matrix files, manifests, and time derivatives.

PMX1 layout: the 4 magic bytes ``b"PMX1"``, rows and cols as little-endian
uint64, then ``rows * cols`` little-endian float64 values in row-major order.
"""
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PMX1"
HEADER_BYTES = 20
_HEADER = np.dtype([("magic", "S4"), ("rows", "<u8"), ("cols", "<u8")])


class MatrixFormatError(ValueError):
    """A file is not a well-formed PMX1 matrix."""


def save_matrix(path, M):
    """Write a 2-D (or 1-D, stored as one column) array as PMX1."""
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2:
        raise ValueError(f"expected a 1-D or 2-D array, got ndim={M.ndim}")
    header = np.array([(MAGIC, M.shape[0], M.shape[1])], dtype=_HEADER)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(M, dtype="<f8").tobytes())


def load_matrix(path):
    """Read a PMX1 file into a native-endian float64 array.

    Raises
    ------
    MatrixFormatError
        Bad magic, truncated header or payload, trailing bytes, or a size
        that cannot be represented.
    """
    data = Path(path).read_bytes()
    if len(data) < HEADER_BYTES:
        raise MatrixFormatError(f"{path}: truncated header ({len(data)} bytes)")
    header = np.frombuffer(data[:HEADER_BYTES], dtype=_HEADER)[0]
    if header["magic"] != MAGIC:
        raise MatrixFormatError(f"{path}: bad magic {bytes(header['magic'])!r}")
    rows, cols = int(header["rows"]), int(header["cols"])
    nbytes = 8 * rows * cols
    if nbytes > 2**62:
        raise MatrixFormatError(f"{path}: size {rows}x{cols} overflows")
    payload = len(data) - HEADER_BYTES
    if payload < nbytes:
        raise MatrixFormatError(f"{path}: truncated payload, expected "
                                f"{nbytes} bytes, found {payload}")
    if payload > nbytes:
        raise MatrixFormatError(f"{path}: {payload - nbytes} trailing bytes")
    values = np.frombuffer(data, dtype="<f8", offset=HEADER_BYTES,
                           count=rows * cols)
    return values.astype(float).reshape(rows, cols)


def file_checksum(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# Snapshot sets ================================================================
@dataclass
class SnapshotSet:
    """Parameter-tagged snapshot matrices sharing one time grid.

    ``states[i][ell]`` is the ``N_ell x K`` matrix of variable ``ell`` at
    parameter ``params[i]``.
    """
    params: np.ndarray
    states: list
    time: np.ndarray
    var_names: tuple = ("u",)
    param_names: tuple = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.atleast_2d(np.asarray(self.params, dtype=float))
        self.time = np.asarray(self.time, dtype=float)
        self.states = [[np.asarray(U, dtype=float) for U in entry]
                       for entry in self.states]
        self.var_names = tuple(self.var_names)
        if self.param_names is None:
            self.param_names = tuple(f"mu{i}"
                                     for i in range(self.params.shape[1]))
        self.param_names = tuple(self.param_names)
        self.validate()

    def validate(self):
        K = self.time.size
        if K < 2:
            raise ValueError("a snapshot set needs at least 2 time points")
        if np.any(np.diff(self.time) <= 0):
            raise ValueError("time grid must be strictly increasing")
        if len(self.states) != len(self.params):
            raise ValueError("one state entry per parameter required")
        for i, entry in enumerate(self.states):
            if len(entry) != len(self.var_names):
                raise ValueError(f"entry {i}: expected {len(self.var_names)} "
                                 f"variables, got {len(entry)}")
            for ell, U in enumerate(entry):
                ref = self.states[0][ell].shape[0]
                if U.ndim != 2 or U.shape != (ref, K):
                    raise ValueError(f"entry {i}, variable {ell}: shape "
                                     f"{U.shape} != {(ref, K)}")

    @property
    def num_samples(self):
        return len(self.params)

    @property
    def num_vars(self):
        return len(self.var_names)

    def concatenated(self, ell):
        """``[U_ell(mu_1) ... U_ell(mu_s)]``, shape ``N_ell x sK``."""
        return np.hstack([entry[ell] for entry in self.states])

    def project(self, bases):
        """Reduced snapshot set ``V_ell^T U_ell(mu_i)``."""
        from .pod import project
        return SnapshotSet(self.params,
                           [[project(b, U) for b, U in zip(bases, entry)]
                            for entry in self.states],
                           self.time, self.var_names, self.param_names,
                           dict(self.meta))

    def subset(self, indices):
        indices = list(indices)
        return SnapshotSet(self.params[indices],
                           [self.states[i] for i in indices], self.time,
                           self.var_names, self.param_names, dict(self.meta))

    # Manifest I/O ------------------------------------------------------------
    def save(self, directory, name="dataset.json"):
        """Write PMX1 files plus a JSON manifest; return the manifest path."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (mu, entry) in enumerate(zip(self.params, self.states)):
            files = {}
            for var, U in zip(self.var_names, entry):
                fname = f"{var}_{i:05d}.pmx"
                save_matrix(directory / fname, U)
                files[var] = fname
            entries.append({"mu": [float(m) for m in mu], "files": files})
        doc = {
            "format": "popinf-dataset",
            "version": 1,
            "variables": list(self.var_names),
            "parameters": list(self.param_names),
            "time_grid": {"t0": float(self.time[0]),
                          "tf": float(self.time[-1]),
                          "K": int(self.time.size)},
            "entries": entries,
            "meta": self.meta,
        }
        if not _is_linspace(self.time):
            doc["time_grid"]["values"] = [float(t) for t in self.time]
        path = directory / name
        path.write_text(json.dumps(doc, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, manifest):
        manifest = Path(manifest)
        doc = json.loads(manifest.read_text())
        if doc.get("format") != "popinf-dataset":
            raise ValueError(f"{manifest}: not a dataset manifest")
        grid = doc["time_grid"]
        if "values" in grid:
            time = np.array(grid["values"], dtype=float)
        else:
            time = np.linspace(grid["t0"], grid["tf"], grid["K"])
        variables = doc["variables"]
        states = [[load_matrix(manifest.parent / e["files"][v])
                   for v in variables] for e in doc["entries"]]
        params = np.array([e["mu"] for e in doc["entries"]], dtype=float)
        return cls(params.reshape(len(states), -1), states, time, variables,
                   doc.get("parameters"), doc.get("meta", {}))


def _is_linspace(t):
    return np.array_equal(t, np.linspace(t[0], t[-1], t.size))


# Time derivatives =============================================================
def uniform_step(time_grid, rtol=1e-10):
    """Common spacing of a uniform grid; raises on nonuniform spacing."""
    t = np.asarray(time_grid, dtype=float)
    steps = np.diff(t)
    h = (t[-1] - t[0]) / (t.size - 1)
    if np.any(np.abs(steps - h) > rtol * abs(h)):
        raise ValueError("time grid is not uniformly spaced")
    return h


def estimate_time_derivatives(Uhat, time_grid):
    """Second-order finite-difference time derivatives of snapshot columns.

    Central differences at interior columns and second-order one-sided
    stencils at the first and last column.

    Parameters
    ----------
    Uhat : (r, K) ndarray
    time_grid : (K,) ndarray
        Uniformly spaced, K >= 3.
    """
    Uhat = np.asarray(Uhat, dtype=float)
    t = np.asarray(time_grid, dtype=float)
    if t.size < 3:
        raise ValueError("need at least 3 time points")
    if Uhat.shape[-1] != t.size:
        raise ValueError(f"{Uhat.shape[-1]} columns for {t.size} time points")
    h = uniform_step(t)
    return np.gradient(Uhat, h, axis=-1, edge_order=2)


def backward_difference_pairs(Uhat, time_grid):
    """States ``u_k`` paired with ``(u_k - u_{k-1}) / dt`` for k >= 1.

    An implicit-Euler trajectory of ``du/dt = A u`` satisfies these pairs
    exactly, so a ROM learned from them and stepped with implicit Euler at
    the snapshot spacing reproduces such data without time-discretization
    mismatch.

    Returns
    -------
    states, derivatives : (r, K-1) ndarrays
    """
    Uhat = np.asarray(Uhat, dtype=float)
    t = np.asarray(time_grid, dtype=float)
    if t.size < 2 or Uhat.shape[-1] != t.size:
        raise ValueError("need matching columns and at least 2 time points")
    h = uniform_step(t)
    return Uhat[:, 1:], np.diff(Uhat, axis=1) / h
