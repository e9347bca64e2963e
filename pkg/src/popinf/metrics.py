"""Space-time error metrics and summaries over parameter grids."""
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pod import PodBasis


def _l2_time(W, time):
    """``(int ||w(t)||_2^2 dt)^(1/2)`` with the trapezoid rule."""
    sq = np.sum(np.asarray(W, dtype=float)**2, axis=0)
    if sq.size == 1:
        return math.sqrt(sq[0])
    return math.sqrt(np.trapezoid(sq, np.asarray(time, dtype=float)))


def relative_l2_error(reference, approx, time):
    """Relative ``L2([t0, tf])`` error of ``approx`` against ``reference``.

    Columns are time instants; space uses the Euclidean norm.
    """
    reference = np.asarray(reference, dtype=float)
    approx = np.asarray(approx, dtype=float)
    if reference.shape != approx.shape:
        raise ValueError(f"shape mismatch {reference.shape} vs {approx.shape}")
    if reference.shape[1] != np.asarray(time).size:
        raise ValueError("one time value per column required")
    denom = _l2_time(reference, time)
    if denom == 0:
        raise ZeroDivisionError("reference has zero norm")
    return _l2_time(approx - reference, time) / denom


def projection_error(basis, U, time):
    """Relative error of the orthogonal projection ``V V^T U``."""
    V = basis.V if isinstance(basis, PodBasis) else np.asarray(basis)
    if V.ndim != 2 or V.shape[1] == 0:
        raise ValueError("basis needs at least one column")
    U = np.asarray(U, dtype=float)
    return relative_l2_error(U, V @ (V.T @ U), time)


@dataclass
class ErrorSurface:
    """Per-parameter errors with summary statistics.

    Entries flagged unstable carry NaN errors and are left out of the
    statistics.
    """
    params: np.ndarray
    errors: np.ndarray
    param_names: tuple = None
    stable: np.ndarray = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.atleast_2d(np.asarray(self.params, dtype=float))
        self.errors = np.asarray(self.errors, dtype=float).ravel()
        if len(self.params) != self.errors.size:
            raise ValueError("one error per parameter required")
        if self.stable is None:
            self.stable = np.isfinite(self.errors)
        self.stable = np.asarray(self.stable, dtype=bool)
        if self.param_names is None:
            self.param_names = tuple(f"mu{i}"
                                     for i in range(self.params.shape[1]))

    @property
    def summary(self):
        vals = self.errors[self.stable & ~np.isnan(self.errors)]
        return summarize(vals) if vals.size else {}

    def to_csv(self, path):
        """Write one row per parameter and a ``#``-prefixed summary footer."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            extra_cols = list(self.extra)
            w.writerow(list(self.param_names) + ["error", "stable"]
                       + extra_cols)
            for i, mu in enumerate(self.params):
                row = [repr(float(v)) for v in mu]
                row += [repr(float(self.errors[i])), int(self.stable[i])]
                row += [repr(float(self.extra[c][i])) for c in extra_cols]
                w.writerow(row)
            for key, value in self.summary.items():
                fh.write(f"# {key},{value!r}\n")
            fh.write(f"# num_unstable,{int(np.sum(~self.stable))}\n")
        return path


def _quantile(sorted_e, q):
    # linear interpolation that lets +inf entries (unstable runs counted
    # as failures) propagate instead of producing NaN
    pos = q * (sorted_e.size - 1)
    lo, frac = int(math.floor(pos)), pos - math.floor(pos)
    if frac == 0:
        return sorted_e[lo]
    a, b = sorted_e[lo], sorted_e[lo + 1]
    return b if math.isinf(b) else a + frac * (b - a)


def summarize(errors):
    """Median, 10%/90% quantiles, max, and geometric mean of errors.

    Quantiles interpolate linearly between order statistics. The geometric
    mean skips exact zeros. Infinite entries are allowed and propagate.
    """
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise ValueError("no errors to summarize")
    if np.any(e < 0):
        raise ValueError("errors must be nonnegative")
    pos = e[e > 0]
    q10, med, q90 = (_quantile(np.sort(e), q) for q in (0.1, 0.5, 0.9))
    return {
        "count": int(e.size),
        "q10": float(q10),
        "median": float(med),
        "q90": float(q90),
        "max": float(e.max()),
        "geometric_mean": float(np.exp(np.mean(np.log(pos))))
        if pos.size else 0.0,
    }
