"""Affine-parametric model structure and a priori well-posedness checks.

A model structure lists, per equation, the polynomial terms of the reduced
model together with the scalar coefficient functions ``theta(mu)`` that
multiply each parameter-independent operator. Coefficients are signed
monomials in the parameter components, written e.g. ``"-0.1*mu[3]^-1"``.
"""
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import kron

__all__ = [
    "CoeffExpr", "CoeffSyntaxError", "TermSpec", "AffineStructure",
    "ThetaMatrix", "WellPosednessReport", "parse_coeff_expr",
    "eval_theta_matrix", "check_well_posedness", "INPUT_SIGNALS",
    "RANK_RTOL",
]

# Singular values below RANK_RTOL * sigma_max count as zero.
RANK_RTOL = 1e-12

KINDS = ("constant", "input", "linear", "quadratic", "cubic")
_NSOURCES = {"constant": 0, "input": 0, "linear": 1, "quadratic": 2,
             "cubic": 3}


def fhn_pulse(t):
    """Boundary flux ``f(t) = -50000 t^3 exp(-15 t)``."""
    t = np.asarray(t, dtype=float)
    return -50000.0 * t**3 * np.exp(-15.0 * t)


INPUT_SIGNALS = {
    "fhn_pulse": fhn_pulse,
    "zero": lambda t: np.zeros_like(np.asarray(t, dtype=float)),
    "one": lambda t: np.ones_like(np.asarray(t, dtype=float)),
}


# Coefficient expressions ======================================================
class CoeffSyntaxError(ValueError):
    """Malformed coefficient expression; ``offset`` is the byte position."""

    def __init__(self, message, text, offset):
        super().__init__(f"{message} at offset {offset} in {text!r}")
        self.text = text
        self.offset = offset


@dataclass(frozen=True)
class CoeffExpr:
    """Signed monomial ``constant * prod_k mu[index_k]^exponent_k``."""
    constant: float = 1.0
    factors: tuple = ()

    def __call__(self, mu):
        mu = np.asarray(mu, dtype=float)
        value = self.constant
        for index, exponent in self.factors:
            base = mu[..., index]
            if exponent < 0 and np.any(base == 0):
                raise ZeroDivisionError(
                    f"mu[{index}] = 0 raised to a negative power in {self}")
            value = value * base**float(exponent)
        value = np.asarray(value, dtype=float)
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite value of {self} at {mu}")
        return value if value.ndim else float(value)

    @property
    def max_index(self):
        return max((i for i, _ in self.factors), default=-1)

    def __str__(self):
        parts = [repr(float(self.constant))]
        for index, exponent in self.factors:
            parts.append(f"mu[{index}]" if exponent == 1
                         else f"mu[{index}]^{exponent}")
        return "*".join(parts)


class _Parser:
    def __init__(self, text):
        self.text = text
        self.pos = 0

    def error(self, message):
        offset = len(self.text[:self.pos].encode())
        raise CoeffSyntaxError(message, self.text, offset)

    def skip(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self, token):
        self.skip()
        return self.text.startswith(token, self.pos)

    def expect(self, token):
        if not self.peek(token):
            self.error(f"expected {token!r}")
        self.pos += len(token)

    def number(self):
        self.skip()
        start = self.pos
        text = self.text
        while self.pos < len(text) and (text[self.pos].isdigit()
                                        or text[self.pos] in ".eE"
                                        or (text[self.pos] in "+-"
                                            and self.pos > start
                                            and text[self.pos - 1] in "eE")):
            self.pos += 1
        try:
            return float(text[start:self.pos])
        except ValueError:
            self.pos = start
            self.error("expected a number")

    def integer(self, signed):
        self.skip()
        start = self.pos
        if signed and self.pos < len(self.text) and self.text[self.pos] in "+-":
            self.pos += 1
        while self.pos < len(self.text) and self.text[self.pos].isdigit():
            self.pos += 1
        digits = self.text[start:self.pos]
        if not digits.lstrip("+-"):
            self.pos = start
            self.error("expected an integer")
        return int(digits)

    def factor(self):
        self.expect("mu")
        self.expect("[")
        index = self.integer(signed=False)
        self.expect("]")
        exponent = 1
        if self.peek("^"):
            self.pos += 1
            exponent = self.integer(signed=True)
        return (index, exponent)

    def parse(self):
        sign = 1.0
        if self.peek("-"):
            self.pos += 1
            sign = -1.0
        factors = []
        if self.peek("mu"):
            constant = 1.0
            factors.append(self.factor())
        else:
            constant = self.number()
        while self.peek("*"):
            self.pos += 1
            factors.append(self.factor())
        self.skip()
        if self.pos != len(self.text):
            self.error("unexpected trailing input")
        return CoeffExpr(sign * constant, tuple(factors))


def parse_coeff_expr(text):
    """Parse a signed monomial such as ``"mu[0]*mu[3]^-1"``.

    Grammar: ``['-'] (number | factor) {'*' factor}`` with
    ``factor = 'mu[' index ']' ['^' signed-int]``. Index range is checked
    later, against the parameter dimension of the enclosing structure.

    Raises
    ------
    CoeffSyntaxError
        With the byte offset of the first offending character.
    """
    return _Parser(text).parse()


# Structure ====================================================================
@dataclass(frozen=True)
class TermSpec:
    """One polynomial term of one equation with its affine expansion.

    Parameters
    ----------
    kind : str
        One of "constant", "input", "linear", "quadratic", "cubic".
    target : int
        Index of the equation the term belongs to.
    sources : tuple of int
        State variables the term acts on (0, 0, 1, 2, or 3 entries by kind).
    coeffs : tuple of CoeffExpr
        The functions theta^(1), ..., theta^(q).
    name : str
        Label used in reports and artifact file names.
    """
    kind: str
    target: int
    sources: tuple
    coeffs: tuple
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown term kind {self.kind!r}")
        object.__setattr__(self, "sources", tuple(int(m) for m in self.sources))
        object.__setattr__(self, "coeffs", tuple(
            c if isinstance(c, CoeffExpr) else parse_coeff_expr(c)
            for c in self.coeffs))
        if len(self.sources) != _NSOURCES[self.kind]:
            raise ValueError(f"{self.kind} term needs {_NSOURCES[self.kind]} "
                             f"source variables, got {self.sources}")
        if self.kind == "cubic" and len(set(self.sources)) != 1:
            raise ValueError("cubic terms must act on a single variable")
        if self.kind == "quadratic" and self.sources[0] > self.sources[1]:
            raise ValueError("quadratic sources must be ordered (m <= n)")
        if not self.coeffs:
            raise ValueError("a term needs at least one coefficient (q >= 1)")
        if not self.name:
            object.__setattr__(self, "name", self.default_name())

    def default_name(self):
        letter = {"constant": "c", "input": "B", "linear": "A",
                  "quadratic": "H", "cubic": "G"}[self.kind]
        return letter + "".join(str(i + 1) for i in (self.target,)
                                + self.sources)

    @property
    def q(self):
        return len(self.coeffs)

    def block_width(self, ranks):
        """Columns one expansion term occupies in the operator matrix."""
        if self.kind in ("constant", "input"):
            return 1
        r = [ranks[m] for m in self.sources]
        if self.kind == "linear":
            return r[0]
        if self.kind == "quadratic":
            if self.sources[0] == self.sources[1]:
                return kron.num_quadratic(r[0])
            return r[0] * r[1]
        return kron.num_cubic(r[0])

    def theta(self, mu):
        return np.array([c(mu) for c in self.coeffs], dtype=float)


_KIND_ORDER = {k: i for i, k in enumerate(KINDS)}


@dataclass(frozen=True)
class AffineStructure:
    """Declarative description of an affine-parametric polynomial ROM family.

    Terms of each equation are laid out in the operator matrix as constant
    and input blocks, then linear, quadratic, and cubic blocks, each group
    ordered by source variables and then by declaration order.
    """
    num_vars: int
    param_dim: int
    terms: tuple
    input_signal: str = None
    var_names: tuple = None
    param_names: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.var_names is None:
            object.__setattr__(self, "var_names", tuple(
                f"u{i + 1}" for i in range(self.num_vars)))
        if self.param_names is None:
            object.__setattr__(self, "param_names", tuple(
                f"mu{i}" for i in range(self.param_dim)))
        object.__setattr__(self, "var_names", tuple(self.var_names))
        object.__setattr__(self, "param_names", tuple(self.param_names))
        self.validate()

    def validate(self):
        if self.num_vars < 1 or self.param_dim < 1:
            raise ValueError("num_vars and param_dim must be positive")
        if len(self.var_names) != self.num_vars:
            raise ValueError("var_names length must equal num_vars")
        if len(self.param_names) != self.param_dim:
            raise ValueError("param_names length must equal param_dim")
        names = set()
        for term in self.terms:
            for m in (term.target,) + term.sources:
                if not 0 <= m < self.num_vars:
                    raise ValueError(f"term {term.name}: variable index {m} "
                                     f"out of range for {self.num_vars} vars")
            for c in term.coeffs:
                if c.max_index >= self.param_dim:
                    raise ValueError(
                        f"term {term.name}: coefficient {c} references "
                        f"mu[{c.max_index}] but param_dim = {self.param_dim}")
            if term.name in names:
                raise ValueError(f"duplicate term name {term.name!r}")
            names.add(term.name)
            if term.kind == "input":
                if self.input_signal is None:
                    raise ValueError("input terms require an input_signal")
        if self.input_signal is not None and \
                self.input_signal not in INPUT_SIGNALS:
            raise ValueError(f"unknown input signal {self.input_signal!r}; "
                             f"known: {sorted(INPUT_SIGNALS)}")

    def equation_terms(self, ell):
        """Terms of equation ``ell`` in operator-matrix layout order."""
        terms = [t for t in self.terms if t.target == ell]
        return sorted(terms, key=lambda t: (_KIND_ORDER[t.kind], t.sources))

    def column_dimension(self, ell, ranks):
        """Column count ``q_ell(r_1, ..., r_d)`` of equation ``ell``."""
        return sum(t.q * t.block_width(ranks) for t in self.equation_terms(ell))

    def input_function(self):
        return None if self.input_signal is None \
            else INPUT_SIGNALS[self.input_signal]

    @property
    def kinds(self):
        return {t.kind for t in self.terms}

    def term(self, name):
        for t in self.terms:
            if t.name == name:
                return t
        raise KeyError(name)

    # Serialization -----------------------------------------------------------
    def to_dict(self):
        return {
            "variables": list(self.var_names),
            "parameters": list(self.param_names),
            "input_signal": self.input_signal,
            "terms": [{
                "name": t.name,
                "kind": t.kind,
                "target": self.var_names[t.target],
                "sources": [self.var_names[m] for m in t.sources],
                "coeffs": [str(c) for c in t.coeffs],
            } for t in self.terms],
        }

    @classmethod
    def from_dict(cls, doc):
        var_names = list(doc["variables"])
        param_names = list(doc["parameters"])

        def var_index(v):
            if isinstance(v, int):
                return v
            try:
                return var_names.index(v)
            except ValueError:
                raise ValueError(f"unknown variable {v!r}") from None

        terms = [TermSpec(kind=t["kind"], target=var_index(t["target"]),
                          sources=tuple(var_index(v)
                                        for v in t.get("sources", [])),
                          coeffs=tuple(t["coeffs"]), name=t.get("name", ""))
                 for t in doc["terms"]]
        return cls(num_vars=len(var_names), param_dim=len(param_names),
                   terms=terms, input_signal=doc.get("input_signal"),
                   var_names=var_names, param_names=param_names)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


# Theta matrices and well-posedness ============================================
@dataclass(frozen=True)
class ThetaMatrix:
    """Sampled coefficients; row ``i`` is ``theta(mu_i)``."""
    values: np.ndarray
    term_label: str


def eval_theta_matrix(term, samples):
    """Evaluate ``[Theta]_{ij} = theta^(j)(mu_i)`` for one term.

    Raises
    ------
    ZeroDivisionError
        A parameter component raised to a negative power is zero.
    FloatingPointError
        A coefficient evaluates to a non-finite value.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    values = np.array([[c(mu) for c in term.coeffs] for mu in samples],
                      dtype=float).reshape(len(samples), term.q)
    return ThetaMatrix(values, term.name)


class Verdict(str, Enum):
    ok = "ok"
    rank_deficient = "rank_deficient"
    too_few_samples = "too_few_samples"


@dataclass(frozen=True)
class ThetaDiagnostic:
    term_label: str
    q: int
    rank: int
    condition_number: float
    singular_values: np.ndarray

    @property
    def full_rank(self):
        return self.rank == self.q


@dataclass(frozen=True)
class WellPosednessReport:
    num_samples: int
    diagnostics: tuple
    verdict: Verdict = field(default=Verdict.ok)

    @property
    def deficient_terms(self):
        return [d.term_label for d in self.diagnostics if not d.full_rank]

    def format(self):
        lines = [f"well-posedness: {self.verdict.value} "
                 f"(s = {self.num_samples} samples)"]
        for d in self.diagnostics:
            status = "ok" if d.full_rank else "DEFICIENT"
            lines.append(f"  Theta_{d.term_label}: {self.num_samples}x{d.q}, "
                         f"rank {d.rank}, cond {d.condition_number:.6g} "
                         f"[{status}]")
        return "\n".join(lines)


def numerical_rank(singular_values, rtol=RANK_RTOL):
    s = np.asarray(singular_values)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def check_well_posedness(structure, samples):
    """Rank and conditioning of every term's Theta matrix at the samples.

    Theta matrices without full column rank make the regression data matrix
    rank deficient whatever the snapshot data; fewer samples than the
    largest affine expansion guarantees this.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[1] != structure.param_dim:
        raise ValueError(f"samples have dimension {samples.shape[1]}, "
                         f"structure expects {structure.param_dim}")
    s = len(samples)
    diagnostics = []
    for term in structure.terms:
        theta = eval_theta_matrix(term, samples).values
        sv = np.linalg.svd(theta, compute_uv=False)
        rank = numerical_rank(sv)
        if rank == term.q and s >= term.q:
            cond = float(sv[0] / sv[term.q - 1])
        else:
            cond = math.inf
        diagnostics.append(ThetaDiagnostic(term.name, term.q, rank, cond, sv))
    qmax = max((t.q for t in structure.terms), default=0)
    if s < qmax:
        verdict = Verdict.too_few_samples
    elif any(not d.full_rank for d in diagnostics):
        verdict = Verdict.rank_deficient
    else:
        verdict = Verdict.ok
    return WellPosednessReport(s, tuple(diagnostics), verdict)
