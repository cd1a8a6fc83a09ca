"""Sparse multivariate polynomial algebra and semialgebraic sets.

All verification modules work with these floating-point polynomials. Terms are
kept in graded lexicographic order so that downstream SDP assembly is
deterministic. Coefficients below ``DROP_TOL`` are removed after every
arithmetic operation to prevent fill-in from floating-point dust.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DROP_TOL = 1e-14

Exponent = tuple[int, ...]


def grlex_key(exp: Exponent) -> tuple:
    """Graded lexicographic sort key for an exponent vector."""
    return (sum(exp), tuple(-e for e in exp))


def monomials_up_to(nvars: int, degree: int) -> list[Exponent]:
    """All exponent vectors in ``nvars`` variables of total degree <= degree,
    in graded lexicographic order."""
    out: list[Exponent] = []
    for total in range(degree + 1):
        for exp in _compositions(total, nvars):
            out.append(exp)
    out.sort(key=grlex_key)
    return out


def _compositions(total: int, parts: int) -> Iterable[Exponent]:
    if parts == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for tail in _compositions(total - head, parts - 1):
            yield (head,) + tail


class Polynomial:
    """Sparse polynomial over named variables with float coefficients."""

    __slots__ = ("variables", "terms")

    def __init__(self, variables: Sequence[str],
                 terms: Mapping[Exponent, float] | None = None,
                 drop_tol: float = DROP_TOL):
        self.variables: tuple[str, ...] = tuple(variables)
        cleaned: dict[Exponent, float] = {}
        n = len(self.variables)
        for exp, coeff in (terms or {}).items():
            exp = tuple(int(e) for e in exp)
            if len(exp) != n:
                raise ValueError(
                    f"exponent vector {exp} does not match {n} variables")
            if any(e < 0 for e in exp):
                raise ValueError(f"negative exponent in {exp}")
            c = cleaned.get(exp, 0.0) + float(coeff)
            if abs(c) > drop_tol:
                cleaned[exp] = c
            elif exp in cleaned:
                del cleaned[exp]
        self.terms: dict[Exponent, float] = dict(
            sorted(cleaned.items(), key=lambda kv: grlex_key(kv[0])))

    # -- constructors ------------------------------------------------------

    @classmethod
    def zero(cls, variables: Sequence[str]) -> "Polynomial":
        return cls(variables, {})

    @classmethod
    def constant(cls, variables: Sequence[str], value: float) -> "Polynomial":
        return cls(variables, {(0,) * len(variables): value})

    @classmethod
    def variable(cls, variables: Sequence[str], name: str) -> "Polynomial":
        variables = tuple(variables)
        idx = variables.index(name)
        exp = tuple(1 if i == idx else 0 for i in range(len(variables)))
        return cls(variables, {exp: 1.0})

    @classmethod
    def monomial(cls, variables: Sequence[str], exp: Exponent,
                 coeff: float = 1.0) -> "Polynomial":
        return cls(variables, {tuple(exp): coeff})

    @classmethod
    def affine(cls, variables: Sequence[str], linear: Sequence[float],
               constant: float = 0.0) -> "Polynomial":
        """constant + sum_i linear[i] * x_i."""
        variables = tuple(variables)
        n = len(variables)
        terms: dict[Exponent, float] = {(0,) * n: float(constant)}
        for i, c in enumerate(linear):
            exp = tuple(1 if j == i else 0 for j in range(n))
            terms[exp] = float(c)
        return cls(variables, terms)

    # -- queries -----------------------------------------------------------

    def degree(self) -> int:
        """Max total degree; the zero polynomial has degree 0 by convention."""
        if not self.terms:
            return 0
        return max(sum(exp) for exp in self.terms)

    def is_zero(self) -> bool:
        return not self.terms

    def coefficient(self, exp: Exponent) -> float:
        return self.terms.get(tuple(exp), 0.0)

    def max_abs_coeff(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)

    def __call__(self, point: Sequence[float]) -> float:
        return self.evaluate(point)

    def evaluate(self, point: Sequence[float]) -> float:
        point = np.asarray(point, dtype=float)
        if point.shape != (len(self.variables),):
            raise ValueError(
                f"point of length {point.shape} does not match "
                f"{len(self.variables)} variables")
        total = 0.0
        for exp, coeff in self.terms.items():
            term = coeff
            for x, e in zip(point, exp):
                if e:
                    term *= x ** e
            total += term
        return total

    def evaluate_many(self, points: np.ndarray) -> np.ndarray:
        """Vectorized evaluation on an (npoints, nvars) array."""
        points = np.asarray(points, dtype=float)
        out = np.zeros(points.shape[0])
        for exp, coeff in self.terms.items():
            term = np.full(points.shape[0], coeff)
            for i, e in enumerate(exp):
                if e:
                    term *= points[:, i] ** e
            out += term
        return out

    # -- arithmetic --------------------------------------------------------

    def _check_compatible(self, other: "Polynomial") -> None:
        if self.variables != other.variables:
            raise ValueError(
                f"variable lists differ: {self.variables} vs {other.variables}")

    def __add__(self, other: "Polynomial | float") -> "Polynomial":
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.variables, other)
        self._check_compatible(other)
        terms = dict(self.terms)
        for exp, coeff in other.terms.items():
            terms[exp] = terms.get(exp, 0.0) + coeff
        return Polynomial(self.variables, terms)

    __radd__ = __add__

    def __sub__(self, other: "Polynomial | float") -> "Polynomial":
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.variables, other)
        return self + other.scale(-1.0)

    def __rsub__(self, other: float) -> "Polynomial":
        return Polynomial.constant(self.variables, other) - self

    def __neg__(self) -> "Polynomial":
        return self.scale(-1.0)

    def __mul__(self, other: "Polynomial | float") -> "Polynomial":
        if isinstance(other, (int, float)):
            return self.scale(other)
        self._check_compatible(other)
        terms: dict[Exponent, float] = {}
        for e1, c1 in self.terms.items():
            for e2, c2 in other.terms.items():
                exp = tuple(a + b for a, b in zip(e1, e2))
                terms[exp] = terms.get(exp, 0.0) + c1 * c2
        return Polynomial(self.variables, terms)

    __rmul__ = __mul__

    def scale(self, factor: float) -> "Polynomial":
        return Polynomial(self.variables,
                          {exp: c * factor for exp, c in self.terms.items()})

    def partial(self, var: str) -> "Polynomial":
        idx = self.variables.index(var)
        terms: dict[Exponent, float] = {}
        for exp, coeff in self.terms.items():
            e = exp[idx]
            if e == 0:
                continue
            new = list(exp)
            new[idx] = e - 1
            terms[tuple(new)] = terms.get(tuple(new), 0.0) + coeff * e
        return Polynomial(self.variables, terms)

    def extend_variables(self, variables: Sequence[str]) -> "Polynomial":
        """Re-express over a superset of variables (order given by the
        argument)."""
        variables = tuple(variables)
        index = {v: variables.index(v) for v in self.variables}
        terms: dict[Exponent, float] = {}
        for exp, coeff in self.terms.items():
            new = [0] * len(variables)
            for v, e in zip(self.variables, exp):
                new[index[v]] = e
            terms[tuple(new)] = terms.get(tuple(new), 0.0) + coeff
        return Polynomial(variables, terms)

    def substitute_affine(self, images: Sequence["Polynomial"]) -> "Polynomial":
        """Compose: replace variable i by ``images[i]`` (all sharing one
        variable list)."""
        if len(images) != len(self.variables):
            raise ValueError("one image polynomial per variable required")
        target_vars = images[0].variables
        result = Polynomial.zero(target_vars)
        for exp, coeff in self.terms.items():
            term = Polynomial.constant(target_vars, coeff)
            for img, e in zip(images, exp):
                for _ in range(e):
                    term = term * img
            result = result + term
        return result

    # -- serialization -----------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "variables": list(self.variables),
            "terms": [{"exps": list(exp), "coeff": coeff}
                      for exp, coeff in self.terms.items()],
        }

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "Polynomial":
        return cls(data["variables"],
                   {tuple(t["exps"]): t["coeff"] for t in data["terms"]})

    def __repr__(self) -> str:
        if not self.terms:
            return "Polynomial(0)"
        parts = []
        for exp, coeff in self.terms.items():
            mono = "*".join(f"{v}^{e}" if e > 1 else v
                            for v, e in zip(self.variables, exp) if e)
            parts.append(f"{coeff:+.6g}" + (f"*{mono}" if mono else ""))
        return "Polynomial(" + " ".join(parts) + ")"

    def __eq__(self, other) -> bool:
        return (isinstance(other, Polynomial)
                and self.variables == other.variables
                and self.terms == other.terms)

    def __hash__(self):
        return hash((self.variables, tuple(self.terms.items())))


def lie_derivative(B: Polynomial, f: Sequence[Polynomial]) -> Polynomial:
    """Directional derivative of B along the vector field f.

    B is a polynomial in the state variables; the field components may use
    additional (disturbance) variables. The result lives on the field's
    variable list.
    """
    if len(f) != len(B.variables):
        raise ValueError(
            f"field has {len(f)} components for {len(B.variables)} states")
    target_vars = f[0].variables
    out = Polynomial.zero(target_vars)
    for var, fi in zip(B.variables, f):
        if fi.variables != target_vars:
            raise ValueError("field components must share one variable list")
        out = out + B.partial(var).extend_variables(target_vars) * fi
    return out


@dataclass(frozen=True)
class Scaling:
    """Per-variable affine map between physical units and the [-1, 1] box.

    physical = center + half_width * scaled
    """

    variables: tuple[str, ...]
    center: tuple[float, ...]
    half_width: tuple[float, ...]

    def __post_init__(self):
        if not (len(self.variables) == len(self.center)
                == len(self.half_width)):
            raise ValueError("scaling fields must have equal length")
        if any(w <= 0 for w in self.half_width):
            raise ValueError("half-widths must be strictly positive")

    @classmethod
    def identity(cls, variables: Sequence[str]) -> "Scaling":
        n = len(variables)
        return cls(tuple(variables), (0.0,) * n, (1.0,) * n)

    @classmethod
    def from_box(cls, variables: Sequence[str],
                 lo: Sequence[float], hi: Sequence[float]) -> "Scaling":
        center = tuple((a + b) / 2 for a, b in zip(lo, hi))
        half = tuple((b - a) / 2 for a, b in zip(lo, hi))
        return cls(tuple(variables), center, half)

    def to_physical(self, scaled: np.ndarray) -> np.ndarray:
        scaled = np.asarray(scaled, dtype=float)
        return np.asarray(self.center) + np.asarray(self.half_width) * scaled

    def to_scaled(self, physical: np.ndarray) -> np.ndarray:
        physical = np.asarray(physical, dtype=float)
        return ((physical - np.asarray(self.center))
                / np.asarray(self.half_width))

    def to_json_dict(self) -> dict:
        return {"variables": list(self.variables),
                "center": list(self.center),
                "half_width": list(self.half_width)}

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "Scaling":
        return cls(tuple(data["variables"]), tuple(data["center"]),
                   tuple(data["half_width"]))


def rescale(p: Polynomial, scaling: Scaling) -> Polynomial:
    """Compose p with the physical-from-scaled map, so that the result
    evaluated at scaled points equals p at the corresponding physical points.
    """
    if set(p.variables) - set(scaling.variables):
        raise ValueError("scaling is not defined for all variables")
    p = p.extend_variables(scaling.variables)
    images = [Polynomial.affine(scaling.variables,
                                [w if v == u else 0.0
                                 for u in scaling.variables],
                                c)
              for v, c, w in zip(scaling.variables, scaling.center,
                                 scaling.half_width)]
    return p.substitute_affine(images)


def unscale(p: Polynomial, scaling: Scaling) -> Polynomial:
    """Inverse of :func:`rescale`: express a scaled-coordinate polynomial in
    physical coordinates."""
    images = [Polynomial.affine(scaling.variables,
                                [1.0 / w if v == u else 0.0
                                 for u in scaling.variables],
                                -c / w)
              for v, c, w in zip(scaling.variables, scaling.center,
                                 scaling.half_width)]
    return p.substitute_affine(images)


@dataclass
class SemialgebraicSet:
    """Zero superlevel set {x : g_i(x) >= 0 for all i} with its scaling."""

    inequalities: list[Polynomial]
    variables: tuple[str, ...]
    scaling: Scaling

    def __post_init__(self):
        self.variables = tuple(self.variables)
        for g in self.inequalities:
            if g.variables != self.variables:
                raise ValueError("member polynomials must share the variable "
                                 "list of the set")

    def contains(self, point: Sequence[float], tol: float = 0.0) -> bool:
        return all(g.evaluate(point) >= -tol for g in self.inequalities)

    def contains_many(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        mask = np.ones(points.shape[0], dtype=bool)
        for g in self.inequalities:
            mask &= g.evaluate_many(points) >= -tol
        return mask
