"""Sum-of-squares programming on top of the SDP layer.

A program is a set of identities "expression is a sum of squares", where each
expression is affine in the decision objects. Two kinds of decisions exist:

* free-coefficient polynomials (entering through arbitrary linear maps on
  their coefficients, e.g. a Lie derivative), and
* SOS multipliers, parameterized directly by their own PSD Gram matrix and
  entering as (fixed polynomial) * multiplier.

Compilation introduces one Gram block per constraint plus one per multiplier
and emits one linear equality per matched monomial. The full monomial basis
is used (no basis pruning), which keeps the compilation deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .polyalg import Polynomial, grlex_key, monomials_up_to
from . import sdp

RESIDUAL_TOL = 1e-7


class SosError(ValueError):
    pass


class SosNumericalError(RuntimeError):
    pass


@dataclass
class DecisionPoly:
    """Polynomial decision with free coefficients over a full monomial
    basis."""

    name: str
    variables: tuple
    degree: int
    basis: list = field(default=None)

    def __post_init__(self):
        self.variables = tuple(self.variables)
        if self.basis is None:
            self.basis = monomials_up_to(len(self.variables), self.degree)

    @property
    def n_coeffs(self) -> int:
        return len(self.basis)

    def monomial(self, i: int) -> Polynomial:
        return Polynomial.monomial(self.variables, self.basis[i])

    def to_polynomial(self, coeffs: np.ndarray) -> Polynomial:
        return Polynomial(self.variables,
                          {exp: c for exp, c in zip(self.basis, coeffs)})


@dataclass
class SosMultiplier:
    """SOS decision polynomial, parameterized by its Gram matrix."""

    name: str
    variables: tuple
    degree: int
    basis: list = field(default=None)

    def __post_init__(self):
        self.variables = tuple(self.variables)
        if self.degree % 2:
            raise SosError(f"multiplier {self.name}: degree must be even")
        if self.basis is None:
            self.basis = monomials_up_to(len(self.variables),
                                         self.degree // 2)

    @property
    def gram_dim(self) -> int:
        return len(self.basis)

    def to_polynomial(self, gram: np.ndarray) -> Polynomial:
        terms = {}
        for i, a in enumerate(self.basis):
            for j, b in enumerate(self.basis):
                exp = tuple(x + y for x, y in zip(a, b))
                terms[exp] = terms.get(exp, 0.0) + gram[i, j]
        return Polynomial(self.variables, terms)


@dataclass
class Term:
    """One affine contribution of a decision object to a constraint
    expression."""

    decision: object                     # DecisionPoly | SosMultiplier
    factor: Polynomial = None            # multiplier: expr += factor * lam
    coeff_polys: list = None             # poly decision: expr += sum c_i * p_i

    @classmethod
    def product(cls, decision, factor: Polynomial) -> "Term":
        """expr += factor * decision."""
        if isinstance(decision, SosMultiplier):
            return cls(decision, factor=factor)
        polys = [factor * decision.monomial(i).extend_variables(
            factor.variables) for i in range(decision.n_coeffs)]
        return cls(decision, coeff_polys=polys)

    @classmethod
    def linear_map(cls, decision: DecisionPoly, coeff_polys) -> "Term":
        """expr += sum_i c_i * coeff_polys[i] for arbitrary fixed
        polynomials, e.g. a Lie derivative of the decision polynomial."""
        if len(coeff_polys) != decision.n_coeffs:
            raise SosError("one coefficient polynomial per basis monomial")
        return cls(decision, coeff_polys=list(coeff_polys))

    def max_degree(self) -> int:
        if self.factor is not None:
            return self.factor.degree() + self.decision.degree
        return max((p.degree() for p in self.coeff_polys), default=0)


@dataclass
class SosConstraint:
    """Identity: fixed + sum(terms) is a sum of squares of degree
    <= degree."""

    name: str
    variables: tuple
    fixed: Polynomial
    terms: list = field(default_factory=list)
    degree: int = None

    def __post_init__(self):
        self.variables = tuple(self.variables)
        if self.degree is None:
            self.degree = max([self.fixed.degree()]
                              + [t.max_degree() for t in self.terms])
            self.degree += self.degree % 2
        if self.degree % 2:
            raise SosError(f"constraint {self.name}: odd degree bound")


@dataclass
class SosProgram:
    constraints: list
    objective: dict = field(default_factory=dict)  # decision name -> coeffs

    def decision_polys(self):
        seen, out = set(), []
        for c in self.constraints:
            for t in c.terms:
                d = t.decision
                if isinstance(d, DecisionPoly) and id(d) not in seen:
                    seen.add(id(d)); out.append(d)
        return out

    def multipliers(self):
        seen, out = set(), []
        for c in self.constraints:
            for t in c.terms:
                d = t.decision
                if isinstance(d, SosMultiplier) and id(d) not in seen:
                    seen.add(id(d)); out.append(d)
        return out


@dataclass
class SosCertificate:
    gram: np.ndarray
    basis: list
    variables: tuple
    residual: Polynomial

    @property
    def residual_norm(self) -> float:
        return self.residual.max_abs_coeff()

    def gram_polynomial(self) -> Polynomial:
        terms = {}
        for i, a in enumerate(self.basis):
            for j, b in enumerate(self.basis):
                exp = tuple(x + y for x, y in zip(a, b))
                terms[exp] = terms.get(exp, 0.0) + self.gram[i, j]
        return Polynomial(self.variables, terms)

    def to_json_dict(self):
        return {"gram": self.gram.tolist(),
                "basis": [list(b) for b in self.basis],
                "variables": list(self.variables),
                "residual_norm": self.residual_norm}


@dataclass
class SosSolution:
    status: str
    decisions: dict            # name -> Polynomial
    multiplier_polys: dict     # name -> Polynomial
    certificates: dict         # constraint name -> SosCertificate
    sdp_solution: object
    objective_value: float = np.nan


@dataclass
class CompiledSos:
    problem: sdp.SdpProblem
    program: SosProgram
    gram_block: dict           # constraint name -> block index
    gram_basis: dict           # constraint name -> monomial basis
    multiplier_block: dict     # multiplier name -> block index
    decision_slice: dict       # decision name -> (start, stop)

    def recover(self, sol: sdp.SdpSolution) -> SosSolution:
        if sol.status != "optimal":
            return SosSolution(sol.status, {}, {}, {}, sol)
        decisions = {}
        for d in self.program.decision_polys():
            a, b = self.decision_slice[d.name]
            decisions[d.name] = d.to_polynomial(sol.free[a:b])
        mults = {}
        for m in self.program.multipliers():
            mults[m.name] = m.to_polynomial(
                sol.blocks[self.multiplier_block[m.name]])
        certs = {}
        for c in self.program.constraints:
            gram = sol.blocks[self.gram_block[c.name]]
            basis = self.gram_basis[c.name]
            expr = _constraint_expression(c, decisions, mults)
            cert = SosCertificate(gram, basis, c.variables,
                                  Polynomial.zero(c.variables))
            cert.residual = cert.gram_polynomial() - expr
            certs[c.name] = cert
        obj = 0.0
        for name, coeffs in self.program.objective.items():
            a, b = self.decision_slice[name]
            obj += float(np.dot(coeffs, sol.free[a:b]))
        return SosSolution("optimal", decisions, mults, certs, sol, obj)


def _constraint_expression(c: SosConstraint, decisions, mults) -> Polynomial:
    """Reconstruct the constraint expression with concrete decisions."""
    expr = c.fixed.extend_variables(c.variables)
    for t in c.terms:
        if isinstance(t.decision, SosMultiplier):
            lam = mults[t.decision.name].extend_variables(c.variables)
            expr = expr + t.factor.extend_variables(c.variables) * lam
        else:
            dec = decisions[t.decision.name]
            for i, exp in enumerate(t.decision.basis):
                coeff = dec.coefficient(exp)
                if coeff:
                    expr = expr + t.coeff_polys[i].extend_variables(
                        c.variables).scale(coeff)
    return expr


def compile(prog: SosProgram) -> CompiledSos:
    """Lower an SOS program to the canonical SDP form."""
    decision_polys = prog.decision_polys()
    multipliers = prog.multipliers()

    block_dims, gram_block, gram_basis, mult_block = [], {}, {}, {}
    for c in prog.constraints:
        basis = monomials_up_to(len(c.variables), c.degree // 2)
        gram_block[c.name] = len(block_dims)
        gram_basis[c.name] = basis
        block_dims.append(len(basis))
    for m in multipliers:
        mult_block[m.name] = len(block_dims)
        block_dims.append(m.gram_dim)

    decision_slice, n_free = {}, 0
    for d in decision_polys:
        decision_slice[d.name] = (n_free, n_free + d.n_coeffs)
        n_free += d.n_coeffs

    constraints = []
    for c in prog.constraints:
        if c.fixed.degree() > c.degree:
            raise SosError(f"{c.name}: fixed part exceeds degree bound")
        for t in c.terms:
            if t.max_degree() > c.degree:
                raise SosError(f"{c.name}: term on {t.decision.name} of "
                               f"degree {t.max_degree()} exceeds bound "
                               f"{c.degree}")
        # per-monomial accumulators: block entries, free entries, rhs
        rows = {}

        def row(exp):
            if exp not in rows:
                rows[exp] = ({}, {})
            return rows[exp]

        basis = gram_basis[c.name]
        blk = gram_block[c.name]
        for i, a in enumerate(basis):
            for j, b in enumerate(basis):
                exp = tuple(x + y for x, y in zip(a, b))
                ents, _ = row(exp)
                ents[(blk, i, j)] = ents.get((blk, i, j), 0.0) + 1.0

        # expression contributions move to the left-hand side negated:
        # gram(x) - sum(terms) = fixed
        for t in c.terms:
            if isinstance(t.decision, SosMultiplier):
                mblk = mult_block[t.decision.name]
                fac = t.factor.extend_variables(c.variables)
                mb = [tuple(x + y for x, y in zip(a, b))
                      for a in t.decision.basis for b in t.decision.basis]
                nb = t.decision.gram_dim
                for k, pair_exp in enumerate(mb):
                    i, j = divmod(k, nb)
                    for mexp, mc in fac.terms.items():
                        exp = tuple(x + y for x, y in zip(pair_exp, mexp))
                        ents, _ = row(exp)
                        key = (mblk, i, j)
                        ents[key] = ents.get(key, 0.0) - mc
            else:
                start = decision_slice[t.decision.name][0]
                for i, q in enumerate(t.coeff_polys):
                    q = q.extend_variables(c.variables)
                    for mexp, mc in q.terms.items():
                        _, free = row(mexp)
                        free[start + i] = free.get(start + i, 0.0) - mc

        fixed = c.fixed.extend_variables(c.variables)
        for exp in fixed.terms:
            row(exp)

        for exp in sorted(rows, key=grlex_key):
            ents, free = rows[exp]
            per_block = {}
            for (b_idx, i, j), v in ents.items():
                per_block.setdefault(b_idx, ([], [], []))
                r, cc, vv = per_block[b_idx]
                r.append(i); cc.append(j); vv.append(v)
            coeffs = {b_idx: sp.coo_matrix(
                (vv, (r, cc)), shape=(block_dims[b_idx],) * 2)
                for b_idx, (r, cc, vv) in per_block.items()}
            fvec = np.zeros(n_free)
            for k, v in free.items():
                fvec[k] = v
            constraints.append(sdp.SdpConstraint(
                coeffs, fvec, fixed.coefficient(exp)))

    obj_free = np.zeros(n_free)
    for name, coeffs in prog.objective.items():
        a, b = decision_slice[name]
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (b - a,):
            raise SosError(f"objective for {name}: wrong length")
        obj_free[a:b] = coeffs

    problem = sdp.SdpProblem(block_dims, n_free, constraints,
                             obj_free=obj_free)
    return CompiledSos(problem, prog, gram_block, gram_basis, mult_block,
                       decision_slice)


def solve_program(prog: SosProgram, tol: float = 1e-8) -> SosSolution:
    comp = compile(prog)
    sol = sdp.solve(comp.problem, tol=tol)
    return comp.recover(sol)


def check_sos(p: Polynomial, tol: float = 1e-8):
    """Certify p as a sum of squares, or return None if the SDP is
    infeasible (not SOS over the full basis)."""
    if p.degree() % 2:
        raise SosError("odd-degree polynomial cannot be a sum of squares")
    prog = SosProgram([SosConstraint("sos", p.variables, p)])
    out = solve_program(prog, tol=tol)
    if out.status == "optimal":
        return out.certificates["sos"]
    if out.status == "infeasible":
        return None
    raise SosNumericalError(f"solver status {out.status}")


def build_barrier_program(f, g_X, g_I, g_U, g_D, epsilon: float,
                          barrier_degree: int,
                          barrier=None, lam_B=None,
                          multiplier_degree: int = 2,
                          lie_margin: float = 1e-6,
                          objective=None, bound=None) -> SosProgram:
    """Assemble the three barrier-certificate conditions.

    f: list of vector-field components over (x, d); g_X, g_D: lists of
    domain/disturbance inequalities over (x, d); g_U: unsafe inequalities
    over x (intersection semantics). g_I is either a list of inequalities
    describing one initial set, or a list of such lists; each initial set
    gets its own SOS condition, so several sets mean B <= 0 on their union.
    Exactly one of `barrier` (fixed Polynomial) and `lam_B` (fixed
    Polynomial) must be given; the other side becomes the decision object,
    keeping every constraint affine:

      1. -B - lam_I . g_I            is SOS   (B <= 0 on each initial set)
      2.  B - eps - lam_U . g_U      is SOS   (B >= eps on the unsafe set)
      3. -dB/dx . f - lam_D . g_D - lam_X . g_X - lam_B . B - margin is SOS

    When `bound` is given (and B is the decision), a fourth condition
    normalizes the barrier, B <= bound on the domain box, which removes the
    free scaling direction and keeps any linear objective in B bounded.
    """
    if (barrier is None) == (lam_B is None):
        raise SosError("exactly one of barrier and lam_B must be fixed; "
                       "both free would make constraint 3 bilinear")
    if g_I and isinstance(g_I[0], Polynomial):
        initial_sets = [list(g_I)]
    else:
        initial_sets = [list(s) for s in g_I]
    x_vars = initial_sets[0][0].variables
    xd_vars = f[0].variables
    n_x = len(x_vars)
    if xd_vars[:n_x] != x_vars:
        raise SosError("field variables must start with the state variables")

    p = barrier_degree
    if p % 2:
        raise SosError("barrier degree must be even")
    mdeg_iu = max(p - 2, 0)
    mdeg_iu += mdeg_iu % 2

    terms2, terms3 = [], []
    b_term1 = None
    if barrier is None:
        B = DecisionPoly("B", x_vars, p)
        b_term1 = Term.product(B, Polynomial.constant(x_vars, -1.0))
        terms2.append(Term.product(B, Polynomial.constant(x_vars, 1.0)))
        lie_polys = []
        for exp in B.basis:
            mono = Polynomial.monomial(x_vars, exp)
            L = Polynomial.zero(xd_vars)
            for k, v in enumerate(x_vars):
                L = L + mono.partial(v).extend_variables(xd_vars) * f[k]
            lie_polys.append(-L - lam_B.extend_variables(xd_vars)
                             * mono.extend_variables(xd_vars))
        terms3.append(Term.linear_map(B, lie_polys))
        fixed1 = Polynomial.zero(x_vars)
        fixed2 = Polynomial.constant(x_vars, -epsilon)
        fixed3 = Polynomial.constant(xd_vars, -lie_margin)
    else:
        from .polyalg import lie_derivative
        lie = lie_derivative(barrier, f)
        fixed1 = -barrier
        fixed2 = barrier - epsilon
        fixed3 = -lie - lie_margin
        lam_B_mult = SosMultiplier("lam_B", xd_vars, multiplier_degree)
        terms3.append(Term.product(
            lam_B_mult, -barrier.extend_variables(xd_vars)))

    cons = []
    for si, gset in enumerate(initial_sets):
        terms1 = [] if b_term1 is None else [b_term1]
        for k, g in enumerate(gset):
            lam = SosMultiplier(f"lam_I{si}_{k}", x_vars, mdeg_iu)
            terms1.append(Term.product(lam, -g))
        name = "initial" if len(initial_sets) == 1 else f"initial_{si}"
        cons.append(SosConstraint(
            name, x_vars, fixed1, terms1,
            max(p, mdeg_iu + max(g.degree() for g in gset))))
    for k, g in enumerate(g_U):
        lam = SosMultiplier(f"lam_U{k}", x_vars, mdeg_iu)
        terms2.append(Term.product(lam, -g))
    for k, g in enumerate(g_D):
        lam = SosMultiplier(f"lam_D{k}", xd_vars, multiplier_degree)
        terms3.append(Term.product(lam, -g.extend_variables(xd_vars)))
    for k, g in enumerate(g_X):
        lam = SosMultiplier(f"lam_X{k}", xd_vars, multiplier_degree)
        terms3.append(Term.product(lam, -g.extend_variables(xd_vars)))

    deg3 = max(p + max((fi.degree() for fi in f), default=1) - 1,
               multiplier_degree + 2,
               multiplier_degree + p)
    deg3 += deg3 % 2
    cons.append(SosConstraint(
        "unsafe", x_vars, fixed2, terms2,
        max(p, mdeg_iu + max(g.degree() for g in g_U))))
    cons.append(SosConstraint("lie", xd_vars, fixed3, terms3, deg3))
    if bound is not None:
        if barrier is not None:
            raise SosError("bound applies only when the barrier is free")
        terms4 = [Term.product(B, Polynomial.constant(x_vars, -1.0))]
        for k, g in enumerate(g_X):
            lam = SosMultiplier(f"lam_N{k}", x_vars, mdeg_iu)
            terms4.append(Term.product(lam, -g))
        cons.append(SosConstraint(
            "bound", x_vars, Polynomial.constant(x_vars, float(bound)),
            terms4, max(p, mdeg_iu + max(g.degree() for g in g_X))))
    for c in cons:
        c.degree += c.degree % 2
    return SosProgram(cons, objective=objective or {})
