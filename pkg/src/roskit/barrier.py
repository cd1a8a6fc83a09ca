"""Region-of-safety estimation with barrier certificates.

A safety scenario packages one closed-loop mode as a polynomial vector field
in scaled coordinates together with its domain box, unsafe set, and
disturbance range. On top of that this module offers one-shot verification of
a given initial set, simulation-based selection of safe seed points, an
initialization program that fits a first barrier around the seeds, and an
alternation loop that enlarges the zero sublevel set of the barrier while
keeping every iterate a valid certificate. A Monte-Carlo validator
cross-checks any estimate against direct simulation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm
from scipy.stats import qmc

from .polyalg import (Polynomial, Scaling, SemialgebraicSet,
                      monomials_up_to)
from .sos import SosError, SosNumericalError, build_barrier_program, \
    solve_program

STATE_VARS = ("dw", "dpm", "dpv", "dwr")
DIST_VAR = "d"

# Domain box in physical units: frequency deviation (Hz), mechanical and
# valve power deviations (pu), rotor-speed deviation (Hz).
DEFAULT_BOX_LO = (-0.7, -0.25, -0.25, -4.0)
DEFAULT_BOX_HI = (0.7, 0.25, 0.25, 2.0)
DEFAULT_D_MAX = 0.15
DEFAULT_LIMIT = 0.5        # safety limit on the frequency deviation, Hz
DEFAULT_SCHEDULE = (4, 6, 8)
SEED_MARGIN = 0.02         # Hz, extra margin required of simulated seeds
SEED_HORIZON = 60.0        # s
PROBE_POINTS = 4096


class NoneFoundError(RuntimeError):
    """No simulation-safe point exists on the probe grid."""


class InfeasibleInitError(RuntimeError):
    """The initialization program is infeasible; try a smaller seed radius
    or a higher degree."""


@dataclass
class SafetyScenario:
    """One mode's safety-verification problem in scaled coordinates.

    The dynamics are affine, dx/dt = A x + E d in physical units, with the
    scalar disturbance d in [0, d_max]. All polynomial data (field, domain,
    unsafe set) live in the scaled [-1, 1] box coordinates; `scaling` maps
    between the two.
    """

    mode_id: int
    A: np.ndarray                  # physical-coordinate dynamics
    E: np.ndarray
    scaling: Scaling
    f: list                        # scaled field, Polynomials in (x, d)
    g_X: list                      # domain inequalities, scaled x
    g_U: list                      # unsafe inequalities, scaled x
    g_D: list                      # disturbance inequalities in (x, d)
    d_max: float = DEFAULT_D_MAX
    limit: float = DEFAULT_LIMIT   # |x_phys[0]| >= limit is a violation
    two_sided: bool = True
    epsilon: float = 1e-3
    degree_schedule: tuple = DEFAULT_SCHEDULE

    def __post_init__(self):
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")
        self.A = np.asarray(self.A, dtype=float)
        self.E = np.asarray(self.E, dtype=float)

    @property
    def x_vars(self) -> tuple:
        return self.scaling.variables

    @property
    def xd_vars(self) -> tuple:
        return self.x_vars + (DIST_VAR,)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def domain(self) -> SemialgebraicSet:
        return SemialgebraicSet(list(self.g_X), self.x_vars, self.scaling)

    def unsafe(self) -> SemialgebraicSet:
        return SemialgebraicSet(list(self.g_U), self.x_vars, self.scaling)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        payload = {
            "mode_id": self.mode_id,
            "A": np.round(self.A, 12).tolist(),
            "E": np.round(self.E, 12).tolist(),
            "scaling": self.scaling.to_json_dict(),
            "d_max": self.d_max,
            "limit": self.limit,
        }
        h.update(json.dumps(payload, sort_keys=True).encode())
        return h.hexdigest()[:16]


def make_scenario(model, mode_id: int | None = None,
                  box_lo=DEFAULT_BOX_LO, box_hi=DEFAULT_BOX_HI,
                  d_max: float = DEFAULT_D_MAX,
                  limit: float = DEFAULT_LIMIT,
                  epsilon: float = 1e-3,
                  degree_schedule: tuple = DEFAULT_SCHEDULE) -> SafetyScenario:
    """Build a SafetyScenario from a reduced-order closed-loop model.

    The unsafe set is the two-sided band |frequency deviation| >= limit; the
    disturbance is the load step magnitude, free in [0, d_max].
    """
    A, E = np.asarray(model.A, float), np.asarray(model.E, float)
    n = A.shape[0]
    if n != len(STATE_VARS):
        raise ValueError(f"expected a {len(STATE_VARS)}-state model, got {n}")
    scaling = Scaling.from_box(STATE_VARS, box_lo, box_hi)
    x_vars = scaling.variables
    xd = x_vars + (DIST_VAR,)
    half = np.asarray(scaling.half_width)
    center = np.asarray(scaling.center)

    # scaled field: dz/dt = S^-1 (A (c + S z) + E d)
    f = []
    for i in range(n):
        lin = list(A[i, :] * half / half[i]) + [E[i] / half[i]]
        const = float(A[i, :] @ center) / half[i]
        f.append(Polynomial.affine(xd, lin, const))

    g_X = [Polynomial(x_vars,
                      {(0,) * n: 1.0,
                       tuple(2 if j == i else 0 for j in range(n)): -1.0})
           for i in range(n)]
    # |dw_phys| >= limit in scaled coordinates
    w_poly = Polynomial.affine(x_vars, [half[0] if v == x_vars[0] else 0.0
                                        for v in x_vars], center[0])
    g_U = [w_poly * w_poly - limit ** 2]
    d_poly = Polynomial.variable(xd, DIST_VAR)
    g_D = [d_poly * (d_max - d_poly)]
    return SafetyScenario(0 if mode_id is None else mode_id,
                          A, E, scaling, f, g_X, g_U, g_D, d_max, limit,
                          True, epsilon, tuple(degree_schedule))


@dataclass
class ProbeGrid:
    """Deterministic low-discrepancy point set over the scaled domain box."""

    points: np.ndarray           # (m, n) in [-1, 1]^n

    @classmethod
    def build(cls, n_dims: int, n_points: int = PROBE_POINTS,
              seed: int = 0) -> "ProbeGrid":
        sob = qmc.Sobol(d=n_dims, scramble=True, seed=seed)
        u = sob.random(n_points)
        return cls(2.0 * u - 1.0)


# -- simulation helpers ------------------------------------------------------

def _step_operator(A: np.ndarray, E: np.ndarray, dt: float):
    """Exact one-step operator for dx/dt = A x + E d with constant d:
    x+ = Phi x + psi d."""
    n = A.shape[0]
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = A * dt
    M[:n, n] = E * dt
    P = expm(M)
    return P[:n, :n], P[:n, n]


def simulate_many(scenario: SafetyScenario, x0_phys: np.ndarray,
                  d_value: float, horizon: float = SEED_HORIZON,
                  dt: float = 0.02) -> np.ndarray:
    """Propagate a batch of initial conditions under constant disturbance
    and return the running max of |x[0]| per trajectory."""
    Phi, psi = _step_operator(scenario.A, scenario.E, dt)
    X = np.atleast_2d(np.asarray(x0_phys, dtype=float)).copy()
    peak = np.abs(X[:, 0]) if scenario.two_sided else X[:, 0].copy()
    steps = int(round(horizon / dt))
    for _ in range(steps):
        X = X @ Phi.T + psi * d_value
        v = np.abs(X[:, 0]) if scenario.two_sided else X[:, 0]
        np.maximum(peak, v, out=peak)
    return peak


def simulate_schedule(scenario: SafetyScenario, x0_phys: np.ndarray,
                      times: np.ndarray, values: np.ndarray,
                      horizon: float = SEED_HORIZON,
                      dt: float = 0.02) -> np.ndarray:
    """Same, under a piecewise-constant disturbance schedule shared by the
    whole batch. `times` are segment start instants beginning at 0."""
    Phi, psi = _step_operator(scenario.A, scenario.E, dt)
    X = np.atleast_2d(np.asarray(x0_phys, dtype=float)).copy()
    peak = np.abs(X[:, 0]) if scenario.two_sided else X[:, 0].copy()
    steps = int(round(horizon / dt))
    edges = list(times[1:]) + [np.inf]
    seg = 0
    t = 0.0
    for _ in range(steps):
        while t >= edges[seg] - 1e-12:
            seg += 1
        X = X @ Phi.T + psi * float(values[seg])
        t += dt
        v = np.abs(X[:, 0]) if scenario.two_sided else X[:, 0]
        np.maximum(peak, v, out=peak)
    return peak


def worst_case_peak(A: np.ndarray, E: np.ndarray, d_max: float,
                    horizon: float = 200.0, dt: float = 0.01) -> float:
    """Supremum over measurable disturbances d(t) in [0, d_max] of the peak
    |frequency deviation| reachable from rest.

    By superposition the extremal disturbance switches to d_max exactly when
    the disturbance-channel impulse response has the right sign, so the
    supremum is d_max times the larger one-sided rectified integral."""
    Phi = expm(np.asarray(A, float) * dt)
    x = np.asarray(E, float).copy()
    h = np.empty(int(round(horizon / dt)) + 1)
    for i in range(h.size):
        h[i] = x[0]
        x = Phi @ x
    neg = float(np.trapezoid(np.maximum(0.0, -h), dx=dt))
    pos = float(np.trapezoid(np.maximum(0.0, h), dx=dt))
    return d_max * max(neg, pos)


# -- seed selection ----------------------------------------------------------

def find_safe_seeds(scenario: SafetyScenario, N: int,
                    grid: ProbeGrid | None = None,
                    margin: float = SEED_MARGIN) -> np.ndarray:
    """Pick N simulation-verified safe points (scaled coordinates).

    A point qualifies if the closed loop started there stays `margin` inside
    the safety limit for the whole horizon under both d = 0 and d = d_max.
    The equilibrium is taken first when it qualifies; the rest come from
    farthest-point selection over the safe subset of the probe grid.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if grid is None:
        grid = ProbeGrid.build(scenario.n)
    pts = grid.points
    phys = scenario.scaling.to_physical(pts)
    thresh = scenario.limit - margin
    safe = ((simulate_many(scenario, phys, 0.0) < thresh)
            & (simulate_many(scenario, phys, scenario.d_max) < thresh))
    origin_phys = np.zeros(scenario.n)
    origin_ok = (
        simulate_many(scenario, origin_phys[None, :], 0.0)[0] < thresh
        and simulate_many(scenario, origin_phys[None, :],
                          scenario.d_max)[0] < thresh)
    candidates = pts[safe]
    if candidates.shape[0] == 0 and not origin_ok:
        raise NoneFoundError("no probe point survives the safety simulation")

    chosen = []
    if origin_ok:
        chosen.append(scenario.scaling.to_scaled(origin_phys))
    while len(chosen) < N and candidates.shape[0] > 0:
        if not chosen:
            chosen.append(candidates[0])
            continue
        dists = np.min(
            np.linalg.norm(candidates[:, None, :]
                           - np.asarray(chosen)[None, :, :], axis=2), axis=1)
        k = int(np.argmax(dists))
        if dists[k] <= 1e-12:
            break
        chosen.append(candidates[k])
    if not chosen:
        raise NoneFoundError("no safe seed available")
    return np.asarray(chosen[:N])


# -- initialization and expansion --------------------------------------------

def _seed_balls(scenario: SafetyScenario, seeds: np.ndarray,
                rho: float) -> list:
    sets = []
    x_vars = scenario.x_vars
    n = scenario.n
    for s in np.atleast_2d(seeds):
        terms = {(0,) * n: rho ** 2 - float(np.dot(s, s))}
        for i in range(n):
            e1 = tuple(1 if j == i else 0 for j in range(n))
            e2 = tuple(2 if j == i else 0 for j in range(n))
            terms[e1] = terms.get(e1, 0.0) + 2.0 * float(s[i])
            terms[e2] = terms.get(e2, 0.0) - 1.0
        sets.append([Polynomial(x_vars, terms)])
    return sets


def _mean_objective(basis, points: np.ndarray) -> np.ndarray:
    """Average of each basis monomial over the probe points."""
    out = np.empty(len(basis))
    for i, exp in enumerate(basis):
        v = np.ones(points.shape[0])
        for j, e in enumerate(exp):
            if e:
                v = v * points[:, j] ** e
        out[i] = v.mean()
    return out


def initialize(scenario: SafetyScenario, seeds: np.ndarray,
               r: float = 1.0, rho: float = 0.02,
               degree: int | None = None) -> Polynomial:
    """Fit a first barrier whose zero sublevel set covers a small ball
    around every seed, with the Lie multiplier fixed to the constant r."""
    if r <= 0:
        raise ValueError("r must be positive")
    degrees = ([degree] if degree is not None
               else list(scenario.degree_schedule))
    g_I = _seed_balls(scenario, seeds, rho)
    lam_B = Polynomial.constant(scenario.xd_vars, float(r))
    for deg in degrees:
        prog = build_barrier_program(scenario.f, scenario.g_X, g_I,
                                     scenario.g_U, scenario.g_D,
                                     scenario.epsilon, deg, lam_B=lam_B)
        sol = solve_program(prog)
        if sol.status == "optimal":
            return sol.decisions["B"]
        if sol.status != "infeasible":
            raise SosNumericalError(
                f"initialization solver status {sol.status}")
    raise InfeasibleInitError(
        "initialization infeasible; reduce rho or raise the degree")


@dataclass
class RosEstimate:
    """An inner estimate of the region of safety: the zero sublevel set of
    a certified barrier in scaled coordinates."""

    barrier: Polynomial
    scenario: SafetyScenario
    iterations: int
    degree: int
    growth_history: list = field(default_factory=list)

    def coverage(self, points: np.ndarray) -> float:
        return float(np.mean(self.barrier.evaluate_many(points) <= 0.0))

    def to_json_dict(self) -> dict:
        return {"barrier": self.barrier.to_json_dict(),
                "scaling": self.scenario.scaling.to_json_dict(),
                "scenario_hash": self.scenario.content_hash(),
                "mode_id": self.scenario.mode_id,
                "iterations": self.iterations,
                "degree": self.degree,
                "growth_history": list(self.growth_history)}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2))

    @staticmethod
    def load(path, scenario: SafetyScenario) -> "RosEstimate":
        data = json.loads(Path(path).read_text())
        if data["scenario_hash"] != scenario.content_hash():
            raise ValueError("guard file does not match this scenario")
        est = RosEstimate(Polynomial.from_json_dict(data["barrier"]),
                          scenario, data["iterations"], data["degree"],
                          list(data["growth_history"]))
        return est


def _solve_retry(prog):
    """Solve, retrying once at a looser tolerance when the interior-point
    method hits numerical trouble on a near-degenerate iterate."""
    sol = solve_program(prog)
    if sol.status not in ("optimal", "infeasible"):
        sol = solve_program(prog, tol=1e-6)
    return sol


def _solve_lam_b(scenario: SafetyScenario, B: Polynomial,
                 g_I: list) -> Polynomial | None:
    """Step (a): with the barrier fixed, find a feasible Lie multiplier."""
    prog = build_barrier_program(scenario.f, scenario.g_X, g_I,
                                 scenario.g_U, scenario.g_D,
                                 scenario.epsilon, B.degree() + B.degree() % 2,
                                 barrier=B)
    sol = _solve_retry(prog)
    if sol.status != "optimal":
        return None
    return sol.multiplier_polys["lam_B"]


def _solve_barrier(scenario: SafetyScenario, lam_B: Polynomial,
                   g_I: list, degree: int,
                   objective: np.ndarray) -> Polynomial | None:
    """Step (b): with the multiplier fixed, grow the barrier."""
    prog = build_barrier_program(
        scenario.f, scenario.g_X, g_I, scenario.g_U, scenario.g_D,
        scenario.epsilon, degree, lam_B=lam_B,
        objective={"B": objective}, bound=1.0)
    sol = _solve_retry(prog)
    if sol.status != "optimal":
        return None
    return sol.decisions["B"]


def expand(scenario: SafetyScenario, B0: Polynomial,
           grid: ProbeGrid | None = None,
           max_iters: int = 20,
           literal_containment: bool = False) -> RosEstimate:
    """Enlarge the zero sublevel set of B0 by bilinear alternation.

    Each round fixes the current barrier to recover a Lie multiplier, then
    fixes that multiplier and re-solves for a barrier whose sublevel set
    contains the previous one, minimizing the mean of the barrier over the
    probe grid so the set actually grows. Infeasibility escalates the degree
    in steps of two up to the schedule maximum. `literal_containment` flips
    the sign of the containment constraint to the uncorrected variant, for
    comparison only; it does not encode containment.
    """
    if grid is None:
        grid = ProbeGrid.build(scenario.n)
    pts = grid.points

    B = B0
    degree = max(B0.degree() + B0.degree() % 2,
                 scenario.degree_schedule[0])
    max_degree = scenario.degree_schedule[-1]
    growth = [float(np.mean(B.evaluate_many(pts) <= 0.0))]
    stall = 0
    iters = 0
    for _ in range(max_iters):
        g_prev = B if literal_containment else -B
        g_I = [[g_prev]]
        lam = _solve_lam_b(scenario, B, g_I)
        if lam is None:
            # the current iterate certifies itself with a constant multiplier
            lam = Polynomial.constant(scenario.xd_vars, 1.0)
        objective = _mean_objective(
            monomials_up_to(scenario.n, degree), pts)
        B_new = _solve_barrier(scenario, lam, g_I, degree, objective)
        if B_new is None:
            if degree + 2 <= max_degree:
                degree += 2
                continue
            break
        cov = float(np.mean(B_new.evaluate_many(pts) <= 0.0))
        if cov < growth[-1] - 1e-3:
            break
        iters += 1
        improvement = cov - growth[-1]
        B = B_new
        growth.append(cov)
        if improvement < 0.01 * max(growth[-1], 1e-12):
            stall += 1
            if stall >= 2:
                break
        else:
            stall = 0
    return RosEstimate(B, scenario, iters, degree, growth)


# -- one-shot verification ---------------------------------------------------

@dataclass
class BarrierCertificate:
    barrier: Polynomial
    degree: int
    solution: object           # SosSolution with Gram certificates


def verify_safety(scenario: SafetyScenario, X_I: SemialgebraicSet,
                  r: float = 1.0, n_check: int = 256, seed: int = 0):
    """Try to certify that every trajectory from X_I stays safe.

    Returns a BarrierCertificate, or None when every degree in the schedule
    is infeasible. An unverified outcome does not imply the system is unsafe.
    """
    rng = np.random.default_rng(seed)
    # probe past the box so an initial set spilling outside it is noticed
    probes = rng.uniform(-1.5, 1.5, size=(4 * n_check, scenario.n))
    inside = X_I.contains_many(probes)
    if inside.any():
        dom = scenario.domain().contains_many(probes[inside])
        if not dom.all():
            raise ValueError("initial set leaves the domain box")
    lam_B = Polynomial.constant(scenario.xd_vars, float(r))
    for degree in scenario.degree_schedule:
        prog = build_barrier_program(
            scenario.f, scenario.g_X, list(X_I.inequalities),
            scenario.g_U, scenario.g_D, scenario.epsilon, degree,
            lam_B=lam_B)
        sol = solve_program(prog)
        if sol.status == "optimal":
            return BarrierCertificate(sol.decisions["B"], degree, sol)
        if sol.status not in ("infeasible",):
            raise SosNumericalError(f"solver status {sol.status} "
                                    f"at degree {degree}")
    return None


# -- soundness checks --------------------------------------------------------

def pointwise_soundness(scenario: SafetyScenario, B: Polynomial,
                        initial_sets: list | None = None,
                        n_samples: int = 10_000, seed: int = 1) -> dict:
    """Sample-based check of the three certificate conditions."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(n_samples, scenario.n))
    d = rng.uniform(0.0, scenario.d_max, size=(n_samples, 1))
    xd = np.hstack([x, d])
    vals = B.evaluate_many(x)
    report = {"initial_max": None, "unsafe_min": None, "lie_max": None,
              "ok": True}

    if initial_sets:
        worst = -np.inf
        for gset in initial_sets:
            mask = np.ones(n_samples, dtype=bool)
            for g in gset:
                mask &= g.evaluate_many(x) >= 0.0
            if mask.any():
                worst = max(worst, float(vals[mask].max()))
        if np.isfinite(worst):
            report["initial_max"] = worst
            report["ok"] &= worst <= 1e-6

    unsafe_mask = np.ones(n_samples, dtype=bool)
    for g in scenario.g_U:
        unsafe_mask &= g.evaluate_many(x) >= 0.0
    for g in scenario.g_X:
        unsafe_mask &= g.evaluate_many(x) >= 0.0
    if unsafe_mask.any():
        m = float(vals[unsafe_mask].min())
        report["unsafe_min"] = m
        report["ok"] &= m >= scenario.epsilon - 1e-6

    lie = Polynomial.zero(scenario.xd_vars)
    for k, v in enumerate(scenario.x_vars):
        lie = lie + (B.partial(v).extend_variables(scenario.xd_vars)
                     * scenario.f[k])
    level = np.abs(vals) <= 1e-3
    dom = np.ones(n_samples, dtype=bool)
    for g in scenario.g_X:
        dom &= g.evaluate_many(x) >= 0.0
    dmask = np.ones(n_samples, dtype=bool)
    for g in scenario.g_D:
        dmask &= g.evaluate_many(xd) >= 0.0
    mask = level & dom & dmask
    if mask.any():
        m = float(lie.evaluate_many(xd[mask]).max())
        report["lie_max"] = m
        report["ok"] &= m <= 1e-6
    report["ok"] = bool(report["ok"])
    return report


# -- Monte-Carlo validation --------------------------------------------------

@dataclass
class ValidationReport:
    trials: int
    violations: int
    no_samples: bool
    worst_peak: float

    @property
    def ok(self) -> bool:
        return self.violations == 0


def sample_validate(ros: RosEstimate, trials: int,
                    seed: int = 0, horizon: float = SEED_HORIZON,
                    n_schedules: int = 10) -> ValidationReport:
    """Simulate from random points inside the estimate and look for safety
    violations under constant and piecewise-constant disturbances."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    sc = ros.scenario
    rng = np.random.default_rng(seed)
    # rejection-sample the strict interior of the sublevel set
    samples = []
    attempts = 0
    while len(samples) < trials and attempts < 200:
        cand = rng.uniform(-1.0, 1.0, size=(4 * trials, sc.n))
        keep = ros.barrier.evaluate_many(cand) <= -1e-3
        samples.extend(cand[keep])
        attempts += 1
    if not samples:
        return ValidationReport(0, 0, True, 0.0)
    pts = np.asarray(samples[:trials])
    phys = sc.scaling.to_physical(pts)

    peaks = [simulate_many(sc, phys, sc.d_max, horizon),
             simulate_many(sc, phys, 0.0, horizon)]
    for _ in range(n_schedules):
        t, edges, vals = 0.0, [0.0], []
        while t < horizon:
            dur = rng.uniform(0.5, 5.0)
            vals.append(rng.uniform(0.0, sc.d_max))
            t += dur
            edges.append(t)
        peaks.append(simulate_schedule(
            sc, phys, np.asarray(edges[:-1]), np.asarray(vals), horizon))
    peak = np.max(np.vstack(peaks), axis=0)
    violations = int(np.sum(peak >= sc.limit))
    return ValidationReport(pts.shape[0], violations, False,
                            float(peak.max()))
