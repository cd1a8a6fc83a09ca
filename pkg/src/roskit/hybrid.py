"""Hybrid simulation of the mode-switching frequency controller and the
switching-instant syntheses built on top of it.

The controller is a five-mode hybrid automaton: mode 1 gives no support,
modes 2-5 add rate and/or deviation feedback with fixed gains. Transitions
come from a frequency deadband (activation), scheduled switches, or safety
guards expressed as barrier sublevel sets from the barrier module. Within a
mode the closed loop is affine, so propagation uses exact matrix-exponential
stepping; every switching or disturbance event is located by bisection and
the state is carried across continuously.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .plant import (ClosedLoopModel, MODE_GAINS, SfrParameters,
                    assemble_closed_loop)

EVENT_TOL = 1e-6          # s, bisection tolerance for event times
DEFAULT_DT = 1e-3         # s, output grid
CHATTER_LIMIT = 100       # events per second


class ChatteringError(RuntimeError):
    """Too many switching events in a short window."""


class GuardNeverFiresError(RuntimeError):
    """The requested guard condition never occurs on the trajectory."""


@dataclass
class Mode:
    """One controller mode with its closed-loop realizations."""

    id: int
    reduced: ClosedLoopModel
    full: ClosedLoopModel


def build_modes(sfr: SfrParameters, red, ss) -> dict:
    """Assemble all five modes from the reduction and the 7-state model."""
    modes = {}
    for mid, gains in MODE_GAINS.items():
        modes[mid] = Mode(mid,
                          assemble_closed_loop(sfr, red, gains, "reduced"),
                          assemble_closed_loop(sfr, ss, gains, "full"))
    return modes


@dataclass
class HybridAutomaton:
    modes: dict               # id -> Mode
    sfr: SfrParameters
    guards: dict = field(default_factory=dict)   # id -> RosEstimate

    def model(self, mode_id: int, order: str) -> ClosedLoopModel:
        m = self.modes[mode_id]
        return m.reduced if order == "reduced" else m.full


@dataclass
class Scenario:
    """Disturbance schedule (piecewise-constant load step) and horizon."""

    times: tuple = (0.0, 1.0)
    values: tuple = (0.0, 0.15)
    horizon: float = 60.0
    limit: float = 0.5

    def __post_init__(self):
        if self.horizon <= max(self.times):
            raise ValueError("horizon must exceed the last event time")

    def disturbance(self, t: float) -> float:
        i = int(np.searchsorted(self.times, t + 1e-12) - 1)
        return float(self.values[max(i, 0)])


@dataclass
class Policy:
    """Switching policy: a one-shot deadband trigger and/or fixed switches.

    Once |frequency deviation| exceeds `deadband`, the automaton latches
    into `deadband_mode` until some other rule switches away; with
    `rearm=True` the trigger re-arms after leaving the support mode.
    """

    deadband: float | None = None
    deadband_mode: int | None = None
    schedule: tuple = ()              # ((time, mode_id), ...)
    rearm: bool = False

    def __post_init__(self):
        if (self.deadband is None) != (self.deadband_mode is None):
            raise ValueError("deadband and deadband_mode go together")
        self.schedule = tuple(sorted(self.schedule))


@dataclass
class Trajectory:
    t: np.ndarray              # (m,)
    x: np.ndarray              # (m, n) physical states, x[:, 0] is dw (Hz)
    mode: np.ndarray           # (m,) active mode id
    p_gen: np.ndarray          # (m,) WTG power deviation (pu)
    dw_dot: np.ndarray         # (m,) frequency rate (Hz/s)
    events: list               # (time, label, from_mode, to_mode)
    state_names: tuple
    omega_r_index: int

    def relevant(self) -> np.ndarray:
        """Projection onto (dw, dP_m, dP_v, dw_r) used by the guards."""
        return self.x[:, (0, 1, 2, self.omega_r_index)]

    def nadir(self) -> float:
        return float(self.x[:, 0].min())

    def max_abs_dw(self) -> float:
        return float(np.abs(self.x[:, 0]).max())

    def settle(self, window: float = 5.0) -> float:
        m = self.t >= self.t[-1] - window
        return float(self.x[m, 0].mean())

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_s", "mode", "d_P_gen", "d_omega_dot"]
                       + list(self.state_names))
            for i in range(len(self.t)):
                w.writerow([f"{self.t[i]:.6f}", int(self.mode[i]),
                            f"{self.p_gen[i]:.8g}", f"{self.dw_dot[i]:.8g}"]
                           + [f"{v:.8g}" for v in self.x[i]])

    def events_json(self, path):
        Path(path).write_text(json.dumps(
            [{"time": t, "label": lab, "from": a, "to": b}
             for t, lab, a, b in self.events], indent=2))


def _step(model: ClosedLoopModel, x: np.ndarray, d: float,
          dt: float) -> np.ndarray:
    """Exact propagation of the affine mode dynamics over dt."""
    n = model.n
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = model.A * dt
    M[:n, n] = model.E * d * dt
    P = expm(M)
    return P[:n, :n] @ x + P[:n, n]


def simulate(automaton: HybridAutomaton, scenario: Scenario,
             policy: Policy, order: str = "full",
             dt: float = DEFAULT_DT, x0: np.ndarray | None = None,
             mode0: int = 1) -> Trajectory:
    """Run the hybrid closed loop and return the sampled trajectory."""
    model = automaton.model(mode0, order)
    n = model.n
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    mode_id = mode0
    armed = policy.deadband is not None
    sched = list(policy.schedule)

    m = int(round(scenario.horizon / dt)) + 1
    T = np.linspace(0.0, scenario.horizon, m)
    X = np.empty((m, n))
    MO = np.empty(m, dtype=int)
    PG = np.empty(m)
    WD = np.empty(m)
    events = []

    # per-(mode, d, dt) cached step operators
    ops = {}

    def step_op(mid, d, h):
        key = (mid, round(d, 12), round(h, 12))
        if key not in ops:
            mdl = automaton.model(mid, order)
            nn = mdl.n
            M = np.zeros((nn + 1, nn + 1))
            M[:nn, :nn] = mdl.A * h
            M[:nn, nn] = mdl.E * d * h
            P = expm(M)
            ops[key] = (P[:nn, :nn], P[:nn, nn])
        return ops[key]

    def switch(t, label, new_mode):
        nonlocal mode_id, model
        if new_mode == mode_id:
            return
        events.append((t, label, mode_id, new_mode))
        recent = [e for e in events if e[0] > t - 1.0]
        if len(recent) > CHATTER_LIMIT:
            raise ChatteringError(
                f"{len(recent)} events in the second before t={t:.3f}")
        mode_id = new_mode
        model = automaton.model(new_mode, order)

    def record(i, t, d):
        mdl = automaton.model(mode_id, order)
        xdot = mdl.A @ x + mdl.E * d
        X[i] = x
        MO[i] = mode_id
        WD[i] = xdot[0]
        # power balance of the swing equation recovers the WTG output
        sfr = automaton.sfr
        PG[i] = (2.0 * sfr.H / sfr.omega_s * xdot[0] - x[1] + d
                 + sfr.D / sfr.omega_s * x[0])

    record(0, 0.0, scenario.disturbance(0.0))
    for i in range(1, m):
        t0, t1 = T[i - 1], T[i]
        # scheduled mode switches inside this step happen at their instants
        seg_start, xs = t0, x
        while True:
            # scheduled instants skipped over by an event bisection fire now
            while sched and sched[0][0] <= seg_start + 1e-12:
                _, target = sched.pop(0)
                switch(seg_start, "scheduled", target)
            boundaries = [t1]
            if sched and sched[0][0] < t1 - 1e-12:
                boundaries.append(max(sched[0][0], seg_start))
            tb = min(boundaries)
            d = scenario.disturbance(seg_start)
            # disturbance edges fall on the grid by construction of default
            # scenarios; guard anyway by splitting at schedule times
            for te in scenario.times:
                if seg_start + 1e-12 < te < tb - 1e-12:
                    tb = te
            if tb > seg_start + 1e-15:
                Phi, psi = step_op(mode_id, d, tb - seg_start)
                x_new = Phi @ xs + psi
            else:
                x_new = xs
            # deadband crossing detection within the sub-segment
            if armed and policy.deadband is not None:
                f0 = abs(xs[0]) - policy.deadband
                f1 = abs(x_new[0]) - policy.deadband
                if f0 < 0.0 <= f1:
                    lo, hi = seg_start, tb
                    while hi - lo > EVENT_TOL:
                        mid_t = 0.5 * (lo + hi)
                        Phi, psi = step_op(mode_id, d, mid_t - seg_start)
                        xm = Phi @ xs + psi
                        if abs(xm[0]) - policy.deadband >= 0.0:
                            hi = mid_t
                        else:
                            lo = mid_t
                    Phi, psi = step_op(mode_id, d, hi - seg_start)
                    xs = Phi @ xs + psi
                    seg_start = hi
                    switch(hi, "deadband", policy.deadband_mode)
                    armed = policy.rearm
                    continue
            xs = x_new
            seg_start = tb
            if sched and abs(tb - sched[0][0]) <= 1e-12:
                _, target = sched.pop(0)
                switch(tb, "scheduled", target)
                continue
            if tb >= t1 - 1e-15:
                break
        x = xs
        record(i, t1, scenario.disturbance(t1))
    return Trajectory(T, X, MO, PG, WD, events, model.state_names,
                      model.omega_r_index)


# -- guard evaluation --------------------------------------------------------

def guard_values(traj: Trajectory, guard) -> np.ndarray:
    """Barrier values along the trajectory's relevant-state projection."""
    scaled = guard.scenario.scaling.to_scaled(traj.relevant())
    return guard.barrier.evaluate_many(scaled)


def guard_crossings(traj: Trajectory, guard,
                    direction: str = "neg_to_pos") -> list:
    """(time, dw) pairs where B(x_bar(t)) crosses zero, refined by
    interpolation on the stored grid to the event tolerance."""
    if direction not in ("neg_to_pos", "pos_to_neg"):
        raise ValueError("direction must be neg_to_pos or pos_to_neg")
    v = guard_values(traj, guard)
    s = np.sign(v)
    out = []
    for i in range(1, len(v)):
        a, b = v[i - 1], v[i]
        if a == b:
            continue
        rising = a < 0.0 <= b
        falling = a >= 0.0 > b
        if (direction == "neg_to_pos" and rising) or \
           (direction == "pos_to_neg" and falling):
            # linear refinement inside the 1 ms cell is well below tolerance
            frac = abs(a) / (abs(a) + abs(b))
            t = traj.t[i - 1] + frac * (traj.t[i] - traj.t[i - 1])
            dw = traj.x[i - 1, 0] + frac * (traj.x[i, 0] - traj.x[i - 1, 0])
            out.append((float(t), float(dw)))
    del s
    return out


# -- switching syntheses -----------------------------------------------------

def critical_deadband(automaton: HybridAutomaton, target_mode: int,
                      guard, scenario: Scenario,
                      order: str = "full") -> tuple:
    """Largest safe deadband for engaging `target_mode` from mode 1.

    Simulates the unsupported response, finds the last instant at which the
    state is still inside the target mode's region of safety, and verifies
    by simulation that switching there keeps the loop safe.
    """
    base = simulate(automaton, scenario, Policy(), order=order)
    cross = guard_crossings(base, guard, "neg_to_pos")
    if not cross:
        v = guard_values(base, guard)
        if (v > 0).all():
            raise GuardNeverFiresError(
                "trajectory never enters the target region of safety")
        # never leaves the ROS: any deadband works
        return float(base.t[-1]), float(base.max_abs_dw())
    # ignore re-entries after the unsupported response has already failed
    bad = np.abs(base.x[:, 0]) > scenario.limit
    t_fail = float(base.t[bad][0]) if bad.any() else np.inf
    last_peak = None
    for t_cr, dw in reversed(cross):
        if t_cr >= t_fail:
            continue
        check = simulate(automaton, scenario,
                         Policy(schedule=((t_cr, target_mode),)),
                         order=order)
        last_peak = check.max_abs_dw()
        if last_peak <= scenario.limit:
            return float(t_cr), float(abs(dw))
    raise GuardNeverFiresError(
        "no guard crossing yields a safe switch"
        + (f" (closest peak {last_peak:.3f} Hz)" if last_peak else ""))


def earliest_deactivation(automaton: HybridAutomaton, support_mode: int,
                          guard_mode1, scenario: Scenario,
                          deadband: float, order: str = "full",
                          check: bool = True) -> float:
    """First instant after support activation at which dropping back to
    mode 1 is certified safe by the mode-1 guard."""
    pol = Policy(deadband=deadband, deadband_mode=support_mode)
    traj = simulate(automaton, scenario, pol, order=order)
    if not traj.events:
        raise GuardNeverFiresError("support mode never engaged")
    t_on = traj.events[0][0]
    cross = [c for c in guard_crossings(traj, guard_mode1, "pos_to_neg")
             if c[0] > t_on]
    if not cross:
        raise GuardNeverFiresError(
            "mode-1 guard never becomes negative after activation")
    t_back = cross[0][0]
    if check:
        safe = simulate(automaton, scenario,
                        Policy(deadband=deadband,
                               deadband_mode=support_mode,
                               schedule=((t_back, 1),)), order=order)
        if safe.max_abs_dw() > scenario.limit:
            raise GuardNeverFiresError(
                f"deactivating at t={t_back:.3f} s is not safe")
    return float(t_back)


def deactivation_window(automaton: HybridAutomaton, guard_mode1,
                        guard_mode3, scenario: Scenario,
                        deadband: float = 0.3,
                        order: str = "full") -> tuple:
    """Deadlines for leaving mode 5: the last instant a direct 5->1 drop is
    inside the mode-1 guard, and the last instant a 5->3 step-down is
    inside the mode-3 guard."""
    pol = Policy(deadband=deadband, deadband_mode=5)
    traj = simulate(automaton, scenario, pol, order=order)
    if not traj.events:
        raise GuardNeverFiresError("mode 5 never engaged")
    t_on = traj.events[0][0]

    def deadline(guard):
        v = guard_values(traj, guard)
        ok = (v <= 0.0) & (traj.t > t_on)
        if not ok.any():
            raise GuardNeverFiresError("window is empty")
        return float(traj.t[ok][-1])

    return deadline(guard_mode1), deadline(guard_mode3)


# the synthesis searches only need the peak deviation, which is smooth on
# the governor time scale; a 10 ms grid is ample and much faster
CHECK_DT = 1e-2


def _policy_safe(automaton: HybridAutomaton, scenario: Scenario,
                 policy: Policy, order: str, dt: float = CHECK_DT) -> bool:
    return simulate(automaton, scenario, policy, order=order,
                    dt=dt).max_abs_dw() <= scenario.limit


def max_safe_deadband(automaton: HybridAutomaton, target_mode: int,
                      scenario: Scenario, order: str = "full",
                      lo: float = 0.01, hi: float = None,
                      tol: float = 1e-3) -> float:
    """Largest deadband for engaging `target_mode` that keeps the response
    within the limit, found by bisection on direct simulation. A larger
    deadband means a later switch, which is monotonically less safe."""
    hi = scenario.limit if hi is None else hi

    def safe(db):
        return _policy_safe(automaton, scenario,
                            Policy(deadband=db, deadband_mode=target_mode),
                            order)

    if not safe(lo):
        raise GuardNeverFiresError("even the smallest deadband is unsafe")
    if safe(hi):
        return float(hi)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if safe(mid):
            lo = mid
        else:
            hi = mid
    return float(lo)


def activation_time(automaton: HybridAutomaton, support_mode: int,
                    scenario: Scenario, deadband: float,
                    order: str = "full") -> float:
    """Instant at which the deadband trigger engages the support mode."""
    pol = Policy(deadband=deadband, deadband_mode=support_mode)
    traj = simulate(automaton, scenario, pol, order=order)
    if not traj.events:
        raise GuardNeverFiresError("support mode never engaged")
    return float(traj.events[0][0])


def earliest_safe_return(automaton: HybridAutomaton, support_mode: int,
                         scenario: Scenario, deadband: float,
                         order: str = "full", tol: float = 1e-3) -> float:
    """Earliest instant at which support can be dropped back to mode 1
    without violating the limit, by bisection on direct simulation.
    Returning later is monotonically safer (the transient has decayed)."""
    t_on = activation_time(automaton, support_mode, scenario, deadband,
                           order)

    def safe(t_off):
        return _policy_safe(
            automaton, scenario,
            Policy(deadband=deadband, deadband_mode=support_mode,
                   schedule=((t_off, 1),)), order)

    # start strictly after activation so the scheduled return is not a
    # no-op racing the deadband latch
    lo, hi = t_on + tol, min(t_on + 30.0, scenario.horizon - 5.0)
    if safe(lo):
        return float(lo)
    if not safe(hi):
        raise GuardNeverFiresError("no safe return instant in the window")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if safe(mid):
            hi = mid
        else:
            lo = mid
    return float(hi)


def latest_safe_switch(automaton: HybridAutomaton, support_mode: int,
                       to_mode: int, scenario: Scenario, deadband: float,
                       order: str = "full", tol: float = 1e-3) -> float:
    """Deadline for stepping down from a combined-support mode: the latest
    switch instant that still keeps the response within the limit. The
    longer combined support runs, the deeper the rotor-speed deficit and
    the worse the recovery dip, so later switching is monotonically less
    safe."""
    t_on = activation_time(automaton, support_mode, scenario, deadband,
                           order)

    def safe(t_sw):
        return _policy_safe(
            automaton, scenario,
            Policy(deadband=deadband, deadband_mode=support_mode,
                   schedule=((t_sw, to_mode),)), order)

    # the safe interval may open only after the frequency transient has
    # recovered, so scan coarsely for it, stopping once it has closed, then
    # bisect its closing edge
    t_end = scenario.horizon - 5.0
    grid = np.arange(t_on + tol, t_end, 2.0)
    last = None
    for i, t in enumerate(grid):
        if safe(t):
            last = i
        elif last is not None:
            break
    if last is None:
        raise GuardNeverFiresError("no safe step-down instant exists")
    if last == len(grid) - 1:
        return float(t_end) if safe(t_end) else float(grid[last])
    lo, hi = grid[last], grid[last + 1]
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if safe(mid):
            lo = mid
        else:
            hi = mid
    return float(lo)


def rotor_recovery_check(traj: Trajectory, tol: float = 0.10) -> dict:
    """Energy-balance and rotor-speed recovery check for one episode.

    Integrates the WTG power deviation over the support period and over the
    recovery period; for a full episode the two areas must cancel (the
    rotor kinetic energy borrowed during support is paid back) and the
    rotor-speed deviation must return to its pre-event value.
    """
    support = traj.mode != 1
    if not support.any():
        area_s = area_r = 0.0
        balanced = True
    else:
        i_on = int(np.argmax(support))
        i_off = len(support) - int(np.argmax(support[::-1]))
        if i_off >= len(traj.t):
            raise ValueError("horizon ends inside the support period")
        area_s = float(np.trapezoid(traj.p_gen[i_on:i_off],
                                    traj.t[i_on:i_off]))
        area_r = float(np.trapezoid(traj.p_gen[i_off:], traj.t[i_off:]))
        denom = max(abs(area_s), 1e-12)
        balanced = abs(area_s + area_r) / denom <= tol
    wr_final = float(traj.x[-1, traj.omega_r_index])
    return {"support_area": area_s, "recovery_area": area_r,
            "balanced": bool(balanced),
            "omega_r_final": wr_final,
            "omega_r_recovered": bool(abs(wr_final) < 1e-3)}
