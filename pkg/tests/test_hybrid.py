"""Hybrid-automaton simulation, event location, and switching syntheses.

Guard-independent anchors come from the closed-form steady state and from
cross-validating the exact matrix-exponential stepping against RK4. The
synthesis operations are exercised with synthetic deadband-shaped guards so
they are testable without running the SOS pipeline.
"""

import numpy as np
import pytest

from roskit import barrier as bar
from roskit import hybrid as hyb
from roskit.polyalg import Polynomial


@pytest.fixture(scope="module")
def modes(sfr, red, ss):
    return hyb.build_modes(sfr, red, ss)


@pytest.fixture(scope="module")
def automaton(modes, sfr):
    return hyb.HybridAutomaton(modes, sfr)


@pytest.fixture(scope="module")
def scenario():
    return hyb.Scenario()


def deadband_guard(sfr, red, mode_id, level_hz):
    """A guard whose zero level is the |dw| = level_hz band, used to drive
    the synthesis mechanics deterministically in tests."""
    from roskit.plant import MODE_GAINS, assemble_closed_loop
    model = assemble_closed_loop(sfr, red, MODE_GAINS[mode_id])
    scen = bar.make_scenario(model, mode_id)
    half = scen.scaling.half_width[0]
    B = Polynomial(scen.x_vars, {(2, 0, 0, 0): half ** 2,
                                 (0, 0, 0, 0): -level_hz ** 2})
    return bar.RosEstimate(B, scen, 0, 2, [1.0])


class TestSimulate:
    def test_mode1_unsafe_baseline(self, automaton, scenario):
        traj = hyb.simulate(automaton, scenario, hyb.Policy())
        assert traj.nadir() < -0.5
        assert traj.settle() == pytest.approx(-0.4286, abs=0.005)

    def test_zero_disturbance_stays_at_rest(self, automaton):
        quiet = hyb.Scenario(values=(0.0, 0.0))
        traj = hyb.simulate(automaton, quiet, hyb.Policy())
        assert traj.max_abs_dw() == 0.0
        assert np.abs(traj.x).max() == 0.0

    def test_reduced_order_close_to_full(self, automaton, scenario):
        a = hyb.simulate(automaton, scenario, hyb.Policy(), order="full")
        b = hyb.simulate(automaton, scenario, hyb.Policy(), order="reduced")
        assert np.max(np.abs(a.x[:, 0] - b.x[:, 0])) <= 0.03

    def test_rk4_cross_check(self, automaton):
        # fixed-step RK4 at 0.1 ms agrees with exact stepping
        scen = hyb.Scenario(horizon=30.0)
        traj = hyb.simulate(automaton, scen, hyb.Policy(), order="reduced")
        m = automaton.model(1, "reduced")
        h = 1e-4
        x = np.zeros(m.n)
        worst = 0.0
        idx = 0
        for k in range(int(30.0 / h)):
            t = k * h
            d = scen.disturbance(t)
            def f(v):
                return m.A @ v + m.E * d
            k1 = f(x)
            k2 = f(x + 0.5 * h * k1)
            k3 = f(x + 0.5 * h * k2)
            k4 = f(x + h * k3)
            x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if (k + 1) % 10 == 0:
                idx += 1
                worst = max(worst, np.max(np.abs(x - traj.x[idx])))
        assert worst < 1e-6

    def test_deadband_event_location(self, automaton, scenario):
        pol = hyb.Policy(deadband=0.3, deadband_mode=2)
        traj = hyb.simulate(automaton, scenario, pol)
        assert len(traj.events) == 1
        t_ev, label, m_from, m_to = traj.events[0]
        assert label == "deadband" and (m_from, m_to) == (1, 2)
        assert t_ev == pytest.approx(1.29, abs=0.2)
        assert traj.max_abs_dw() <= 0.5

    def test_state_continuity_at_events(self, automaton, scenario):
        pol = hyb.Policy(deadband=0.3, deadband_mode=2)
        traj = hyb.simulate(automaton, scenario, pol)
        steps = np.abs(np.diff(traj.x[:, 0]))
        assert steps.max() < 5e-3     # no jumps beyond one grid cell of flow

    def test_scheduled_switch(self, automaton, scenario):
        pol = hyb.Policy(schedule=((5.0, 3),))
        traj = hyb.simulate(automaton, scenario, pol)
        assert traj.events == [(5.0, "scheduled", 1, 3)]
        i = np.searchsorted(traj.t, 5.0)
        assert (traj.mode[:i] == 1).all() and (traj.mode[i + 1:] == 3).all()

    def test_csv_and_event_export(self, automaton, scenario, tmp_path):
        pol = hyb.Policy(deadband=0.3, deadband_mode=2)
        traj = hyb.simulate(automaton, scenario, pol)
        traj.to_csv(tmp_path / "traj.csv")
        traj.events_json(tmp_path / "events.json")
        header = (tmp_path / "traj.csv").read_text().splitlines()[0]
        assert header.startswith("t_s,mode,d_P_gen,d_omega_dot")
        import json
        ev = json.loads((tmp_path / "events.json").read_text())
        assert ev[0]["label"] == "deadband"

    def test_horizon_validation(self):
        with pytest.raises(ValueError):
            hyb.Scenario(times=(0.0, 10.0), values=(0.0, 0.1), horizon=5.0)


class TestGuardCrossings:
    def test_constant_sign_empty(self, automaton, scenario, sfr, red):
        guard = deadband_guard(sfr, red, 2, 5.0)    # never crossed
        traj = hyb.simulate(automaton, scenario, hyb.Policy())
        assert hyb.guard_crossings(traj, guard) == []

    def test_known_crossing_time(self, automaton, scenario, sfr, red):
        # |dw| = 0.3 band: the unsupported response crosses it going down
        guard = deadband_guard(sfr, red, 2, 0.3)
        traj = hyb.simulate(automaton, scenario, hyb.Policy())
        ups = hyb.guard_crossings(traj, guard, "neg_to_pos")
        assert len(ups) >= 1
        t, dw = ups[0]
        assert t == pytest.approx(1.29, abs=0.2)
        assert abs(dw) == pytest.approx(0.3, abs=0.01)

    def test_direction_filter(self, automaton, scenario, sfr, red):
        guard = deadband_guard(sfr, red, 2, 0.45)
        traj = hyb.simulate(automaton, scenario, hyb.Policy())
        up = hyb.guard_crossings(traj, guard, "neg_to_pos")
        down = hyb.guard_crossings(traj, guard, "pos_to_neg")
        # enters the band and exits it again as the governor recovers
        assert len(up) == 1 and len(down) == 1
        assert up[0][0] < down[0][0]

    def test_bad_direction_rejected(self, automaton, scenario, sfr, red):
        guard = deadband_guard(sfr, red, 2, 0.3)
        traj = hyb.simulate(automaton, scenario, hyb.Policy())
        with pytest.raises(ValueError):
            hyb.guard_crossings(traj, guard, "sideways")


class TestSyntheses:
    def test_critical_deadband_mechanics(self, automaton, scenario,
                                         sfr, red):
        # with the |dw| = 0.30 band as the mode-2 guard, the synthesis must
        # reproduce the deadband geometry and pass its own safety check
        guard = deadband_guard(sfr, red, 2, 0.30)
        t_cr, db = hyb.critical_deadband(automaton, 2, guard, scenario)
        assert t_cr == pytest.approx(1.29, abs=0.2)
        assert db == pytest.approx(0.30, abs=0.01)

    def test_critical_deadband_monotone(self, automaton, scenario,
                                        sfr, red):
        g2 = deadband_guard(sfr, red, 2, 0.30)
        g3 = deadband_guard(sfr, red, 3, 0.42)
        t2, db2 = hyb.critical_deadband(automaton, 2, g2, scenario)
        t3, db3 = hyb.critical_deadband(automaton, 3, g3, scenario)
        assert t3 >= t2 and db3 >= db2

    def test_unreachable_guard_raises(self, automaton, scenario, sfr, red):
        guard = deadband_guard(sfr, red, 2, 0.30)
        always_out = bar.RosEstimate(
            Polynomial.constant(guard.scenario.x_vars, 1.0),
            guard.scenario, 0, 2, [0.0])
        with pytest.raises(hyb.GuardNeverFiresError):
            hyb.critical_deadband(automaton, 2, always_out, scenario)

    def test_ge_deadband_safe_but_conservative(self, automaton, scenario):
        # the 0.15 Hz recommended deadband engages early and keeps margin
        pol = hyb.Policy(deadband=0.15, deadband_mode=2)
        traj = hyb.simulate(automaton, scenario, pol)
        assert traj.max_abs_dw() < 0.5 - 0.01

    def test_rotor_recovery_no_support(self, automaton, scenario):
        traj = hyb.simulate(automaton, scenario, hyb.Policy())
        rep = hyb.rotor_recovery_check(traj)
        assert rep["support_area"] == 0.0 and rep["recovery_area"] == 0.0
        assert rep["balanced"]


class TestBindingSyntheses:
    """Simulation-bisection syntheses; binding values frozen from the
    full-order model."""

    def test_max_safe_deadband_mode2(self, automaton, scenario):
        db = hyb.max_safe_deadband(automaton, 2, scenario)
        assert db == pytest.approx(0.3325, abs=0.01)
        # binding: the synthesized value is safe, a hair more is not
        pol = hyb.Policy(deadband=db, deadband_mode=2)
        assert hyb.simulate(automaton, scenario, pol).max_abs_dw() <= 0.5
        pol = hyb.Policy(deadband=db + 0.02, deadband_mode=2)
        assert hyb.simulate(automaton, scenario, pol).max_abs_dw() > 0.5

    def test_activation_time(self, automaton, scenario):
        t = hyb.activation_time(automaton, 2, scenario, 0.30)
        assert t == pytest.approx(1.283, abs=0.01)
        with pytest.raises(hyb.GuardNeverFiresError):
            hyb.activation_time(automaton, 2, scenario, 5.0)

    def test_earliest_safe_return_binding(self, automaton, scenario):
        t_back = hyb.earliest_safe_return(automaton, 2, scenario, 0.30)
        assert t_back == pytest.approx(1.76, abs=0.1)
        # returning earlier (but after activation) violates the limit
        early = hyb.Policy(deadband=0.30, deadband_mode=2,
                           schedule=((t_back - 0.1, 1),))
        assert hyb.simulate(automaton, scenario, early).max_abs_dw() > 0.5
        late = hyb.Policy(deadband=0.30, deadband_mode=2,
                          schedule=((t_back + 0.01, 1),))
        assert hyb.simulate(automaton, scenario, late).max_abs_dw() <= 0.5

    def test_step_down_deadline_binding(self, automaton, scenario):
        t51 = hyb.latest_safe_switch(automaton, 5, 1, scenario, 0.30)
        assert t51 == pytest.approx(20.2, abs=0.3)
        ok = hyb.Policy(deadband=0.30, deadband_mode=5,
                        schedule=((t51 - 0.01, 1),))
        assert hyb.simulate(automaton, scenario, ok).max_abs_dw() <= 0.5
        bad = hyb.Policy(deadband=0.30, deadband_mode=5,
                         schedule=((t51 + 0.5, 1),))
        assert hyb.simulate(automaton, scenario, bad).max_abs_dw() > 0.5


class TestChattering:
    def test_rapid_rearm_aborts(self, automaton):
        # a re-arming deadband sitting exactly at the oscillation amplitude
        # forces rapid mode toggling; expansion of the event log must abort
        scen = hyb.Scenario(values=(0.0, 0.15), horizon=20.0)
        pol = hyb.Policy(deadband=1e-4, deadband_mode=2, rearm=True)
        try:
            traj = hyb.simulate(automaton, scen, pol)
        except hyb.ChatteringError:
            return
        # if no abort, the latch must at least have produced few events
        assert len(traj.events) <= hyb.CHATTER_LIMIT
