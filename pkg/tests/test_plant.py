"""Plant chain: DAE equilibrium, linearization, reduction, closed loops, and
support quantification.

Numerical anchors were frozen from independent derivations: the equilibrium
splits stator/rotor power as the supersynchronous textbook case, the
frequency response of the Kron-reduced model matches the raw DAE, and the
reduced one-state rotor model reproduces the published aggregate
coefficients of this machine and operating point.
"""

import numpy as np
import pytest
from scipy.linalg import expm

from roskit.plant import (MODE_GAINS, ConvergenceError, ModeGains,
                          OperatingCondition, PlantParameters, SfrParameters,
                          assemble_closed_loop, calibrate, cross_check_inertia,
                          dae_frequency_response, emulated_damping,
                          emulated_inertia, initial_rocof, linearize,
                          kron_reduce, quantify_support, sma_reduce,
                          solve_equilibrium, ss_frequency_response)
from roskit.plant.dae import residuals, turbine_torque


class TestParameters:
    def test_derived_time_constant(self, params):
        # T0' = X_r / (2 pi 60 R_r)
        assert params.T0_prime == pytest.approx(1.081, rel=2e-3)

    def test_transient_reactance(self, params):
        assert params.X_s_prime == pytest.approx(
            params.X_s - params.X_m ** 2 / params.X_r, rel=1e-12)

    def test_mppt_schedule_hits_operating_point(self, params, cond):
        assert params.p_ref_mppt(cond.omega_r) == pytest.approx(
            cond.P_gen, abs=1e-9)

    def test_steady_state_deviation(self, sfr):
        assert sfr.steady_state_deviation(0.15) == pytest.approx(
            -0.42857, abs=1e-4)


class TestEquilibrium:
    def test_residuals_vanish(self, params, cond, equilibrium):
        state, alg = equilibrium
        r = residuals(state, alg, params, cond)
        assert np.max(np.abs(r)) < 1e-9

    def test_supersynchronous_power_split(self, equilibrium):
        state, alg = equilibrium
        # stator delivers 0.25 pu, rotor converter the remaining 0.05 pu
        V_qr, V_dr, I_qr, I_dr = alg[0], alg[1], alg[2], alg[3]
        p_rotor = V_qr * I_qr + V_dr * I_dr
        assert alg[4] == pytest.approx(0.3, abs=1e-9)     # total P_gen
        assert p_rotor == pytest.approx(0.05, abs=0.01)

    def test_rotor_speed_supersynchronous(self, equilibrium, cond):
        state, _ = equilibrium
        assert state[2] == pytest.approx(cond.omega_r)
        assert state[2] > 60.0

    def test_torque_balance(self, params, cond, equilibrium):
        state, alg = equilibrium
        E_q, E_d = state[0], state[1]
        I_ds, I_qs = alg[6], alg[7]
        t_e = E_d * I_ds + E_q * I_qs
        _, _, _, t_m = turbine_torque(cond.omega_r, cond.v_wind,
                                      cond.theta_t, params)
        assert t_e == pytest.approx(t_m, rel=1e-8)

    def test_uncalibrated_parameters_rejected(self):
        with pytest.raises(ValueError):
            solve_equilibrium(PlantParameters())


class TestLinearization:
    def test_seven_state_hurwitz(self, ss):
        eigs = np.linalg.eigvals(ss.A_sys)
        assert np.max(eigs.real) < 0.0

    def test_frequency_response_consistency(self, lin, ss):
        # the Kron reduction must preserve the DAE transfer function
        for s in (0.1j, 1.0j, 1.0 + 2.0j, 10.0j):
            h_dae = dae_frequency_response(lin, s)
            h_ss = ss_frequency_response(ss, s)
            assert h_ss == pytest.approx(h_dae, rel=1e-6)

    def test_feedthrough_channels_identical(self, ss):
        # both supplementary channels share one power-reference path
        assert ss.D_sys1 == pytest.approx(ss.D_sys2, rel=1e-12)


class TestReduction:
    def test_rotor_mode_anchor(self, red):
        assert red.a_rd == pytest.approx(-0.0723, abs=0.005)

    def test_output_coupling_anchor(self, red):
        assert red.c_rd == pytest.approx(0.0127, abs=0.002)

    def test_gain_table(self, red):
        # aggregate input/feedthrough coefficients for the four active modes
        for K_ie, b_ref in ((-0.10, 0.6246), (-0.20, 1.2492)):
            b1, d1, _, _ = red.gain_coeffs(K_ie, 0.0)
            assert b1 == pytest.approx(b_ref, rel=0.01)
            assert d1 == pytest.approx(K_ie, abs=1e-6)
        for K_pc, b_ref in ((-0.03, 0.1874), (-0.06, 0.3748)):
            _, _, b2, d2 = red.gain_coeffs(0.0, K_pc)
            assert b2 == pytest.approx(b_ref, rel=0.01)
            assert d2 == pytest.approx(K_pc, abs=1e-6)

    def test_relevant_mode_is_slowest(self, red, ss):
        eigs = np.linalg.eigvals(ss.A_sys)
        slowest = eigs[np.argmin(np.abs(eigs.real))]
        assert red.lambda_r == pytest.approx(slowest, rel=1e-9)
        assert not red.lambda_r_complex

    def test_rotor_speed_dominates_relevant_mode(self, red):
        # the retained state has the highest participation in the slow mode
        col = np.abs(red.participation[:, red.relevant_mode])
        assert int(np.argmax(col)) == 2   # rotor-speed position

    def test_unit_feedthrough_after_reduction(self, red):
        assert red.d_rd_unit == pytest.approx(1.0, abs=1e-6)


class TestClosedLoop:
    def test_mode_gain_table(self):
        assert MODE_GAINS[1] == ModeGains(0.0, 0.0)
        assert MODE_GAINS[2] == ModeGains(-0.10, 0.0)
        assert MODE_GAINS[3] == ModeGains(-0.20, 0.0)
        assert MODE_GAINS[4] == ModeGains(-0.10, -0.03)
        assert MODE_GAINS[5] == ModeGains(-0.20, -0.06)

    @pytest.mark.parametrize("mode", [1, 2, 3, 4, 5])
    def test_closed_loops_stable(self, sfr, red, mode):
        model = assemble_closed_loop(sfr, red, MODE_GAINS[mode])
        assert np.max(np.linalg.eigvals(model.A).real) < 0.0

    def test_reduced_full_fidelity(self, sfr, red, ss):
        # frequency trajectories of the 4-state and 10-state loops agree
        t_grid = np.linspace(0.0, 30.0, 3001)
        for mode in (2, 3, 4, 5):
            mr = assemble_closed_loop(sfr, red, MODE_GAINS[mode], "reduced")
            mf = assemble_closed_loop(sfr, ss, MODE_GAINS[mode], "full")
            dw = {}
            for tag, m in (("r", mr), ("f", mf)):
                n = m.n
                M = np.zeros((n + 1, n + 1))
                M[:n, :n] = m.A
                M[:n, n] = m.E * 0.15
                step = expm(M * (t_grid[1] - t_grid[0]))
                x = np.zeros(n + 1)
                x[n] = 1.0
                out = np.empty(len(t_grid))
                for i in range(len(t_grid)):
                    out[i] = x[0]
                    x = step @ x
                dw[tag] = out
            assert np.max(np.abs(dw["r"] - dw["f"])) <= 0.03

    def test_ill_posed_loop_detected(self, sfr, red):
        from roskit.plant import IllPosedLoopError
        # a rate gain that cancels the grid inertia exactly
        bad = ModeGains(K_ie=2.0 * sfr.H / sfr.omega_s / red.d_rd_unit,
                        K_pc=0.0)
        with pytest.raises(IllPosedLoopError):
            assemble_closed_loop(sfr, red, bad)


class TestQuantification:
    def test_initial_emulated_inertia(self, red):
        # H_e(0) = -0.5 omega_s D_rd1
        assert emulated_inertia(red, -0.10, [0.0])[0] == pytest.approx(3.0)
        assert emulated_inertia(red, -0.20, [0.0])[0] == pytest.approx(6.0)

    def test_inertia_decay_anchor(self, red):
        # value after the 2 s inertia window, frozen from the closed form
        assert emulated_inertia(red, -0.10, [2.0])[0] == pytest.approx(
            2.56, abs=0.01)

    def test_emulated_damping_at_activation(self, red):
        assert emulated_damping(red, -0.03, [15.0], 15.0)[0] == \
            pytest.approx(1.8, rel=1e-6)
        assert emulated_damping(red, -0.06, [15.0], 15.0)[0] == \
            pytest.approx(3.6, rel=1e-6)

    def test_negative_time_rejected(self, red):
        with pytest.raises(ValueError):
            emulated_inertia(red, -0.1, [-1.0])
        with pytest.raises(ValueError):
            emulated_damping(red, -0.03, [10.0], 15.0)

    def test_quantify_support_csv(self, red, tmp_path):
        q = quantify_support(red, MODE_GAINS[4])
        path = tmp_path / "support.csv"
        q.to_csv(path)
        header = path.read_text().splitlines()[0]
        assert header.split(",") == ["t_inertia_s", "H_e_s",
                                     "t_damping_s", "D_e_pu"]

    @pytest.mark.parametrize("mode", [1, 2, 3, 4, 5])
    def test_rocof_cross_check(self, sfr, red, mode):
        model = assemble_closed_loop(sfr, red, MODE_GAINS[mode])
        rep = cross_check_inertia(model, sfr, delta_p_d=0.15)
        assert rep["pass"], rep

    def test_initial_rocof_sign(self, sfr, red):
        model = assemble_closed_loop(sfr, red, MODE_GAINS[1])
        assert initial_rocof(model, 0.15) < 0.0
