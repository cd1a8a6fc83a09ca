"""Nonlinear type-3 WTG differential-algebraic model and equilibrium solve.

State vector (7): [E'_qD, E'_dD, omega_r, x1, x2, x3, x4]
Algebraic vector (10): [V_qr, V_dr, I_qr, I_dr, P_gen, Q_gen,
                        I_ds, I_qs, V_D, theta_D]

The single exogenous control channel ``u_pref`` is the supplementary power
reference added on top of MPPT; inertia emulation and primary frequency
control both inject through it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .params import OperatingCondition, PlantParameters

STATE_NAMES = ("E_qD", "E_dD", "omega_r", "x1", "x2", "x3", "x4")
ALG_NAMES = ("V_qr", "V_dr", "I_qr", "I_dr", "P_gen", "Q_gen",
             "I_ds", "I_qs", "V_D", "theta_D")
N_STATE = len(STATE_NAMES)
N_ALG = len(ALG_NAMES)


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


def turbine_torque(omega_r: float, v_wind: float, theta_t: float,
                   params: PlantParameters):
    """Tip-speed ratio, induction factor, power coefficient, and mechanical
    torque of the standard wind turbine model."""
    if v_wind <= 0:
        raise ValueError("v_wind must be positive")
    if omega_r <= 0:
        raise ValueError("omega_r must be positive")
    lam = (params.c_lambda * 2.0 * params.k_gear * omega_r * params.R_t
           / (params.p * v_wind))
    denom = lam + 0.08 * theta_t
    if abs(denom) < 1e-12:
        raise ZeroDivisionError("lambda + 0.08*theta_t vanishes")
    lam_i = 1.0 / (1.0 / denom - 0.035 / (theta_t ** 3 + 1.0))
    c_p = 0.22 * (116.0 / lam_i - 0.4 * theta_t - 5.0) * math.exp(-12.5 / lam_i)
    if params.k_torque is None:
        raise ValueError("parameters are not calibrated (k_torque unset)")
    t_m = params.k_torque * c_p * v_wind ** 3 / omega_r
    return lam, lam_i, c_p, t_m


def residuals(state: np.ndarray, alg: np.ndarray, params: PlantParameters,
              cond: OperatingCondition, u_pref: float = 0.0) -> np.ndarray:
    """All 17 residuals (7 differential, 10 algebraic) at a point."""
    E_q, E_d, w_r, x1, x2, x3, x4 = state
    V_qr, V_dr, I_qr, I_dr, P_gen, Q_gen, I_ds, I_qs, V_D, th_D = alg
    ws = params.omega_s
    Xsp = params.X_s_prime
    T0p = params.T0_prime

    _, _, _, T_m = turbine_torque(w_r, cond.v_wind, cond.theta_t, params)
    P_ref = params.p_ref_mppt(w_r) + u_pref
    Q_ref = cond.Q_set

    err_p = P_ref - P_gen
    err_q = Q_ref - Q_gen

    # electrical angular speeds in rad/s, consistent with T0' in seconds
    two_pi = 2.0 * math.pi
    f = np.empty(N_STATE)
    f[0] = (-(E_q + (params.X_s - Xsp) * I_ds) / T0p
            + two_pi * ws * params.X_m / params.X_r * V_dr
            + two_pi * (ws - w_r) * E_d)
    f[1] = (-(E_d + (params.X_s - Xsp) * I_qs) / T0p
            - two_pi * ws * params.X_m / params.X_r * V_qr
            - two_pi * (ws - w_r) * E_q)
    f[2] = ws / (2.0 * params.H_D) * (T_m - E_d * I_ds - E_q * I_qs)
    f[3] = params.K_I1 * err_p
    f[4] = params.K_I2 * (params.K_P1 * err_p + x1 - I_qr)
    f[5] = params.K_I3 * err_q
    f[6] = params.K_I4 * (params.K_P3 * err_q + x3 - I_dr)

    I_GC = (V_qr * I_qr + V_dr * I_dr) / V_D

    g = np.empty(N_ALG)
    g[0] = params.K_P2 * (params.K_P1 * err_p + x1 - I_qr) + x2 - V_qr
    g[1] = params.K_P4 * (params.K_P3 * err_q + x3 - I_dr) + x4 - V_dr
    # terminal power balance: airgap power minus stator copper loss plus the
    # slip power delivered through the rotor converter (positive when
    # supersynchronous)
    g[2] = (-P_gen + E_d * I_ds + E_q * I_qs
            - params.R_s * (I_ds ** 2 + I_qs ** 2)
            + (V_qr * I_qr + V_dr * I_dr))
    g[3] = -Q_gen + E_q * I_ds + E_d * I_qs - Xsp * (I_ds ** 2 + I_qs ** 2)
    g[4] = -I_dr + E_q / params.X_m + params.X_m / params.X_r * I_ds
    g[5] = -I_qr - E_d / params.X_m + params.X_m / params.X_r * I_qs
    # stator/network equations in the machine dq frame
    g[6] = -E_q + params.R_s * I_qs + Xsp * I_ds + V_D
    g[7] = E_d + Xsp * I_qs - params.R_s * I_ds
    g[8] = -V_D + params.X_t * I_ds + cond.V * math.cos(cond.theta - th_D)
    g[9] = params.X_t * (I_qs + I_GC) + cond.V * math.sin(cond.theta - th_D)

    return np.concatenate([f, g])


def _newton(fun, z0: np.ndarray, tol: float = 1e-11, max_iter: int = 50,
            fd_step: float = 1e-7):
    """Damped Newton with finite-difference Jacobian."""
    z = z0.astype(float).copy()
    for _ in range(max_iter):
        r = fun(z)
        norm = np.max(np.abs(r))
        if norm < tol:
            return z
        n = z.size
        J = np.empty((r.size, n))
        for j in range(n):
            h = fd_step * max(1.0, abs(z[j]))
            zp = z.copy(); zp[j] += h
            zm = z.copy(); zm[j] -= h
            J[:, j] = (fun(zp) - fun(zm)) / (2 * h)
        try:
            dz = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(f"singular Jacobian: {exc}", norm) from exc
        # backtracking line search on the residual norm
        alpha = 1.0
        for _ in range(30):
            z_try = z + alpha * dz
            try:
                norm_try = np.max(np.abs(fun(z_try)))
            except (ValueError, ZeroDivisionError, OverflowError):
                norm_try = np.inf
            if norm_try < norm:
                z = z_try
                break
            alpha *= 0.5
        else:
            raise ConvergenceError("line-search stall", norm)
    raise ConvergenceError(
        f"no convergence after {max_iter} iterations", float(norm))


def _alg_start(params: PlantParameters, cond: OperatingCondition) -> np.ndarray:
    """Start near the supersynchronous branch: rotor voltage at slip scale,
    stator power carried by I_qs."""
    return np.array([0.2, 0.0, 0.25, 0.3, cond.P_gen, cond.Q_set,
                     0.0, 0.25, cond.V, cond.theta])


def calibrate(params: PlantParameters,
              cond: OperatingCondition | None = None) -> PlantParameters:
    """Fix c_popt and k_torque so the operating condition is an exact
    equilibrium, and freeze them into the returned parameter set."""
    cond = cond or OperatingCondition()
    c_popt = cond.P_gen / (params.C_opt * cond.omega_r ** 3)

    # electrical sub-equilibrium at scheduled P_gen / Q_set
    def fun(z):
        E_q, E_d, V_qr, V_dr, I_qr, I_dr, I_ds, I_qs, V_D, th_D = z
        state = np.array([E_q, E_d, cond.omega_r, I_qr, V_qr, I_dr, V_dr])
        alg = np.array([V_qr, V_dr, I_qr, I_dr, cond.P_gen, cond.Q_set,
                        I_ds, I_qs, V_D, th_D])
        r = residuals(state, alg,
                      _with_calibration(params, c_popt, 1.0), cond)
        # keep the two E' dynamic residuals and the 8 algebraic relations
        # that do not involve the regulator (those are satisfied by
        # construction through x1..x4)
        return np.concatenate([r[0:2], r[9:17]])

    z = _newton(fun, np.array([1.0, 0.0, 0.2, 0.0, 0.25, 0.3, 0.0, 0.25,
                               1.0, 0.0]), tol=1e-12)
    E_q, E_d, V_qr, V_dr, I_qr, I_dr, I_ds, I_qs, V_D, th_D = z
    T_e = E_d * I_ds + E_q * I_qs
    _, _, _, t_m_unit = turbine_torque(cond.omega_r, cond.v_wind,
                                       cond.theta_t,
                                       _with_calibration(params, c_popt, 1.0))
    k_torque = T_e / t_m_unit
    return _with_calibration(params, c_popt, k_torque)


def _with_calibration(params: PlantParameters, c_popt: float,
                      k_torque: float) -> PlantParameters:
    from dataclasses import replace
    return replace(params, c_popt=c_popt, k_torque=k_torque)


def solve_equilibrium(params: PlantParameters,
                      cond: OperatingCondition | None = None,
                      start: np.ndarray | None = None):
    """Newton solve of all 17 residuals; returns (state, algebraic) arrays.

    Parameters must be calibrated; the Appendix-level operating condition is
    then an exact root with P_gen matching the schedule.
    """
    cond = cond or OperatingCondition()
    if params.c_popt is None or params.k_torque is None:
        raise ValueError("parameters are not calibrated; run calibrate() first")

    def fun(z):
        return residuals(z[:N_STATE], z[N_STATE:], params, cond)

    if start is None:
        alg = _alg_start(params, cond)
        state = np.array([1.0, 0.0, cond.omega_r, alg[2], alg[0],
                          alg[3], alg[1]])
        start = np.concatenate([state, alg])
    z = _newton(fun, start, tol=1e-10)
    r = fun(z)
    if np.max(np.abs(r)) > 1e-9:
        raise ConvergenceError("equilibrium residual above 1e-9",
                               float(np.max(np.abs(r))))
    return z[:N_STATE], z[N_STATE:]
