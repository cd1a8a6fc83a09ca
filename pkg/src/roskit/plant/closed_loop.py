"""System frequency response model, per-mode closed loops, and
emulated-inertia/damping quantification.

The grid side is a classic three-state SFR model (swing + reheat turbine +
governor). The WTG side is either the one-state reduced model or the full
seven-state model; both feed back through the generated-power increment. The
rate input creates an algebraic loop on the swing row which is eliminated in
closed form, which is exactly where the emulated inertia shows up.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linearize import StateSpace
from .params import SfrParameters
from .reduction import SmaReduction

REDUCED_STATES = ("d_omega", "d_P_m", "d_P_v", "d_omega_r")


@dataclass(frozen=True)
class ModeGains:
    """Supplementary-control gains: K_ie on the frequency rate (inertia
    emulation) and K_pc on the frequency deviation (primary control)."""

    K_ie: float = 0.0
    K_pc: float = 0.0


# Gain schedule for the five controller modes.
MODE_GAINS = {
    1: ModeGains(0.0, 0.0),
    2: ModeGains(-0.10, 0.0),
    3: ModeGains(-0.20, 0.0),
    4: ModeGains(-0.10, -0.03),
    5: ModeGains(-0.20, -0.06),
}


class IllPosedLoopError(RuntimeError):
    """The rate-feedback algebraic loop has no solution (effective inertia
    vanishes)."""


@dataclass
class ClosedLoopModel:
    """Affine closed loop dx/dt = A x + E * dP_d.

    The frequency deviation is state 0 (Hz); the disturbance dP_d is the
    load-increase magnitude in pu.
    """

    A: np.ndarray
    E: np.ndarray
    state_names: tuple
    gains: ModeGains
    h_e0: float              # emulated inertia at t = 0+ (s)
    order: str               # "reduced" | "full"
    omega_r_index: int       # position of the rotor-speed deviation

    @property
    def n(self) -> int:
        return self.A.shape[0]


def _swing_pieces(sfr: SfrParameters, d_rd1: float, d_rd2: float):
    """Coefficients of the swing row after eliminating the rate loop.

    Returns (scale, damping_coeff, h_e0) with
    d(dw)/dt = scale * (dP_m - dP_d + <wtg output terms> + damping_coeff*dw).
    """
    h_e0 = -0.5 * sfr.omega_s * d_rd1
    denom = 2.0 * (sfr.H + h_e0)
    if abs(denom) < 1e-9:
        raise IllPosedLoopError(
            f"effective inertia H + H_e(0) = {denom / 2:.3g} vanishes")
    scale = sfr.omega_s / denom
    damping = d_rd2 - sfr.D / sfr.omega_s
    return scale, damping, h_e0


def assemble_closed_loop(sfr: SfrParameters,
                         red: SmaReduction | StateSpace,
                         gains: ModeGains,
                         order: str = "reduced") -> ClosedLoopModel:
    """Close the loop between the SFR model and the WTG support channels.

    `order="reduced"` uses the one-state rotor model (4 states total);
    `order="full"` stacks the SFR states on the 7-state WTG model.
    """
    if order == "reduced":
        if not isinstance(red, SmaReduction):
            raise TypeError("reduced order needs an SmaReduction")
        return _assemble_reduced(sfr, red, gains)
    if order == "full":
        if not isinstance(red, StateSpace):
            raise TypeError("full order needs the 7-state StateSpace")
        return _assemble_full(sfr, red, gains)
    raise ValueError(f"unknown order {order!r}")


def _assemble_reduced(sfr: SfrParameters, red: SmaReduction,
                      gains: ModeGains) -> ClosedLoopModel:
    b1 = gains.K_ie * red.b_rd_unit
    b2 = gains.K_pc * red.b_rd_unit
    d1 = gains.K_ie * red.d_rd_unit
    d2 = gains.K_pc * red.d_rd_unit
    scale, damping, h_e0 = _swing_pieces(sfr, d1, d2)

    A = np.zeros((4, 4))
    E = np.zeros(4)
    # swing row, rate loop eliminated
    A[0, 0] = scale * damping
    A[0, 1] = scale
    A[0, 3] = scale * red.c_rd
    E[0] = -scale
    # turbine and governor
    A[1, 1] = -1.0 / sfr.tau_ch
    A[1, 2] = 1.0 / sfr.tau_ch
    A[2, 0] = -1.0 / (sfr.R * sfr.omega_s * sfr.tau_g)
    A[2, 2] = -1.0 / sfr.tau_g
    # rotor state driven by dw and by the eliminated dw/dt expression
    A[3, :] = b1 * A[0, :]
    A[3, 0] += b2
    A[3, 3] += red.a_rd
    E[3] = b1 * E[0]
    return ClosedLoopModel(A, E, REDUCED_STATES, gains, h_e0,
                           "reduced", omega_r_index=3)


def _assemble_full(sfr: SfrParameters, ss: StateSpace,
                   gains: ModeGains) -> ClosedLoopModel:
    from . import dae

    n_w = ss.A_sys.shape[0]
    d1 = gains.K_ie * ss.D_sys1
    d2 = gains.K_pc * ss.D_sys2
    scale, damping, h_e0 = _swing_pieces(sfr, d1, d2)

    n = 3 + n_w
    A = np.zeros((n, n))
    E = np.zeros(n)
    # swing row: dP_gen = C x_w + d1 * dw/dt + d2 * dw
    A[0, 0] = scale * damping
    A[0, 1] = scale
    A[0, 3:] = scale * ss.C_sys[0, :]
    E[0] = -scale
    A[1, 1] = -1.0 / sfr.tau_ch
    A[1, 2] = 1.0 / sfr.tau_ch
    A[2, 0] = -1.0 / (sfr.R * sfr.omega_s * sfr.tau_g)
    A[2, 2] = -1.0 / sfr.tau_g
    # WTG block: driven by K_ie * dw/dt (row 0 of A, E) and K_pc * dw
    B1 = gains.K_ie * ss.B_sys1[:, 0]
    B2 = gains.K_pc * ss.B_sys2[:, 0]
    A[3:, 3:] = ss.A_sys
    A[3:, :] += np.outer(B1, A[0, :])
    A[3:, 0] += B2
    E[3:] = B1 * E[0]
    names = ("d_omega", "d_P_m", "d_P_v") + tuple(
        "d_" + s for s in dae.STATE_NAMES)
    return ClosedLoopModel(A, E, names, gains, h_e0, "full",
                           omega_r_index=3 + dae.STATE_NAMES.index("omega_r"))


@dataclass
class SupportQuantification:
    """Time series of the emulated inertia and damping with their windows."""

    t_inertia: np.ndarray
    h_e: np.ndarray          # s
    t_damping: np.ndarray
    d_e: np.ndarray          # pu
    t_h: float
    t_p: float
    t_s: float

    def to_csv(self, path):
        import csv
        from pathlib import Path
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_inertia_s", "H_e_s", "t_damping_s", "D_e_pu"])
            m = max(len(self.t_inertia), len(self.t_damping))
            for i in range(m):
                row = []
                if i < len(self.t_inertia):
                    row += [f"{self.t_inertia[i]:.6g}", f"{self.h_e[i]:.8g}"]
                else:
                    row += ["", ""]
                if i < len(self.t_damping):
                    row += [f"{self.t_damping[i]:.6g}", f"{self.d_e[i]:.8g}"]
                else:
                    row += ["", ""]
                w.writerow(row)


def emulated_inertia(red: SmaReduction, K_ie: float,
                     t: np.ndarray, omega_s: float = 60.0) -> np.ndarray:
    """Equivalent inertia contributed by rate feedback, as a function of time
    since the rate signal appeared."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be nonnegative")
    if red.a_rd == 0:
        raise ZeroDivisionError("reduced rotor mode has zero eigenvalue")
    b1 = K_ie * red.b_rd_unit
    d1 = K_ie * red.d_rd_unit
    return 0.5 * omega_s * (
        -d1 + red.c_rd / red.a_rd * (1.0 - np.exp(red.a_rd * t)) * b1)


def emulated_damping(red: SmaReduction, K_pc: float, t: np.ndarray,
                     t_p: float, omega_s: float = 60.0) -> np.ndarray:
    """Equivalent load damping contributed by deviation feedback for
    t >= t_p (activation instant of the deviation channel)."""
    t = np.asarray(t, dtype=float)
    if np.any(t < t_p):
        raise ValueError("t must be >= t_p")
    if red.a_rd == 0:
        raise ZeroDivisionError("reduced rotor mode has zero eigenvalue")
    b2 = K_pc * red.b_rd_unit
    d2 = K_pc * red.d_rd_unit
    return omega_s * (
        -d2 + red.c_rd / red.a_rd * (1.0 - np.exp(red.a_rd * (t - t_p))) * b2)


def quantify_support(red: SmaReduction, gains: ModeGains,
                     t_h: float = 2.0, t_p: float = 15.0, t_s: float = 30.0,
                     omega_s: float = 60.0,
                     n_points: int = 201) -> SupportQuantification:
    """H_e over [0, t_h] and D_e over [t_p, t_s] for a mode's gain pair."""
    ti = np.linspace(0.0, t_h, n_points)
    td = np.linspace(t_p, t_s, n_points)
    return SupportQuantification(
        t_inertia=ti,
        h_e=emulated_inertia(red, gains.K_ie, ti, omega_s),
        t_damping=td,
        d_e=emulated_damping(red, gains.K_pc, td, t_p, omega_s),
        t_h=t_h, t_p=t_p, t_s=t_s)


def initial_rocof(model: ClosedLoopModel, delta_p_d: float) -> float:
    """Frequency rate right after a step load increase, from the model."""
    return float(model.E[0] * delta_p_d)


def cross_check_inertia(model: ClosedLoopModel, sfr: SfrParameters,
                        delta_p_d: float = 0.15,
                        dt: float = 1e-4) -> dict:
    """Compare the simulated initial frequency rate against the effective
    inertia prediction omega_s * dP_d / (2 (H + H_e(0)))."""
    from scipy.linalg import expm

    predicted = sfr.omega_s * delta_p_d / (2.0 * (sfr.H + model.h_e0))
    # one exact short step of the affine system from rest
    n = model.n
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = model.A * dt
    M[:n, n] = model.E * delta_p_d * dt
    x = expm(M)[:n, n]
    measured = abs(x[0]) / dt
    rel_err = abs(measured - predicted) / predicted
    return {"predicted_rocof": predicted, "measured_rocof": measured,
            "relative_error": rel_err, "h_e0": model.h_e0,
            "pass": bool(rel_err < 0.02)}
