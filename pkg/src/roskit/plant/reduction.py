"""Selective-modal-analysis reduction of the 7-state WTG model.

The rotor-speed state is retained as the relevant state; the mode in which it
participates most defines the relevant eigenvalue. The remaining (fast,
Hurwitz) dynamics are collapsed into static corrections, yielding a one-state
model whose input coefficients scale exactly linearly with the support gains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dae
from .linearize import StateSpace

RELEVANT_STATE = dae.STATE_NAMES.index("omega_r")


class ReductionError(RuntimeError):
    pass


@dataclass
class SmaReduction:
    """One-state rotor model: dw_r' = A_rd w_r + B_rd1 dw' + B_rd2 dw,
    dP_gen = C_rd w_r + D_rd1 dw' + D_rd2 dw (for given gains)."""

    a_rd: float
    c_rd: float
    b_rd_unit: float      # B_rd1 / K_ie == B_rd2 / K_pc
    d_rd_unit: float      # D_rd1 / K_ie == D_rd2 / K_pc
    lambda_r: complex
    lambda_r_complex: bool
    participation: np.ndarray          # states x modes
    relevant_mode: int
    blocks: dict = field(default_factory=dict)

    def gain_coeffs(self, K_ie: float, K_pc: float):
        """(B_rd1, D_rd1, B_rd2, D_rd2) for a mode's gain pair."""
        return (K_ie * self.b_rd_unit, K_ie * self.d_rd_unit,
                K_pc * self.b_rd_unit, K_pc * self.d_rd_unit)


def participation_factors(A: np.ndarray):
    """Participation matrix |v_ki * w_ki| with right/left eigenvectors
    normalized so that w_i^T v_i = 1."""
    eigvals, V = np.linalg.eig(A)
    W = np.linalg.inv(V).T           # columns are left eigenvectors
    P = np.abs(V * W)
    return eigvals, P


def sma_reduce(ss: StateSpace, tie_tol: float = 1e-6) -> SmaReduction:
    A = ss.A_sys
    eigvals, P = participation_factors(A)
    if np.max(eigvals.real) >= 0:
        raise ReductionError("WTG state matrix is not Hurwitz")

    # mode where the rotor speed participates most
    col = P[RELEVANT_STATE, :]
    order = np.argsort(col)[::-1]
    if col[order[0]] - col[order[1]] < tie_tol and not np.isclose(
            eigvals[order[0]], np.conj(eigvals[order[1]])):
        raise ReductionError("ambiguous relevant mode for rotor speed")
    mode = int(order[0])
    lam_r = eigvals[mode]
    lam_r_complex = abs(lam_r.imag) > 1e-9
    lam_use = lam_r.real

    idx = [RELEVANT_STATE] + [i for i in range(A.shape[0])
                              if i != RELEVANT_STATE]
    Ap = A[np.ix_(idx, idx)]
    A11 = Ap[0, 0]
    A12 = Ap[0:1, 1:]
    A21 = Ap[1:, 0:1]
    A22 = Ap[1:, 1:]
    if np.max(np.linalg.eigvals(A22).real) >= 0:
        raise ReductionError("less-relevant block is not Hurwitz")

    B1 = ss.B_sys1[idx, :]
    B2 = ss.B_sys2[idx, :]
    Br1, Bz1 = B1[0:1, :], B1[1:, :]
    Br2, Bz2 = B2[0:1, :], B2[1:, :]
    C = ss.C_sys[:, idx]
    Cr, Cz = C[0:1, 0:1], C[0:1, 1:]

    n22 = A22.shape[0]
    try:
        shift = np.linalg.solve(lam_use * np.eye(n22) - A22, A21)
    except np.linalg.LinAlgError as exc:
        raise ReductionError("(lambda_r I - A22) is singular") from exc
    fast_dc1 = np.linalg.solve(-A22, Bz1)
    fast_dc2 = np.linalg.solve(-A22, Bz2)

    a_rd = float((A11 + A12 @ shift).item())
    c_rd = float((Cr + Cz @ shift).item())
    b_rd1_unit = float((Br1 + A12 @ fast_dc1).item())
    d_rd1_unit = float((ss.D_sys1 + Cz @ fast_dc1).item())
    b_rd2_unit = float((Br2 + A12 @ fast_dc2).item())
    d_rd2_unit = float((ss.D_sys2 + Cz @ fast_dc2).item())
    # both support signals enter through the same reference channel, so the
    # unit-gain coefficients coincide; keep one pair
    assert abs(b_rd1_unit - b_rd2_unit) < 1e-9 * max(1, abs(b_rd1_unit))
    assert abs(d_rd1_unit - d_rd2_unit) < 1e-9 * max(1, abs(d_rd1_unit))

    return SmaReduction(
        a_rd=a_rd, c_rd=c_rd, b_rd_unit=b_rd1_unit, d_rd_unit=d_rd1_unit,
        lambda_r=complex(lam_r), lambda_r_complex=lam_r_complex,
        participation=P, relevant_mode=mode,
        blocks={"A11": A11, "A12": A12, "A21": A21, "A22": A22,
                "Br1": Br1, "Bz1": Bz1, "Br2": Br2, "Bz2": Bz2,
                "Cr": Cr, "Cz": Cz})
