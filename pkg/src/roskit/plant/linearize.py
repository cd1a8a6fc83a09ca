"""Linearized DAE of the WTG about an equilibrium and its Kron reduction.

Jacobians come from central finite differences on the residual functions so
there is one source of truth for the model. The supplementary power-reference
channel is linearized at unit gain; inertia-emulation and primary-control
input matrices are exact scalar multiples of it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dae
from .params import OperatingCondition, PlantParameters


@dataclass
class LinearDae:
    """[dx; 0] = [[A_s, B_s],[C_s, D_s]] [x; y] + [M1; N1] dw' + [M2; N2] dw,
    with output dP_gen = [E_s F_s][x; y]. Input matrices are at unit gain."""

    A_s: np.ndarray
    B_s: np.ndarray
    C_s: np.ndarray
    D_s: np.ndarray
    M_s1: np.ndarray
    N_s1: np.ndarray
    M_s2: np.ndarray
    N_s2: np.ndarray
    E_s: np.ndarray
    F_s: np.ndarray
    cond_number: float


@dataclass
class StateSpace:
    """Seven-state WTG model after eliminating the algebraic variables."""

    A_sys: np.ndarray
    B_sys1: np.ndarray
    B_sys2: np.ndarray
    C_sys: np.ndarray
    D_sys1: float
    D_sys2: float


def linearize(params: PlantParameters, state: np.ndarray, alg: np.ndarray,
              cond: OperatingCondition | None = None,
              rel_step: float = 1e-6) -> LinearDae:
    """Central-difference Jacobians of the 17 residuals at the equilibrium."""
    cond = cond or OperatingCondition()
    n, m = dae.N_STATE, dae.N_ALG

    def res(s, a, u=0.0):
        return dae.residuals(s, a, params, cond, u_pref=u)

    base = res(state, alg)
    if np.max(np.abs(base)) > 1e-8:
        raise ValueError("linearization point is not an equilibrium")

    J = np.empty((n + m, n + m))
    z0 = np.concatenate([state, alg])
    for j in range(n + m):
        h = max(rel_step * abs(z0[j]), 1e-8)
        zp = z0.copy(); zp[j] += h
        zm = z0.copy(); zm[j] -= h
        J[:, j] = (res(zp[:n], zp[n:]) - res(zm[:n], zm[n:])) / (2 * h)

    h = 1e-6
    col = (res(state, alg, h) - res(state, alg, -h)) / (2 * h)

    A_s, B_s = J[:n, :n], J[:n, n:]
    C_s, D_s = J[n:, :n], J[n:, n:]
    M = col[:n].reshape(n, 1)
    N = col[n:].reshape(m, 1)
    cond_number = float(np.linalg.cond(D_s))
    if cond_number > 1e12:
        raise np.linalg.LinAlgError(
            f"algebraic Jacobian is near-singular (cond={cond_number:.2e})")
    E_s = np.zeros((1, n))
    F_s = np.zeros((1, m))
    F_s[0, dae.ALG_NAMES.index("P_gen")] = 1.0
    return LinearDae(A_s, B_s, C_s, D_s, M, N, M.copy(), N.copy(),
                     E_s, F_s, cond_number)


def kron_reduce(lin: LinearDae) -> StateSpace:
    """Schur-complement elimination of the algebraic variables."""
    Dinv_C = np.linalg.solve(lin.D_s, lin.C_s)
    Dinv_N1 = np.linalg.solve(lin.D_s, lin.N_s1)
    Dinv_N2 = np.linalg.solve(lin.D_s, lin.N_s2)
    A_sys = lin.A_s - lin.B_s @ Dinv_C
    B_sys1 = lin.M_s1 - lin.B_s @ Dinv_N1
    B_sys2 = lin.M_s2 - lin.B_s @ Dinv_N2
    C_sys = lin.E_s - lin.F_s @ Dinv_C
    D_sys1 = float((-lin.F_s @ Dinv_N1).item())
    D_sys2 = float((-lin.F_s @ Dinv_N2).item())
    return StateSpace(A_sys, B_sys1, B_sys2, C_sys, D_sys1, D_sys2)


def dae_frequency_response(lin: LinearDae, s: complex) -> complex:
    """Transfer function dP_gen / du at s, straight from the DAE blocks."""
    n, m = lin.A_s.shape[0], lin.D_s.shape[0]
    top = np.hstack([s * np.eye(n) - lin.A_s, -lin.B_s])
    bot = np.hstack([lin.C_s, lin.D_s])
    K = np.vstack([top, bot]).astype(complex)
    rhs = np.vstack([lin.M_s1, -lin.N_s1]).astype(complex)
    sol = np.linalg.solve(K, rhs)
    return complex((np.hstack([lin.E_s, lin.F_s]) @ sol).item())


def ss_frequency_response(ss: StateSpace, s: complex) -> complex:
    n = ss.A_sys.shape[0]
    sol = np.linalg.solve(s * np.eye(n) - ss.A_sys, ss.B_sys1.astype(complex))
    return complex((ss.C_sys @ sol).item() + ss.D_sys1)
