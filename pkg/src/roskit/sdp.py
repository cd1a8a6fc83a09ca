"""Semidefinite programming layer.

Canonical primal form:

    minimize    sum_j <C_j, X_j> + c_u . u
    subject to  sum_j <A_ij, X_j> + B_i . u = b_i   (i = 1..m)
                X_j >= 0 (symmetric PSD blocks), u free

Solving is delegated to cvxopt's cone LP solver (dense primal-dual
interior-point with Nesterov-Todd scaling); the canonical form maps onto the
cone program's dual. Export to the sparse SDPA text format and an
independent KKT verification layer are implemented here so certificates can
be cross-checked outside the solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

import cvxopt
import cvxopt.solvers

SYM_TOL = 1e-12
PSD_SHIFT = 1e-9


def sym_coeff(n: int, rows, cols, vals) -> sp.coo_matrix:
    """Symmetric coefficient matrix from unordered-pair entries.

    Each (i, j, v) with i != j contributes v/2 to both (i, j) and (j, i), so
    v is the full weight of the unordered pair in <A, X>.
    """
    r, c, v = [], [], []
    for i, j, x in zip(rows, cols, vals):
        if i == j:
            r.append(i); c.append(j); v.append(x)
        else:
            r += [i, j]; c += [j, i]; v += [0.5 * x, 0.5 * x]
    return sp.coo_matrix((v, (r, c)), shape=(n, n))


@dataclass
class SdpConstraint:
    """One equality: sum_j <coeffs[j], X_j> + free . u = rhs."""

    coeffs: dict          # block index -> scipy sparse symmetric matrix
    free: np.ndarray
    rhs: float


@dataclass
class SdpProblem:
    block_dims: list
    free_vars: int
    constraints: list
    obj_blocks: dict = field(default_factory=dict)   # block index -> matrix
    obj_free: np.ndarray | None = None

    def __post_init__(self):
        if self.obj_free is None:
            self.obj_free = np.zeros(self.free_vars)
        self.obj_free = np.asarray(self.obj_free, dtype=float)

    def validate(self):
        if not self.constraints:
            raise ValueError("constraint count must be >= 1")
        if any(d < 1 for d in self.block_dims):
            raise ValueError("block dims must be >= 1")
        for k, con in enumerate(self.constraints):
            if len(con.free) != self.free_vars:
                raise ValueError(f"constraint {k}: free-coefficient length")
            for j, A in con.coeffs.items():
                n = self.block_dims[j]
                if A.shape != (n, n):
                    raise ValueError(f"constraint {k} block {j}: shape")
                asym = abs(A - A.T).max() if A.nnz else 0.0
                if asym > SYM_TOL:
                    raise ValueError(
                        f"constraint {k} block {j}: asymmetry {asym:.2e}")
        for j, C in self.obj_blocks.items():
            asym = abs(C - C.T).max() if C.nnz else 0.0
            if asym > SYM_TOL:
                raise ValueError(f"objective block {j}: asymmetry {asym:.2e}")


@dataclass
class SdpSolution:
    status: str                      # optimal|infeasible|numerical_failure
    blocks: list                     # primal PSD matrices X_j
    free: np.ndarray                 # u
    dual: np.ndarray                 # equality multipliers y
    primal_objective: float
    dual_objective: float
    residuals: dict
    detail: str = ""

    def to_json_dict(self):
        return {
            "status": self.status,
            "blocks": [X.tolist() for X in self.blocks],
            "free": self.free.tolist(),
            "dual": self.dual.tolist(),
            "primal_objective": self.primal_objective,
            "dual_objective": self.dual_objective,
            "residuals": self.residuals,
            "detail": self.detail,
        }


def _block_offsets(dims):
    offs, total = [], 0
    for n in dims:
        offs.append(total)
        total += n * n
    return offs, total


def solve(prob: SdpProblem, tol: float = 1e-8,
          max_iters: int = 200) -> SdpSolution:
    """Solve the canonical primal via the cone-program dual.

    Deterministic for identical inputs. `infeasible` is reported when the
    solver returns an infeasibility certificate for either side (for a
    bounded objective this implies an empty primal).
    """
    if not (1e-10 <= tol <= 1e-4):
        raise ValueError("tol must lie in [1e-10, 1e-4]")
    prob.validate()

    dims = list(prob.block_dims)
    m = len(prob.constraints)
    n_f = prob.free_vars
    offs, h_len = _block_offsets(dims)

    # cone program: min c.x  s.t.  G x + s = h, s in PSD cone, A x = b
    # with x = my equality multipliers y, s = vec(C - sum y_i A_i).
    # cvxopt reads only the lower triangle of 's'-cone columns; an entry v
    # at (r, c), r > c, stands for the symmetric matrix with both
    # off-diagonal cells equal to v
    rows, cols, vals = [], [], []
    for i, con in enumerate(prob.constraints):
        for j, A in con.coeffs.items():
            coo = A.tocoo()
            n = dims[j]
            for r, c, v in zip(coo.row, coo.col, coo.data):
                if r < c:
                    continue
                rows.append(int(offs[j] + c * n + r))
                cols.append(i)
                vals.append(float(v))
    G = cvxopt.spmatrix(vals, rows, cols, (h_len, m))

    h = np.zeros(h_len)
    for j, C in prob.obj_blocks.items():
        h[offs[j]:offs[j] + dims[j] ** 2] = C.toarray().flatten(order="F")
    h = cvxopt.matrix(h)

    c = cvxopt.matrix(np.array(
        [-con.rhs for con in prob.constraints], dtype=float))

    kwargs = {}
    if n_f:
        B = np.array([con.free for con in prob.constraints], dtype=float)
        kwargs["A"] = cvxopt.matrix(B.T.copy())
        kwargs["b"] = cvxopt.matrix(prob.obj_free)

    opts = {"show_progress": False, "maxiters": max_iters,
            "abstol": tol, "reltol": tol, "feastol": tol}
    try:
        sol = cvxopt.solvers.conelp(
            c, G, h, dims={"l": 0, "q": [], "s": dims}, options=opts,
            **kwargs)
    except ArithmeticError as exc:
        return SdpSolution("numerical_failure", [], np.zeros(0), np.zeros(0),
                           np.nan, np.nan, {},
                           f"interior-point linear algebra failed ({exc})")

    status = sol["status"]
    if status == "optimal":
        my_status, detail = "optimal", ""
    elif status == "dual infeasible":
        my_status, detail = "infeasible", "primal infeasibility certificate"
    elif status == "primal infeasible":
        my_status, detail = "infeasible", \
            "dual infeasibility certificate (primal empty or unbounded)"
    else:
        my_status, detail = "numerical_failure", f"solver status {status!r}"

    if my_status != "optimal":
        return SdpSolution(my_status, [], np.zeros(0), np.zeros(0),
                           np.nan, np.nan, {}, detail)

    z = np.array(sol["z"], dtype=float).flatten()
    X = []
    for j, n in enumerate(dims):
        Zj = z[offs[j]:offs[j] + n * n].reshape(n, n, order="F")
        # mirror the lower triangle; the upper may or may not be filled
        Zj = np.tril(Zj) + np.tril(Zj, -1).T
        X.append(Zj)
    u = (np.array(sol["y"], dtype=float).flatten()
         if n_f else np.zeros(0))
    y = np.array(sol["x"], dtype=float).flatten()

    out = SdpSolution("optimal", X, u, y, 0.0, 0.0, {}, "")
    rep = verify_solution(prob, out)
    out.primal_objective = rep["primal_objective"]
    out.dual_objective = rep["dual_objective"]
    out.residuals = rep
    return out


def is_psd(M: np.ndarray, shift: float = PSD_SHIFT) -> bool:
    """Cholesky test after adding shift * I."""
    try:
        np.linalg.cholesky(M + shift * max(1.0, abs(M).max())
                           * np.eye(M.shape[0]))
        return True
    except np.linalg.LinAlgError:
        return False


def verify_solution(prob: SdpProblem, sol: SdpSolution) -> dict:
    """Recompute KKT residuals independently of the solver."""
    dims = prob.block_dims
    pobj = float(sol.free @ prob.obj_free)
    for j, C in prob.obj_blocks.items():
        pobj += float(np.sum(C.toarray() * sol.blocks[j]))

    primal_res = 0.0
    for con in prob.constraints:
        lhs = float(con.free @ sol.free)
        for j, A in con.coeffs.items():
            lhs += float(np.sum(A.toarray() * sol.blocks[j]))
        primal_res = max(primal_res, abs(lhs - con.rhs))

    # dual slack S_j = C_j - sum_i y_i A_ij must be PSD; free-variable
    # stationarity: c_u - sum_i y_i B_i = 0
    S = []
    for j, n in enumerate(dims):
        Sj = (prob.obj_blocks[j].toarray() if j in prob.obj_blocks
              else np.zeros((n, n)))
        S.append(Sj.copy())
    for i, con in enumerate(prob.constraints):
        for j, A in con.coeffs.items():
            S[j] -= sol.dual[i] * A.toarray()
    dual_psd = all(is_psd(Sj) for Sj in S)
    free_res = prob.obj_free.copy()
    for i, con in enumerate(prob.constraints):
        free_res -= sol.dual[i] * con.free
    dual_res = float(abs(free_res).max()) if prob.free_vars else 0.0

    dobj = float(sum(con.rhs * sol.dual[i]
                     for i, con in enumerate(prob.constraints)))
    gap = abs(pobj - dobj) / max(1.0, abs(pobj), abs(dobj))
    primal_psd = all(is_psd(X) for X in sol.blocks)

    return {"primal_objective": pobj, "dual_objective": dobj,
            "primal_residual": primal_res, "dual_residual": dual_res,
            "duality_gap": gap, "primal_psd": primal_psd,
            "dual_psd": dual_psd}


def export_sdpa(prob: SdpProblem, path) -> None:
    """Write the problem in sparse SDPA (.dat-s) format.

    The file encodes the equality-multiplier form: minimize b.y subject to
    sum_i y_i F_i - F_0 >= 0 with F_i the constraint coefficients. Free
    variables are split u = u+ - u- on a diagonal block.
    """
    prob.validate()
    dims = list(prob.block_dims)
    n_f = prob.free_vars
    blocks = [str(d) for d in dims]
    if n_f:
        blocks.append(str(-2 * n_f))

    lines = [str(len(prob.constraints)), str(len(blocks)),
             " ".join(blocks),
             " ".join(f"{con.rhs:.17g}" for con in prob.constraints)]

    def entries(matno, coeffs, free_vec):
        out = []
        for j in sorted(coeffs):
            A = sp.triu(coeffs[j]).tocoo()
            order = np.lexsort((A.col, A.row))
            for k in order:
                v = A.data[k]
                if v != 0.0:
                    out.append(f"{matno} {j + 1} {A.row[k] + 1} "
                               f"{A.col[k] + 1} {v:.17g}")
        if n_f and free_vec is not None:
            blk = len(dims) + 1
            for t, v in enumerate(free_vec):
                if v != 0.0:
                    out.append(f"{matno} {blk} {t + 1} {t + 1} {v:.17g}")
                    out.append(f"{matno} {blk} {n_f + t + 1} "
                               f"{n_f + t + 1} {-v:.17g}")
        return out

    # F_0 = -C (objective), F_i = constraint coefficients
    neg_obj = {j: -C for j, C in prob.obj_blocks.items()}
    lines += entries(0, neg_obj, -prob.obj_free)
    for i, con in enumerate(prob.constraints):
        lines += entries(i + 1, con.coeffs, con.free)
    Path(path).write_text("\n".join(lines) + "\n")


def parse_sdpa(path):
    """Read a sparse SDPA file back into (m, block dims, rhs, entries).

    Entries are (matno, block, i, j, value) tuples, 1-based as in the file.
    Comment lines (* or ") and the optional leading comment block are
    skipped.
    """
    raw = [ln.strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in raw if ln and not ln.startswith(("*", '"'))]
    m = int(lines[0].split()[0])
    nblocks = int(lines[1].split()[0])
    dims = [int(t) for t in lines[2].replace(",", " ").split()]
    if len(dims) != nblocks:
        raise ValueError("block-dimension count mismatch")
    rhs = [float(t) for t in lines[3].replace(",", " ").split()]
    if len(rhs) != m:
        raise ValueError("rhs length mismatch")
    entries = []
    for ln in lines[4:]:
        t = ln.split()
        entries.append((int(t[0]), int(t[1]), int(t[2]), int(t[3]),
                        float(t[4])))
    return m, dims, rhs, entries
