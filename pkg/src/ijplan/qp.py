"""Dense-interface convex quadratic programs and a built-in operator-splitting
(ADMM) solver with diagonal (Ruiz) preconditioning, active-set polishing and
from-scratch KKT residual reporting.

Problem form:
    minimize   0.5 z' P z + q' z
    subject to A_eq z = b_eq,  A_in z <= b_in
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class DimensionMismatchError(ValueError):
    pass


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    MAX_ITER = "max_iter"
    INFEASIBLE_DETECTED = "infeasible_detected"


REGULARIZATION = 1e-8  # diagonal added to P so the KKT system stays quasi-definite


def _to_csc(mat, shape=None) -> sp.csc_matrix:
    if mat is None:
        if shape is None:
            raise ValueError("shape required for empty block")
        return sp.csc_matrix(shape)
    if sp.issparse(mat):
        return mat.tocsc()
    return sp.csc_matrix(np.atleast_2d(np.asarray(mat, dtype=float)))


@dataclass
class QuadProgram:
    """Quadratic program with named variable slices.

    Matrices may be dense arrays or scipy sparse; they are stored as CSC.
    """

    P: sp.csc_matrix
    q: np.ndarray
    A_eq: sp.csc_matrix | None = None
    b_eq: np.ndarray | None = None
    A_in: sp.csc_matrix | None = None
    b_in: np.ndarray | None = None
    variable_layout: dict[str, slice] = field(default_factory=dict)

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.shape[0]
        self.P = _to_csc(self.P)
        if self.P.shape != (n, n):
            raise DimensionMismatchError("P must be (n, n)")
        sym_defect = abs(self.P - self.P.T).max() if self.P.nnz else 0.0
        if sym_defect > 1e-12 * max(1.0, abs(self.P).max()):
            raise ValueError("P must be symmetric")
        self.A_eq = _to_csc(self.A_eq, (0, n))
        self.A_in = _to_csc(self.A_in, (0, n))
        self.b_eq = (
            np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, dtype=float).ravel()
        )
        self.b_in = (
            np.zeros(0) if self.b_in is None else np.asarray(self.b_in, dtype=float).ravel()
        )
        if self.A_eq.shape != (self.b_eq.shape[0], n):
            raise DimensionMismatchError("A_eq/b_eq shape mismatch")
        if self.A_in.shape != (self.b_in.shape[0], n):
            raise DimensionMismatchError("A_in/b_in shape mismatch")

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def n_eq(self) -> int:
        return self.b_eq.shape[0]

    @property
    def n_in(self) -> int:
        return self.b_in.shape[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ (self.P @ z) + self.q @ z)


@dataclass
class QpSolution:
    z: np.ndarray
    duals_eq: np.ndarray
    duals_in: np.ndarray
    status: QpStatus
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float


@dataclass(frozen=True)
class KktResidual:
    stationarity: float
    primal_feasibility: float
    complementarity: float

    @property
    def max(self) -> float:
        return max(self.stationarity, self.primal_feasibility, self.complementarity)


def kkt_residual(problem: QuadProgram, solution: QpSolution) -> KktResidual:
    """Residual norms recomputed from scratch, independent of solver state."""
    z, nu, lam = solution.z, solution.duals_eq, solution.duals_in
    if z.shape != (problem.n,) or nu.shape != (problem.n_eq,) or lam.shape != (problem.n_in,):
        raise DimensionMismatchError("solution does not match problem dimensions")
    grad = problem.P @ z + problem.q
    if problem.n_eq:
        grad = grad + problem.A_eq.T @ nu
    if problem.n_in:
        grad = grad + problem.A_in.T @ lam
    stationarity = float(np.abs(grad).max()) if problem.n else 0.0
    primal = 0.0
    comp = 0.0
    if problem.n_eq:
        primal = max(primal, float(np.abs(problem.A_eq @ z - problem.b_eq).max()))
    if problem.n_in:
        slack = problem.A_in @ z - problem.b_in
        primal = max(primal, float(np.maximum(slack, 0.0).max()))
        comp = float(np.abs(lam * slack).max())
    return KktResidual(stationarity=stationarity, primal_feasibility=primal, complementarity=comp)


def _absmax_per_col(mat: sp.csc_matrix) -> np.ndarray:
    """Column-wise inf-norm of a CSC matrix without densifying."""
    n = mat.shape[1]
    out = np.zeros(n)
    if mat.nnz == 0:
        return out
    data = np.abs(mat.data)
    indptr = mat.indptr
    nonempty = np.flatnonzero(np.diff(indptr))
    out[nonempty] = np.maximum.reduceat(data, indptr[nonempty])
    return out


def _ruiz_scale(P, q, A, passes=3):
    """Ruiz equilibration of the (P, A) pair plus cost scaling; returns
    (P, q, A, D, E, c) with P_s = c D P D, A_s = E A D, q_s = c D q."""
    n = P.shape[0]
    m = A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    c = 1.0
    P = P.copy()
    q = q.copy()
    A = A.copy()
    At = A.T.tocsc() if m else A
    for _ in range(passes):
        norm_x = np.maximum(_absmax_per_col(P), _absmax_per_col(A))
        norm_x[norm_x == 0.0] = 1.0
        d = 1.0 / np.sqrt(norm_x)
        if m:
            row_a = _absmax_per_col(At)
            row_a[row_a == 0.0] = 1.0
            e = 1.0 / np.sqrt(row_a)
        else:
            e = E
        Dm = sp.diags(d)
        P = (Dm @ P @ Dm).tocsc()
        q = d * q
        if m:
            A = (sp.diags(e) @ A @ Dm).tocsc()
            At = (Dm @ At @ sp.diags(e)).tocsc()
        D *= d
        E *= e
        # cost scaling keeps gradient magnitudes near unity
        p_scale = float(_absmax_per_col(P).mean()) if P.nnz else 0.0
        q_scale = np.abs(q).max() if n else 0.0
        gamma = max(p_scale, q_scale)
        if gamma > 0.0:
            gamma = 1.0 / gamma
            P = P * gamma
            q = q * gamma
            c *= gamma
    return P, q, A, D, E, c


class _Admm:
    """OSQP-style splitting on  min 0.5 x'Px + q'x  s.t.  l <= Ax <= u."""

    def __init__(self, P, q, A, l, u, scaling=True):
        self.n = P.shape[0]
        self.m = A.shape[0]
        self.l_orig, self.u_orig = l, u
        if scaling:
            self.P, self.q, self.A, self.D, self.E, self.c = _ruiz_scale(P, q, A)
        else:
            self.P, self.q, self.A = P.copy(), q.copy(), A.copy()
            self.D, self.E, self.c = np.ones(self.n), np.ones(self.m), 1.0
        self.l = self.E * l if self.m else l
        self.u = self.E * u if self.m else u
        self.sigma = 1e-6
        self.alpha = 1.6
        self.eq_mask = np.isfinite(self.l) & (self.u - self.l < 1e-14)
        self.rho_updates = 0
        self._set_rho(0.1)

    def _set_rho(self, rho_base):
        self.rho_base = rho_base
        rho = np.full(self.m, rho_base)
        rho[self.eq_mask] = rho_base * 1e3
        self.rho = rho
        self.rho_inv = 1.0 / rho if self.m else rho
        if self.m:
            kkt = sp.bmat(
                [
                    [self.P + self.sigma * sp.eye(self.n), self.A.T],
                    [self.A, -sp.diags(self.rho_inv)],
                ],
                format="csc",
            )
        else:
            kkt = (self.P + self.sigma * sp.eye(self.n)).tocsc()
        self.solver = spla.splu(kkt)

    def unscale_x(self, x):
        return self.D * x

    def unscale_y(self, y):
        return self.E * y / self.c

    def residuals(self, x, z, y):
        ax = self.A @ x
        r_prim = np.abs((ax - z) / self.E).max() if self.m else 0.0
        grad = self.P @ x + self.q + (self.A.T @ y if self.m else 0.0)
        r_dual = np.abs(grad / self.D).max() / self.c if self.n else 0.0
        return float(r_prim), float(r_dual)

    def run(self, x0, y0, tol_primal, tol_dual, max_iter, check_every=25, z0=None):
        x = x0.copy()
        y = y0.copy()
        if z0 is not None:
            z = z0.copy()
        else:
            z = np.clip(self.A @ x, self.l, self.u) if self.m else np.zeros(0)
        status = QpStatus.MAX_ITER
        it = 0
        r_prim = r_dual = np.inf
        rhs = np.empty(self.n + self.m)
        while it < max_iter:
            it += 1
            rhs[: self.n] = self.sigma * x - self.q
            rhs[self.n :] = z - self.rho_inv * y
            sol = self.solver.solve(rhs)
            x_t = sol[: self.n]
            if self.m:
                nu_t = sol[self.n :]
                z_t = z + self.rho_inv * (nu_t - y)
                x_new = self.alpha * x_t + (1 - self.alpha) * x
                z_relax = self.alpha * z_t + (1 - self.alpha) * z
                z_new = np.clip(z_relax + self.rho_inv * y, self.l, self.u)
                y_new = y + self.rho * (z_relax - z_new)
            else:
                x_new, z_new, y_new = x_t, z, y
            if it % check_every == 0 or it == max_iter:
                r_prim, r_dual = self.residuals(x_new, z_new, y_new)
                if r_prim <= tol_primal and r_dual <= tol_dual:
                    x, z, y = x_new, z_new, y_new
                    status = QpStatus.OPTIMAL
                    break
                if self.m and it >= 200 and self._primal_infeasible(y_new - y):
                    x, z, y = x_new, z_new, y_new
                    status = QpStatus.INFEASIBLE_DETECTED
                    break
                if self.m and self.rho_updates < 4 and it % 100 == 0:
                    self.rho_updates += self._adapt_rho(x_new, z_new, y_new)
            x, z, y = x_new, z_new, y_new
        if status is QpStatus.MAX_ITER:
            r_prim, r_dual = self.residuals(x, z, y)
        return x, z, y, status, it, r_prim, r_dual

    def _adapt_rho(self, x, z, y) -> int:
        ax = self.A @ x
        denom_p = max(np.abs(ax).max(), np.abs(z).max(), 1e-10)
        denom_d = max(
            np.abs(self.P @ x).max(),
            np.abs(self.A.T @ y).max() if self.m else 0.0,
            np.abs(self.q).max(),
            1e-10,
        )
        rp = np.abs(ax - z).max() / denom_p
        rd = np.abs(self.P @ x + self.q + self.A.T @ y).max() / denom_d
        ratio = np.sqrt(rp / max(rd, 1e-12))
        if ratio > 10.0 or ratio < 0.1:
            new_rho = float(np.clip(self.rho_base * ratio, 1e-6, 1e6))
            self._set_rho(new_rho)
            return 1
        return 0

    def _primal_infeasible(self, dy, eps=1e-10):
        norm = np.abs(dy).max()
        if norm < 1e-14:
            return False
        dyn = dy / norm
        if np.abs(self.A.T @ dyn).max() > eps * 1e4:
            return False
        pos = np.maximum(dyn, 0.0)
        neg = np.minimum(dyn, 0.0)
        if np.any((neg < -1e-12) & ~np.isfinite(self.l)):
            return False
        support = float(self.u @ pos + np.where(np.isfinite(self.l), self.l, 0.0) @ neg)
        return support < -eps


def _drop_parallel_rows(A_in_csr, b_in, act: np.ndarray) -> np.ndarray:
    """Keep only the tightest of any set of (nearly) parallel active rows.

    Parallel rows with different offsets make the active-set KKT system
    inconsistent; only the binding one can hold with equality.
    """
    idx = np.flatnonzero(act)
    best: dict[tuple, tuple[float, int]] = {}
    for i in idx:
        row = A_in_csr.getrow(i)
        norm = np.linalg.norm(row.data)
        if norm == 0.0:
            act[i] = False
            continue
        sig = (
            tuple(row.indices.tolist()),
            tuple(np.round(row.data / norm, 9).tolist()),
        )
        tightness = b_in[i] / norm
        if sig not in best or tightness < best[sig][0]:
            best[sig] = (tightness, i)
    keep = {i for _, i in best.values()}
    out = np.zeros_like(act)
    out[list(keep)] = True
    return out


def _polish_once(problem: QuadProgram, act: np.ndarray):
    """Equality-constrained solve on one candidate active set."""
    n = problem.n
    A_act = sp.vstack([problem.A_eq, problem.A_in[act]]).tocsc()
    b_act = np.concatenate([problem.b_eq, problem.b_in[act]])
    m_act = A_act.shape[0]
    delta = 1e-8
    if m_act:
        K_reg = sp.bmat(
            [
                [problem.P + delta * sp.eye(n), A_act.T],
                [A_act, -delta * sp.eye(m_act)],
            ],
            format="csc",
        )
    else:
        K_reg = (problem.P + delta * sp.eye(n)).tocsc()
    try:
        lu = spla.splu(K_reg)
    except RuntimeError:
        return None
    rhs = np.concatenate([-problem.q, b_act])

    def residual(t):
        # blockwise K t - rhs for the unregularized KKT system
        zt, yt = t[:n], t[n:]
        top = problem.P @ zt + (A_act.T @ yt if m_act else 0.0) - rhs[:n]
        if not m_act:
            return top
        return np.concatenate([top, A_act @ zt - rhs[n:]])

    t = lu.solve(rhs)
    # iterative refinement against the unregularized system, stopping if the
    # residual stalls (inconsistent/singular active set)
    r = residual(t)
    res = np.abs(r).max()
    for _ in range(2):
        if res < 1e-12:
            break
        t_next = t - lu.solve(r)
        r_next = residual(t_next)
        res_next = np.abs(r_next).max()
        if not res_next < res * 0.5:
            break
        t, r, res = t_next, r_next, res_next
    z_p = t[:n]
    nu_p = t[n : n + problem.n_eq]
    lam_act = t[n + problem.n_eq :]
    return z_p, nu_p, lam_act


def _polish(problem: QuadProgram, z, nu, lam, active_tol=1e-7, max_passes=2):
    """Active-set solve seeded from the splitting iterate, with refinement:
    rows with negative multipliers are released and freshly violated rows are
    added until the working set is consistent (or the pass budget runs out)."""
    act = np.zeros(problem.n_in, dtype=bool)
    A_in_csr = None
    if problem.n_in:
        slack = problem.A_in @ z - problem.b_in
        act = (slack > -active_tol * (1.0 + np.abs(problem.b_in))) | (lam > active_tol)
        A_in_csr = problem.A_in.tocsr()
    result = None
    for _ in range(max_passes):
        work = (
            _drop_parallel_rows(A_in_csr, problem.b_in, act.copy())
            if problem.n_in
            else act
        )
        out = _polish_once(problem, work)
        if out is None:
            return result
        z_p, nu_p, lam_act = out
        lam_p = np.zeros(problem.n_in)
        lam_p[work] = lam_act
        changed = False
        if problem.n_in:
            negative = lam_p < -active_tol
            if negative.any():
                act[negative] = False
                changed = True
            violation = problem.A_in @ z_p - problem.b_in
            newly = (violation > 1e-9 * (1.0 + np.abs(problem.b_in))) & ~act
            if newly.any():
                act = act | newly
                changed = True
        result = (z_p, nu_p, np.maximum(lam_p, 0.0))
        if not changed:
            break
    return result


def solve(
    problem: QuadProgram,
    tol_primal: float = 1e-6,
    tol_dual: float = 1e-6,
    max_iter: int = 20000,
    warm_start: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    scaling: bool = True,
    polish: bool = True,
) -> QpSolution:
    """Solve the QP; on MAX_ITER the best iterate is returned with residuals
    so the caller can decide whether it is usable.

    With polishing enabled the splitting iteration is first run to a loose
    tolerance, the active set is solved directly, and the from-scratch KKT
    residuals decide whether that already meets the requested tolerance; if
    not, iteration resumes at full accuracy.
    """
    n = problem.n
    P = (problem.P + REGULARIZATION * sp.eye(n)).tocsc()
    A = sp.vstack([problem.A_eq, problem.A_in]).tocsc() if (problem.n_eq + problem.n_in) else sp.csc_matrix((0, n))
    l = np.concatenate([problem.b_eq, np.full(problem.n_in, -np.inf)])
    u = np.concatenate([problem.b_eq, problem.b_in])

    admm = _Admm(P, problem.q, A, l, u, scaling=scaling)
    x0 = np.zeros(n)
    y0 = np.zeros(A.shape[0])
    if warm_start is not None:
        z_ws, nu_ws, lam_ws = warm_start
        if z_ws.shape == (n,):
            x0 = z_ws / admm.D
        y_ws = np.concatenate([nu_ws, lam_ws])
        if y_ws.shape == (A.shape[0],):
            y0 = admm.c * y_ws / admm.E

    def extract(x, y):
        z_out = admm.unscale_x(x)
        y_out = admm.unscale_y(y) if A.shape[0] else y
        return z_out, y_out[: problem.n_eq], np.maximum(y_out[problem.n_eq :], 0.0)

    def try_polish(z_out, nu, lam, it, status):
        polished = _polish(problem, z_out, nu, lam)
        if polished is None:
            return None
        cand = QpSolution(
            z=polished[0], duals_eq=polished[1], duals_in=polished[2],
            status=status, iterations=it, primal_residual=0.0, dual_residual=0.0,
            objective=problem.objective(polished[0]),
        )
        res = kkt_residual(problem, cand)
        cand.primal_residual = res.primal_feasibility
        cand.dual_residual = max(res.stationarity, res.complementarity)
        return cand

    total_it = 0
    x, y, z = x0, y0, None
    status = QpStatus.MAX_ITER
    r_prim = r_dual = np.inf
    chunk = 50
    while total_it < max_iter:
        budget = min(chunk, max_iter - total_it)
        x, z, y, status, it, r_prim, r_dual = admm.run(
            x, y, tol_primal, tol_dual, budget, z0=z
        )
        total_it += it
        z_out, nu, lam = extract(x, y)
        # a polish attempt only pays off once the iterate is meaningful
        near = r_prim <= max(100.0 * tol_primal, 1e-2)
        if polish and (status is QpStatus.OPTIMAL or near):
            cand = try_polish(z_out, nu, lam, total_it, QpStatus.OPTIMAL)
            if (
                cand is not None
                and cand.primal_residual <= tol_primal
                and cand.dual_residual <= tol_dual
            ):
                return cand
        if status is not QpStatus.MAX_ITER:
            break
        chunk = min(chunk * 2, 3000)

    return QpSolution(
        z=z_out,
        duals_eq=nu,
        duals_in=lam,
        status=status,
        iterations=total_it,
        primal_residual=float(r_prim),
        dual_residual=float(r_dual),
        objective=problem.objective(z_out),
    )


def dump_problem(problem: QuadProgram, path) -> None:
    """Write the problem in a plain text matrix format for offline cross-checks."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"n {problem.n}\nn_eq {problem.n_eq}\nn_in {problem.n_in}\n")
        for name, mat in (("P", problem.P), ("A_eq", problem.A_eq), ("A_in", problem.A_in)):
            dense = mat.toarray() if mat.shape[0] else np.zeros((0, problem.n))
            fh.write(f"{name}\n")
            for row in dense:
                fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
        for name, vec in (("q", problem.q), ("b_eq", problem.b_eq), ("b_in", problem.b_in)):
            fh.write(f"{name}\n")
            fh.write(" ".join(f"{v:.17g}" for v in vec) + "\n")
