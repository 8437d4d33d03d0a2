"""Sparse ADMM solver for convex QPs with an active-set polish step.

Problems are given as

    minimize    0.5 z' H z + p' z
    subject to  A_eq z = b_eq,  A_in z <= b_in,  lb <= z <= ub

and are handled internally in row form l <= A z <= u (bounds become
identity rows).  The operator-splitting iteration follows the usual
sigma/rho scheme with per-row step sizes (equality rows get a stiffer rho),
Ruiz equilibration, over-relaxation, and a direct solve of

    M = H + sigma I + A' diag(rho) A

per factorization.  After the iteration converges to modest accuracy the
active set is polished by one regularized KKT solve plus iterative
refinement, which normally lands on machine-precision KKT residuals.

Structured problems (block-tridiagonal by horizon node, diagonal H) carry a
QpStructure; the same algorithm then runs on per-node dense blocks with a
block Cholesky factorization, and the polish step solves the active-set
system through a Schur complement in row space.  A warm start that brings
row duals may ask for "polish first", which skips the splitting iteration
entirely whenever the predicted active set verifies against the full KKT
conditions.
"""

import math
from dataclasses import dataclass, field, fields

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .backend import bt_solve

_INF = float("inf")


class QpError(RuntimeError):
    pass


@dataclass
class QpSettings:
    sigma: float = 1e-6
    rho: float = 0.1
    eq_rho_scale: float = 1e3
    alpha: float = 1.6
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    kkt_tol: float = 1e-8
    max_iter: int = 4000
    check_interval: int = 25
    adaptive_rho: bool = True
    scaling_iters: int = 10
    polish_reg: float = 1e-9
    refine_steps: int = 2
    infeas_tol: float = 1e-8
    active_dual_tol: float = 1e-9


@dataclass
class QpStructure:
    """Block-tridiagonal constraint layout keyed by horizon node.

    Row block k holds every constraint row whose leading variables live in
    node k; A_next[k] carries the spill-over of those rows into node k+1
    (None for purely local blocks).  Global row order is the node-major
    concatenation of the blocks and the objective Hessian must be diagonal.
    bound_cols[k] optionally marks the trailing rows of block k as variable
    bounds: entry i is the local column index of the single unit coefficient
    in row (m_k - len + i).
    """

    var_sizes: list
    A_local: list
    A_next: list
    l: list
    u: list
    bound_cols: list = None

    def __post_init__(self):
        self.var_offsets = np.concatenate(
            [[0], np.cumsum(np.asarray(self.var_sizes, dtype=np.int64))]
        )
        self.row_sizes = [blk.shape[0] for blk in self.A_local]
        self.row_offsets = np.concatenate(
            [[0], np.cumsum(np.asarray(self.row_sizes, dtype=np.int64))]
        )

    @property
    def n_vars(self):
        return int(self.var_offsets[-1])

    @property
    def n_rows(self):
        return int(self.row_offsets[-1])

    def build_csr(self):
        rows = []
        K = len(self.var_sizes)
        for k in range(K):
            m_k = self.row_sizes[k]
            if m_k == 0:
                continue
            parts = []
            if self.var_offsets[k]:
                parts.append(
                    scipy.sparse.csr_matrix((m_k, int(self.var_offsets[k])))
                )
            parts.append(scipy.sparse.csr_matrix(self.A_local[k]))
            if self.A_next[k] is not None and k + 1 < K:
                parts.append(scipy.sparse.csr_matrix(self.A_next[k]))
                tail = self.n_vars - int(self.var_offsets[k + 2])
            else:
                tail = self.n_vars - int(self.var_offsets[k + 1])
            if tail:
                parts.append(scipy.sparse.csr_matrix((m_k, tail)))
            rows.append(scipy.sparse.hstack(parts, format="csr"))
        if not rows:
            return scipy.sparse.csr_matrix((0, self.n_vars))
        return scipy.sparse.vstack(rows, format="csr")

    def matvec(self, z):
        out = np.empty(self.n_rows)
        K = len(self.var_sizes)
        vo, ro = self.var_offsets, self.row_offsets
        for k in range(K):
            if self.row_sizes[k] == 0:
                continue
            seg = self.A_local[k] @ z[vo[k] : vo[k + 1]]
            if self.A_next[k] is not None and k + 1 < K:
                seg = seg + self.A_next[k] @ z[vo[k + 1] : vo[k + 2]]
            out[ro[k] : ro[k + 1]] = seg
        return out

    def rmatvec(self, y):
        out = np.zeros(self.n_vars)
        K = len(self.var_sizes)
        vo, ro = self.var_offsets, self.row_offsets
        for k in range(K):
            if self.row_sizes[k] == 0:
                continue
            seg = y[ro[k] : ro[k + 1]]
            out[vo[k] : vo[k + 1]] += seg @ self.A_local[k]
            if self.A_next[k] is not None and k + 1 < K:
                out[vo[k + 1] : vo[k + 2]] += seg @ self.A_next[k]
        return out


@dataclass
class QuadraticProgram:
    H: object
    p: np.ndarray
    A_eq: object = None
    b_eq: np.ndarray = None
    A_in: object = None
    b_in: np.ndarray = None
    lb: np.ndarray = None
    ub: np.ndarray = None
    structure: QpStructure = None


@dataclass
class WarmStart:
    """Starting guesses: a primal point, row duals, or an active-set guess.

    active_lo/active_hi are boolean row masks naming which inequality rows
    are expected to hold with equality at the optimum; they give the
    active-set iteration a much stronger start than duals because weakly
    active rows carry near-zero multipliers and would otherwise be missed.
    """

    z: np.ndarray
    row_duals: np.ndarray = None
    polish_first: bool = False
    active_lo: np.ndarray = None
    active_hi: np.ndarray = None


@dataclass
class QpSolution:
    z: np.ndarray
    status: str
    iterations: int
    row_duals: np.ndarray
    eq_duals: np.ndarray
    in_duals: np.ndarray
    lb_duals: np.ndarray
    ub_duals: np.ndarray
    active_lo: np.ndarray = None
    active_hi: np.ndarray = None
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# internal row form


def _nrows(mat):
    return mat.shape[0] if hasattr(mat, "shape") else len(mat)


class _RowForm:
    """Canonical l <= Az <= u problem with bookkeeping for dual unpacking."""

    def __init__(self, qp):
        self.structure = qp.structure
        self.H = qp.H
        self.p = np.asarray(qp.p, dtype=np.float64)
        self.n = self.p.shape[0]
        if qp.structure is not None:
            st = qp.structure
            self._csr = None
            self.l = (
                np.concatenate([np.asarray(v, dtype=np.float64) for v in st.l])
                if st.l
                else np.zeros(0)
            )
            self.u = (
                np.concatenate([np.asarray(v, dtype=np.float64) for v in st.u])
                if st.u
                else np.zeros(0)
            )
            self.m = st.n_rows
            self.n_eq = 0
            self.n_in = 0
            self.bound_vars = np.array([], dtype=np.int64)
        else:
            blocks = []
            ls = []
            us = []
            n_eq = 0
            if qp.A_eq is not None and _nrows(qp.A_eq):
                blocks.append(scipy.sparse.csr_matrix(qp.A_eq))
                b = np.asarray(qp.b_eq, dtype=np.float64)
                ls.append(b)
                us.append(b)
                n_eq = b.shape[0]
            n_in = 0
            if qp.A_in is not None and _nrows(qp.A_in):
                blocks.append(scipy.sparse.csr_matrix(qp.A_in))
                b = np.asarray(qp.b_in, dtype=np.float64)
                ls.append(np.full(b.shape[0], -_INF))
                us.append(b)
                n_in = b.shape[0]
            lb = (
                np.asarray(qp.lb, dtype=np.float64)
                if qp.lb is not None
                else np.full(self.n, -_INF)
            )
            ub = (
                np.asarray(qp.ub, dtype=np.float64)
                if qp.ub is not None
                else np.full(self.n, _INF)
            )
            bounded = np.where(np.isfinite(lb) | np.isfinite(ub))[0]
            if bounded.size:
                sel = scipy.sparse.csr_matrix(
                    (np.ones(bounded.size), (np.arange(bounded.size), bounded)),
                    shape=(bounded.size, self.n),
                )
                blocks.append(sel)
                ls.append(lb[bounded])
                us.append(ub[bounded])
            if not blocks:
                blocks.append(scipy.sparse.csr_matrix((0, self.n)))
                ls.append(np.zeros(0))
                us.append(np.zeros(0))
            self._csr = scipy.sparse.vstack(blocks, format="csr")
            self.l = np.concatenate(ls)
            self.u = np.concatenate(us)
            self.m = self._csr.shape[0]
            self.n_eq = n_eq
            self.n_in = n_in
            self.bound_vars = bounded
        self.eq_mask = np.isfinite(self.l) & (self.l == self.u)

    def csr(self):
        if self._csr is None:
            self._csr = self.structure.build_csr()
        return self._csr

    def matvec(self, z):
        if self._csr is None:
            return self.structure.matvec(z)
        return self._csr @ z

    def rmatvec(self, y):
        if self._csr is None:
            return self.structure.rmatvec(y)
        return self._csr.T @ y

    def hmatvec(self, z):
        H = self.H
        if isinstance(H, np.ndarray) and H.ndim == 1:
            return H * z
        return H @ z

    def hdiag(self):
        H = self.H
        if isinstance(H, np.ndarray):
            return H if H.ndim == 1 else np.diag(H).copy()
        return np.asarray(H.diagonal())

    def hdense(self):
        H = self.H
        if isinstance(H, np.ndarray):
            return np.diag(H) if H.ndim == 1 else np.asarray(H)
        return H.toarray()


# ---------------------------------------------------------------------------
# KKT residuals


def _kkt_terms(rf, z, y):
    Az = rf.matvec(z)
    stat = rf.hmatvec(z) + rf.p + rf.rmatvec(y)
    eq = rf.eq_mask
    out = {"stationarity": float(np.max(np.abs(stat))) if stat.size else 0.0}
    out["primal_eq"] = float(np.max(np.abs(Az[eq] - rf.u[eq]))) if eq.any() else 0.0
    ineq = ~eq
    if ineq.any():
        hi = np.maximum(Az[ineq] - rf.u[ineq], 0.0)
        lo = np.maximum(rf.l[ineq] - Az[ineq], 0.0)
        out["primal_in"] = float(np.max(np.maximum(hi, lo)))
        yi = y[ineq]
        gap_hi = rf.u[ineq] - Az[ineq]
        gap_lo = Az[ineq] - rf.l[ineq]
        gap_hi[~np.isfinite(gap_hi)] = 0.0
        gap_lo[~np.isfinite(gap_lo)] = 0.0
        comp = np.where(yi > 0, yi * gap_hi, 0.0) - np.where(
            yi < 0, yi * gap_lo, 0.0
        )
        out["complementarity"] = float(np.max(np.abs(comp))) if comp.size else 0.0
        lo_inf = ~np.isfinite(rf.l[ineq])
        hi_inf = ~np.isfinite(rf.u[ineq])
        dual_viol = 0.0
        if hi_inf.any():
            dual_viol = max(dual_viol, float(np.max(np.maximum(yi[hi_inf], 0.0))))
        if lo_inf.any():
            dual_viol = max(dual_viol, float(np.max(np.maximum(-yi[lo_inf], 0.0))))
        out["dual_feasibility"] = dual_viol
    else:
        out["primal_in"] = 0.0
        out["complementarity"] = 0.0
        out["dual_feasibility"] = 0.0
    return out


def kkt_residuals(qp, solution):
    """Infinity norms of the KKT conditions at a candidate solution.

    Keys: stationarity, primal_eq, primal_in, complementarity, and
    dual_feasibility (sign violations of inequality multipliers).
    """
    rf = _RowForm(qp)
    return _kkt_terms(rf, solution.z, solution.row_duals)


# ---------------------------------------------------------------------------
# block-tridiagonal Cholesky shared by the structured paths


def _bt_factor(diags, offs):
    K = len(diags)
    chol = []
    lower = []
    prev_w = None
    for k in range(K):
        D = diags[k]
        if k > 0 and prev_w is not None and prev_w.size:
            D = D - prev_w @ prev_w.T
        if D.size:
            try:
                L = np.linalg.cholesky(D)
            except np.linalg.LinAlgError as exc:
                raise QpError(f"block {k} lost positive definiteness") from exc
        else:
            L = D.reshape(0, 0)
        chol.append(np.ascontiguousarray(L))
        if k + 1 < K:
            if L.size and offs[k].size:
                W = scipy.linalg.solve_triangular(L, offs[k].T, lower=True).T
            else:
                W = offs[k]
            lower.append(np.ascontiguousarray(W))
            prev_w = W
    sizes = np.asarray([d.shape[0] for d in diags], dtype=np.int64)
    return chol, lower, sizes


# ---------------------------------------------------------------------------
# linear-system engines for the splitting iteration


class _DenseEngine:
    def __init__(self, rf):
        self.rf = rf
        self.A = rf.csr().toarray()
        self.Hd = rf.hdense()

    def factor(self, sigma, rho):
        M = self.Hd + sigma * np.eye(self.rf.n)
        if self.A.shape[0]:
            M = M + (self.A.T * rho) @ self.A
        self._cho = scipy.linalg.cho_factor(M)

    def solve(self, rhs):
        return scipy.linalg.cho_solve(self._cho, rhs)


class _SparseEngine:
    def __init__(self, rf):
        self.rf = rf
        self.A = rf.csr().tocsc()
        H = rf.H
        if isinstance(H, np.ndarray):
            self.Hs = (
                scipy.sparse.diags(H).tocsc()
                if H.ndim == 1
                else scipy.sparse.csc_matrix(H)
            )
        else:
            self.Hs = scipy.sparse.csc_matrix(H)

    def factor(self, sigma, rho):
        M = (
            self.Hs
            + sigma * scipy.sparse.identity(self.rf.n, format="csc")
            + self.A.T @ scipy.sparse.diags(rho) @ self.A
        )
        self._lu = scipy.sparse.linalg.splu(M.tocsc())

    def solve(self, rhs):
        return self._lu.solve(rhs)


class _BlockEngine:
    """Factor of H + sigma I + A' rho A using the node block structure."""

    def __init__(self, structure, hdiag):
        self.st = structure
        self.Hd = hdiag

    def factor(self, sigma, rho):
        st = self.st
        K = len(st.var_sizes)
        vo, ro = st.var_offsets, st.row_offsets
        diags = []
        offs = []
        for k in range(K):
            D = np.diag(self.Hd[vo[k] : vo[k + 1]] + sigma)
            rho_k = rho[ro[k] : ro[k + 1]]
            Al = st.A_local[k]
            if Al.shape[0]:
                D = D + (Al.T * rho_k) @ Al
            if k > 0 and st.A_next[k - 1] is not None:
                An = st.A_next[k - 1]
                rho_p = rho[ro[k - 1] : ro[k]]
                D = D + (An.T * rho_p) @ An
            diags.append(D)
            if k + 1 < K:
                if st.A_next[k] is not None:
                    offs.append((st.A_next[k].T * rho_k) @ Al)
                else:
                    offs.append(
                        np.zeros((st.var_sizes[k + 1], st.var_sizes[k]))
                    )
        self._factor = _bt_factor(diags, offs)

    def solve(self, rhs):
        chol, lower, sizes = self._factor
        return bt_solve(chol, lower, sizes, rhs)


class _ShimRowForm:
    """Scaled-space stand-in exposing just what the engines need."""

    def __init__(self, n, m, H, A):
        self.n = n
        self.m = m
        self.H = H
        self.structure = None
        self._A = A

    def csr(self):
        return self._A

    def hdense(self):
        H = self.H
        if isinstance(H, np.ndarray):
            return np.diag(H) if H.ndim == 1 else H
        return H.toarray()


def _make_engine(rf, structure=None, hdiag=None):
    if structure is not None:
        return _BlockEngine(structure, hdiag)
    if rf.n <= 400:
        return _DenseEngine(rf)
    return _SparseEngine(rf)


# ---------------------------------------------------------------------------
# Ruiz equilibration


def _row_abs_max(B):
    out = np.zeros(B.shape[0])
    if B.nnz:
        ptr = B.indptr
        nz = np.diff(ptr) > 0
        out[nz] = np.maximum.reduceat(np.abs(B.data), ptr[:-1][nz])
    return out


class _Scaling:
    def __init__(self, rf, iters):
        n, m = rf.n, rf.m
        d = np.ones(n)
        e = np.ones(m)
        c = 1.0
        if iters and m:
            Hd = rf.hdiag()
            As = rf.csr().copy().astype(np.float64)
            for _ in range(iters):
                col_norm = _row_abs_max(As.T.tocsr())
                col_norm = np.maximum(col_norm, np.abs(Hd) * d * d * c)
                col_norm[col_norm == 0] = 1.0
                dd = 1.0 / np.sqrt(col_norm)
                row_norm = _row_abs_max(As.tocsr())
                row_norm[row_norm == 0] = 1.0
                ee = 1.0 / np.sqrt(row_norm)
                d *= dd
                e *= ee
                As = (scipy.sparse.diags(ee) @ As @ scipy.sparse.diags(dd)).tocsr()
                mean_h = float(np.mean(np.abs(Hd) * d * d)) * c
                grad = float(np.max(np.abs(c * d * rf.p))) if rf.p.size else 0.0
                denom = max(mean_h, grad)
                if denom > 0:
                    c *= 1.0 / max(denom, 1e-8)
            c = min(max(c, 1e-8), 1e8)
        self.d = d
        self.e = e
        self.c = c


# ---------------------------------------------------------------------------
# active-set polish


def _active_masks(rf, z, y, settings, proximal):
    eq = rf.eq_mask
    tol = settings.active_dual_tol
    act_lo = (~eq) & (y < -tol) & np.isfinite(rf.l)
    act_hi = (~eq) & (y > tol) & np.isfinite(rf.u)
    if proximal:
        Az = rf.matvec(z)
        near_lo = (~eq) & np.isfinite(rf.l) & (np.abs(Az - rf.l) <= 1e-7)
        near_hi = (~eq) & np.isfinite(rf.u) & (np.abs(Az - rf.u) <= 1e-7)
        act_lo = act_lo | (near_lo & ~act_hi)
        act_hi = act_hi | (near_hi & ~act_lo)
    return act_lo, act_hi


def _singleton_info(rf, act):
    """Identify active rows that are plain variable bounds (one unit entry)."""
    singleton = np.zeros(rf.m, dtype=bool)
    cols = np.full(rf.m, -1, dtype=np.int64)
    st = rf.structure
    if st is not None and st.bound_cols is not None:
        ro = st.row_offsets
        for k in range(len(st.var_sizes)):
            bc = st.bound_cols[k]
            if bc is None or len(bc) == 0:
                continue
            idx = np.arange(ro[k + 1] - len(bc), ro[k + 1])
            singleton[idx] = True
            cols[idx] = st.var_offsets[k] + np.asarray(bc, dtype=np.int64)
    else:
        A = rf.csr()
        nnz = np.diff(A.indptr)
        for i in np.where(act & (nnz == 1))[0]:
            s = A.indptr[i]
            if A.data[s] == 1.0:
                singleton[i] = True
                cols[i] = A.indices[s]
    return singleton, cols


def _polish(rf, z, y, settings, proximal=False):
    """Solve the predicted active-set KKT system to high accuracy.

    Active variable bounds fix variables and leave a reduced system on the
    free ones; returns (z, row_duals) or None if the factorization fails.
    """
    act_lo, act_hi = _active_masks(rf, z, y, settings, proximal)
    return _polish_masks(rf, act_lo, act_hi, settings)


def _cold_start_masks(rf):
    """Initial working set: pin singleton bounds of positively priced slacks.

    Slacks under an L1 penalty rest at zero and an empty start would let
    them run away through their tiny curvature, while purely quadratic
    slacks start free since their optima are almost never at the bound.
    """
    eq = rf.eq_mask
    singleton, cols = _singleton_info(rf, np.ones(rf.m, dtype=bool))
    act_lo = singleton & ~eq & np.isfinite(rf.l)
    act_lo[act_lo] &= rf.p[cols[act_lo]] > 0.0
    act_hi = np.zeros(rf.m, dtype=bool)
    return act_lo, act_hi


def _refine_active_set(rf, z, y, settings, max_rounds=30, masks=None):
    """Primal-dual active-set iteration from a mask, dual, or cold start.

    Each round solves the current working-set KKT system, then activates
    violated rows and drops active inequalities with wrong-sign duals.  If
    the working set ever repeats, the loop retreats to dropping only the
    lowest-index offender per round, which breaks the add/drop
    oscillations on ties that degenerate optima produce.  A warm start
    that still cycles is abandoned once for the cold initial set.  Returns
    a verified (z, duals, act_lo, act_hi) or None.
    """
    eq = rf.eq_mask
    warm = True
    if masks is not None:
        act_lo = masks[0].astype(bool) & ~eq & np.isfinite(rf.l)
        act_hi = masks[1].astype(bool) & ~eq & np.isfinite(rf.u) & ~act_lo
        # rows the guess does not cover follow the cold pinning rule
        cold_lo, _ = _cold_start_masks(rf)
        act_lo |= cold_lo & ~act_hi
    elif np.any(y):
        act_lo, act_hi = _active_masks(rf, z, y, settings, proximal=False)
    else:
        act_lo, act_hi = _cold_start_masks(rf)
        warm = False
    seen = set()
    single_drop = False
    restarted = not warm
    for _ in range(max_rounds):
        sol = _polish_masks(rf, act_lo, act_hi, settings)
        if sol is None:
            return None
        z_c, y_c = sol
        Az = rf.matvec(z_c)
        tol = 1e-9
        add_hi = (~eq) & np.isfinite(rf.u) & (Az > rf.u + tol) & ~act_hi
        add_lo = (~eq) & np.isfinite(rf.l) & (Az < rf.l - tol) & ~act_lo
        drop_hi = act_hi & (y_c < -tol)
        drop_lo = act_lo & (y_c > tol)
        dropped = drop_hi | drop_lo
        if single_drop and dropped.any():
            first = int(np.where(dropped)[0][0])
            drop_hi = np.zeros(rf.m, dtype=bool)
            drop_lo = np.zeros(rf.m, dtype=bool)
            drop_hi[first] = act_hi[first]
            drop_lo[first] = act_lo[first]
        if not (add_hi.any() or add_lo.any() or drop_hi.any() or drop_lo.any()):
            if _verify(rf, z_c, y_c, settings):
                return z_c, y_c, act_lo, act_hi
            return None
        act_hi = (act_hi | add_hi) & ~drop_hi
        act_lo = (act_lo | add_lo) & ~drop_lo
        # a row cannot be active on both sides
        both = act_hi & act_lo
        act_hi &= ~both
        act_lo &= ~both
        key = (act_lo.tobytes(), act_hi.tobytes())
        if key in seen:
            if not single_drop:
                single_drop = True
            elif not restarted:
                act_lo, act_hi = _cold_start_masks(rf)
                seen.clear()
                single_drop = False
                restarted = True
        seen.add(key)
    return None


def _polish_masks(rf, act_lo, act_hi, settings):
    act = rf.eq_mask | act_lo | act_hi
    singleton, cols = _singleton_info(rf, act)

    fixed_rows = act & singleton
    gen_rows = act & ~singleton
    fixed_vars = cols[fixed_rows]
    fixed_vals = np.where(act_lo[fixed_rows], rf.l[fixed_rows], rf.u[fixed_rows])
    free = np.ones(rf.n, dtype=bool)
    free[fixed_vars] = False
    b_gen = np.where(act_lo[gen_rows], rf.l[gen_rows], rf.u[gen_rows])

    z_fix = np.zeros(rf.n)
    z_fix[fixed_vars] = fixed_vals

    if rf.structure is not None:
        sol = _polish_structured(rf, gen_rows, b_gen, free, z_fix, settings)
    else:
        sol = _polish_dense(rf, gen_rows, b_gen, free, z_fix, settings)
    if sol is None:
        return None
    z_new, nu = sol

    y_full = np.zeros(rf.m)
    y_full[gen_rows] = nu
    if fixed_vars.size:
        # bound duals balance the stationarity rows of the fixed variables
        resid = rf.hmatvec(z_new) + rf.p + rf.rmatvec(y_full)
        y_full[np.where(fixed_rows)[0]] = -resid[fixed_vars]
    return z_new, y_full


def _polish_dense(rf, gen_rows, b, free, z_fix, settings):
    A = rf.csr()
    G = A[gen_rows].toarray() if gen_rows.any() else np.zeros((0, rf.n))
    Hd = rf.hdense()
    nf = int(free.sum())
    ma = G.shape[0]
    rhs_top = -(rf.p + Hd[:, ~free] @ z_fix[~free])[free]
    rhs_bot = b - G[:, ~free] @ z_fix[~free]
    Gf = G[:, free]
    Hf = Hd[np.ix_(free, free)]
    delta = settings.polish_reg
    K = np.block([[Hf + delta * np.eye(nf), Gf.T], [Gf, -delta * np.eye(ma)]])
    rhs = np.concatenate([rhs_top, rhs_bot])
    try:
        lu = scipy.linalg.lu_factor(K)
    except (ValueError, scipy.linalg.LinAlgError):
        return None
    sol = scipy.linalg.lu_solve(lu, rhs)
    K0 = np.block([[Hf, Gf.T], [Gf, np.zeros((ma, ma))]])
    for _ in range(settings.refine_steps):
        sol = sol + scipy.linalg.lu_solve(lu, rhs - K0 @ sol)
    z = z_fix.copy()
    z[free] = sol[:nf]
    return z, sol[nf:]


def _polish_structured(rf, gen_rows, b_gen, free, z_fix, settings):
    """Active-set KKT solve through a Schur complement in row space.

    With diagonal H the variable block eliminates in closed form and
    S = G D^-1 G' + delta I keeps the block-tridiagonal node coupling.
    """
    st = rf.structure
    K = len(st.var_sizes)
    vo, ro = st.var_offsets, st.row_offsets
    delta = settings.polish_reg
    Hd = rf.hdiag()
    Dinv = np.where(free, 1.0 / (Hd + delta), 0.0)

    # stationarity rhs restricted to free variables
    t = np.where(free, -(rf.p + Hd * z_fix), 0.0)

    gen_idx = np.where(gen_rows)[0]
    act_local = []
    act_next = []
    rhs_parts = []
    ptr = 0
    for k in range(K):
        sel = gen_idx[(gen_idx >= ro[k]) & (gen_idx < ro[k + 1])] - ro[k]
        Al = st.A_local[k][sel]
        An = (
            st.A_next[k][sel]
            if (st.A_next[k] is not None and k + 1 < K)
            else None
        )
        act_local.append(Al)
        act_next.append(An)
        b_k = b_gen[ptr : ptr + sel.size].copy()
        ptr += sel.size
        if Al.shape[0]:
            # move fixed-variable contributions to the rhs
            b_k = b_k - Al @ z_fix[vo[k] : vo[k + 1]]
            if An is not None:
                b_k = b_k - An @ z_fix[vo[k + 1] : vo[k + 2]]
        rhs_parts.append(b_k)

    diags = []
    offs = []
    schur_rhs = []
    for k in range(K):
        Al = act_local[k]
        An = act_next[k]
        Dk = Dinv[vo[k] : vo[k + 1]]
        if Al.shape[0]:
            AlD = Al * Dk
            S = AlD @ Al.T
            r_k = AlD @ t[vo[k] : vo[k + 1]]
        else:
            S = np.zeros((0, 0))
            r_k = np.zeros(0)
        if An is not None and An.shape[0]:
            Dk1 = Dinv[vo[k + 1] : vo[k + 2]]
            AnD = An * Dk1
            S = S + AnD @ An.T
            r_k = r_k + AnD @ t[vo[k + 1] : vo[k + 2]]
        if S.shape[0]:
            S = S + delta * np.eye(S.shape[0])
        diags.append(S)
        schur_rhs.append(r_k - rhs_parts[k])
        if k + 1 < K:
            Al1 = act_local[k + 1]
            if An is not None and Al1.shape[0] and An.shape[0]:
                Dk1 = Dinv[vo[k + 1] : vo[k + 2]]
                offs.append((Al1 * Dk1) @ An.T)
            else:
                offs.append(np.zeros((Al1.shape[0], S.shape[0])))

    try:
        factor = _bt_factor(diags, offs)
    except QpError:
        return None
    chol, lower, sizes = factor

    def act_matvec(v):
        parts = []
        for k in range(K):
            Al = act_local[k]
            if Al.shape[0] == 0:
                parts.append(np.zeros(0))
                continue
            out_k = Al @ v[vo[k] : vo[k + 1]]
            if act_next[k] is not None:
                out_k = out_k + act_next[k] @ v[vo[k + 1] : vo[k + 2]]
            parts.append(out_k)
        return np.concatenate(parts) if parts else np.zeros(0)

    def act_rmatvec(w):
        out = np.zeros(rf.n)
        ptr = 0
        for k in range(K):
            m_k = act_local[k].shape[0]
            seg = w[ptr : ptr + m_k]
            ptr += m_k
            if m_k == 0:
                continue
            out[vo[k] : vo[k + 1]] += seg @ act_local[k]
            if act_next[k] is not None:
                out[vo[k + 1] : vo[k + 2]] += seg @ act_next[k]
        return out

    nu = bt_solve(chol, lower, sizes, np.concatenate(schur_rhs))
    z = z_fix.copy()
    z[free] = (Dinv * (t - act_rmatvec(nu)))[free]

    # iterative refinement against the unregularized KKT system removes the
    # delta-induced error on consistent directions; stops early once the
    # residual is small or has hit the floor set by redundant rows
    if nu.size:
        gate = 0.1 * settings.kkt_tol
        best = _INF
        for _ in range(settings.refine_steps):
            r_stat = np.where(free, Hd * z + rf.p + act_rmatvec(nu), 0.0)
            r_prim = act_matvec(z) - b_gen
            worst = max(np.abs(r_stat).max(), np.abs(r_prim).max())
            if worst <= gate or worst > 0.9 * best:
                break
            best = worst
            dnu = bt_solve(
                chol, lower, sizes, r_prim - act_matvec(Dinv * r_stat)
            )
            z = z + Dinv * (-r_stat - act_rmatvec(dnu))
            nu = nu + dnu
    return z, nu


# ---------------------------------------------------------------------------
# driver


def _verify(rf, z, y, settings):
    return max(_kkt_terms(rf, z, y).values()) <= settings.kkt_tol


def _package(rf, z, y, status, iterations, settings, info=None,
             active_lo=None, active_hi=None):
    info = dict(info or {})
    info["kkt"] = _kkt_terms(rf, z, y)
    if rf.structure is not None:
        eq_d = y[rf.eq_mask]
        in_d = np.maximum(y[~rf.eq_mask], 0.0)
        lb_d = np.zeros(0)
        ub_d = np.zeros(0)
    else:
        eq_d = y[: rf.n_eq].copy()
        in_d = np.maximum(y[rf.n_eq : rf.n_eq + rf.n_in], 0.0)
        yb = y[rf.n_eq + rf.n_in :]
        lb_d = np.maximum(-yb, 0.0)
        ub_d = np.maximum(yb, 0.0)
    return QpSolution(
        z=z,
        status=status,
        iterations=iterations,
        row_duals=y,
        eq_duals=eq_d,
        in_duals=in_d,
        lb_duals=lb_d,
        ub_duals=ub_d,
        active_lo=active_lo,
        active_hi=active_hi,
        info=info,
    )


def _solve_unconstrained(rf):
    H = rf.H
    if isinstance(H, np.ndarray) and H.ndim == 1:
        return -rf.p / H
    return np.linalg.solve(rf.hdense(), -rf.p)


def solve_qp(qp, warm_start=None, settings=None):
    """Solve a convex QP and return a QpSolution with duals and status.

    A warm start carrying row duals with polish_first=True solves the
    predicted active set directly and only falls back to the splitting
    iteration when the full KKT verification fails.
    """
    settings = settings or QpSettings()
    rf = _RowForm(qp)
    if rf.m == 0:
        z = _solve_unconstrained(rf)
        return _package(rf, z, np.zeros(0), "solved", 0, settings)

    z0 = np.zeros(rf.n)
    y0 = np.zeros(rf.m)
    if warm_start is not None:
        if warm_start.z is not None:
            z0 = np.asarray(warm_start.z, dtype=np.float64).copy()
        if warm_start.row_duals is not None:
            y0 = np.asarray(warm_start.row_duals, dtype=np.float64).copy()

    masks = None
    if (warm_start is not None and warm_start.active_lo is not None
            and warm_start.active_lo.shape[0] == rf.m):
        masks = (warm_start.active_lo, warm_start.active_hi)
    warm_polish = (
        warm_start is not None
        and warm_start.polish_first
        and (warm_start.row_duals is not None or masks is not None)
    )
    # structured problems are cheap to attack with the active-set iteration
    # directly; the splitting iteration stays as the robust fallback
    if warm_polish or qp.structure is not None:
        refined = _refine_active_set(rf, z0, y0, settings, max_rounds=30,
                                     masks=masks)
        if refined is not None:
            return _package(rf, refined[0], refined[1], "solved", 0, settings,
                            active_lo=refined[2], active_hi=refined[3])

    return _admm(rf, z0, y0, settings)


def _tighter(settings):
    out = QpSettings(
        **{f.name: getattr(settings, f.name) for f in fields(settings)}
    )
    out.eps_abs = max(settings.eps_abs * 1e-2, 1e-12)
    out.eps_rel = max(settings.eps_rel * 1e-2, 1e-12)
    return out


def _scaled_structure(st, d, e):
    vo, ro = st.var_offsets, st.row_offsets
    K = len(st.var_sizes)
    A_local = []
    A_next = []
    for k in range(K):
        ek = e[ro[k] : ro[k + 1], None]
        A_local.append(ek * st.A_local[k] * d[vo[k] : vo[k + 1]])
        if st.A_next[k] is not None and k + 1 < K:
            A_next.append(ek * st.A_next[k] * d[vo[k + 1] : vo[k + 2]])
        else:
            A_next.append(None)
    return QpStructure(
        var_sizes=list(st.var_sizes),
        A_local=A_local,
        A_next=A_next,
        l=[np.zeros(s) for s in st.row_sizes],
        u=[np.zeros(s) for s in st.row_sizes],
        bound_cols=st.bound_cols,
    )


def _admm(rf, z0, y0, settings):
    n, m = rf.n, rf.m
    sc = _Scaling(rf, settings.scaling_iters)
    d, e, c = sc.d, sc.e, sc.c

    A = rf.csr()
    As = (scipy.sparse.diags(e) @ A @ scipy.sparse.diags(d)).tocsr()
    if isinstance(rf.H, np.ndarray) and rf.H.ndim == 1:
        Hs = c * rf.H * d * d
        if rf.structure is not None:
            engine = _BlockEngine(_scaled_structure(rf.structure, d, e), Hs)
        else:
            engine = _make_engine(_ShimRowForm(n, m, Hs, As))
    else:
        Hm = (
            rf.H.tocsc()
            if scipy.sparse.issparse(rf.H)
            else scipy.sparse.csc_matrix(rf.H)
        )
        Hm = (c * scipy.sparse.diags(d) @ Hm @ scipy.sparse.diags(d)).tocsc()
        engine = _make_engine(_ShimRowForm(n, m, Hm, As))
    qs = c * d * rf.p
    ls = np.where(np.isfinite(rf.l), e * rf.l, -_INF)
    us = np.where(np.isfinite(rf.u), e * rf.u, _INF)

    rho = np.where(rf.eq_mask, settings.rho * settings.eq_rho_scale, settings.rho)
    engine.factor(settings.sigma, rho)

    x = z0 / d
    y = c * y0 / e
    zr = np.clip(As @ x, ls, us)

    sigma = settings.sigma
    alpha = settings.alpha
    it = 0
    for it in range(1, settings.max_iter + 1):
        rhs = sigma * x - qs + As.T @ (rho * zr - y)
        x_tilde = engine.solve(rhs)
        z_tilde = As @ x_tilde
        x_prev, y_prev = x, y
        x = alpha * x_tilde + (1.0 - alpha) * x_prev
        z_cand = alpha * z_tilde + (1.0 - alpha) * zr + y_prev / rho
        z_new = np.clip(z_cand, ls, us)
        y = y_prev + rho * (alpha * z_tilde + (1.0 - alpha) * zr - z_new)
        zr = z_new

        # early checks let an accurate warm start terminate immediately
        if it <= 2 or it % settings.check_interval == 0 or it == settings.max_iter:
            z_un = d * x
            y_un = (e * y) / c
            Az_un = A @ z_un
            zr_un = zr / e
            r_pri = float(np.max(np.abs(Az_un - zr_un))) if m else 0.0
            Hz_un = rf.hmatvec(z_un)
            Aty_un = A.T @ y_un
            r_dua = float(np.max(np.abs(Hz_un + rf.p + Aty_un)))
            tol_pri = settings.eps_abs + settings.eps_rel * max(
                float(np.max(np.abs(Az_un))), float(np.max(np.abs(zr_un)))
            )
            tol_dua = settings.eps_abs + settings.eps_rel * max(
                float(np.max(np.abs(Hz_un))),
                float(np.max(np.abs(Aty_un))),
                float(np.max(np.abs(rf.p))) if rf.p.size else 0.0,
            )
            if r_pri <= tol_pri and r_dua <= tol_dua:
                for proximal in (False, True):
                    polished = _polish(rf, z_un, y_un, settings, proximal=proximal)
                    if polished is not None and _verify(rf, *polished, settings):
                        return _package(
                            rf, polished[0], polished[1], "solved", it, settings
                        )
                if max(_kkt_terms(rf, z_un, y_un).values()) <= settings.kkt_tol:
                    return _package(rf, z_un, y_un, "solved", it, settings)
                settings = _tighter(settings)
            status = _infeasibility(rf, x - x_prev, y - y_prev, d, e, c, settings)
            if status is not None:
                return _package(rf, d * x, (e * y) / c, status, it, settings)
            if settings.adaptive_rho and it % (settings.check_interval * 4) == 0:
                num = r_pri / max(tol_pri, 1e-16)
                den = r_dua / max(tol_dua, 1e-16)
                scale = math.sqrt(max(num, 1e-12) / max(den, 1e-12))
                if scale > 5.0 or scale < 0.2:
                    rho = np.clip(rho * scale, 1e-8, 1e8)
                    engine.factor(settings.sigma, rho)

    z_un = d * x
    y_un = (e * y) / c
    for proximal in (False, True):
        polished = _polish(rf, z_un, y_un, settings, proximal=proximal)
        if polished is not None and _verify(rf, *polished, settings):
            return _package(rf, polished[0], polished[1], "solved", it, settings)
    return _package(rf, z_un, y_un, "max_iterations", it, settings)


def _infeasibility(rf, dx, dy, d, e, c, settings):
    tol = settings.infeas_tol
    dy_un = (e * dy) / c
    ndy = float(np.max(np.abs(dy_un))) if dy_un.size else 0.0
    if ndy > tol:
        atd = rf.rmatvec(dy_un)
        if float(np.max(np.abs(atd))) <= tol * ndy:
            fin_u = np.isfinite(rf.u)
            fin_l = np.isfinite(rf.l)
            bad_ray = bool(
                np.any(~fin_u & (dy_un > tol * ndy))
                or np.any(~fin_l & (dy_un < -tol * ndy))
            )
            support = float(
                np.sum(rf.u[fin_u] * np.maximum(dy_un[fin_u], 0.0))
                + np.sum(rf.l[fin_l] * np.minimum(dy_un[fin_l], 0.0))
            )
            if not bad_ray and support < -tol * ndy:
                return "primal_infeasible"
    dx_un = d * dx
    ndx = float(np.max(np.abs(dx_un))) if dx_un.size else 0.0
    if ndx > tol:
        if (
            float(np.max(np.abs(rf.hmatvec(dx_un)))) <= tol * ndx
            and float(rf.p @ dx_un) < -tol * ndx
        ):
            Adx = rf.matvec(dx_un)
            fin_u = np.isfinite(rf.u)
            fin_l = np.isfinite(rf.l)
            eq = rf.eq_mask
            if not (
                np.any(np.abs(Adx[eq]) > tol * ndx)
                or np.any(Adx[fin_u & ~eq] > tol * ndx)
                or np.any(Adx[fin_l & ~eq] < -tol * ndx)
            ):
                return "dual_infeasible"
    return None
