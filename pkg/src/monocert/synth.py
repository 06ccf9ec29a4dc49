"""Weight synthesis via linear programming, plus SOS program export.

The stability conditions are linear in the weights once the state is fixed
at a sample point, so synthesis is a sampled LP: maximize a margin s subject
to the condition rows at every grid point (and every tied branch).  Sampling
is made sound again post hoc — a result is only reported as a success after
the weights pass the corresponding certification check on a grid of doubled
resolution.

* ``synth_const`` — constant vectors (column mode "sum" for v, row mode
  "max" for w), normalized so min(v) = 1.
* ``synth_poly``  — univariate polynomial weights of bounded degree; the
  margin applies uniformly (optionally only near the equilibrium), with
  positivity enforced at the axis grid points.

Solving is done by a small dense two-phase simplex with Bland's rule —
deterministic and cycling-free; the LPs here are small once duplicate rows
are removed (constant Jacobians collapse to a handful of rows).

``export_sos_sdpa`` writes the exact sum-of-squares feasibility program for
the same positivity/condition/strictness constraints in SDPA sparse format
(.dat-s) for an external SDP solver, with a JSON sidecar mapping decision
variables to block positions; ``parse_sos_solution`` reads the solver's
output back into a weight family.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from itertools import product
from typing import Optional, Sequence, Union

import numpy as np

from .certify import (CertReport, CertifyError, WorkingBox, check_cor1,
                      check_cor2, check_kamke, check_thm1, check_thm2,
                      DEFAULT_EPS, _sides_and_ties, _pattern_tuple)
from .measures import WeightComponent, WeightFamily
from .sysdsl import (Add, Const, Div, Expr, Max, Min, Mul, Neg, Pow, Sub,
                     SystemDef, TimeVar, Var, jacobian)

__all__ = [
    "LPProblem", "LPResult", "solve_lp", "SynthError", "SynthResult",
    "synth_const", "synth_poly", "export_sos_sdpa", "parse_sos_solution",
    "V_CAP", "COEFF_CAP",
]

V_CAP = 1e3       # upper bound on constant weight entries (keeps the LP bounded)
COEFF_CAP = 100.0  # symmetric cap on polynomial weight coefficients


class SynthError(ValueError):
    """Malformed synthesis/export request."""


# ---------------------------------------------------------------------------
# LP: problem, result, two-phase simplex with Bland's rule
# ---------------------------------------------------------------------------

@dataclass
class LPProblem:
    """maximize c.z  subject to  rows.z <= rhs  and  lower <= z <= upper."""
    c: np.ndarray
    rows: np.ndarray
    rhs: np.ndarray
    lower: np.ndarray   # -inf for free below
    upper: np.ndarray   # +inf for free above

    @property
    def n_vars(self) -> int:
        return self.c.shape[0]

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.rows = np.asarray(self.rows, dtype=float).reshape(-1, self.c.shape[0])
        self.rhs = np.asarray(self.rhs, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if not np.all(np.isfinite(self.rows)):
            raise SynthError("constraint rows must be finite")
        if self.rows.shape[0] != self.rhs.shape[0]:
            raise SynthError("rows/rhs mismatch")


@dataclass
class LPResult:
    status: str            # optimal | infeasible | unbounded
    z: Optional[np.ndarray]
    objective: Optional[float]


_PIV_TOL = 1e-9


def _pivot(T: np.ndarray, basis: list, i: int, j: int) -> None:
    piv_row = T[i] / T[i, j]
    col = T[:, j].copy()
    col[i] = 0.0
    T -= np.outer(col, piv_row)
    T[i] = piv_row
    basis[i] = j


def _simplex_core(T: np.ndarray, basis: list, n_cols: int,
                  max_iter: int) -> str:
    """Minimize with Bland's rule: entering = lowest-index negative reduced
    cost, leaving = lowest-index basic variable among minimal ratios."""
    m = T.shape[0] - 1
    for _ in range(max_iter):
        red = T[m, :n_cols]
        negs = np.nonzero(red < -_PIV_TOL)[0]
        if negs.size == 0:
            return "optimal"
        j = int(negs[0])
        col = T[:m, j]
        pos = np.nonzero(col > _PIV_TOL)[0]
        if pos.size == 0:
            return "unbounded"
        ratios = T[pos, -1] / col[pos]
        rmin = float(np.min(ratios))
        cand = pos[ratios <= rmin + 1e-12]
        i = int(cand[int(np.argmin([basis[r] for r in cand]))])
        _pivot(T, basis, i, j)
    raise SynthError("simplex iteration limit exceeded")


def solve_lp(lp: LPProblem, max_iter: Optional[int] = None) -> LPResult:
    """Dense two-phase simplex.  Small problems only — everything here is."""
    n = lp.n_vars
    # row equilibration: condition rows mix O(1) and O(100) magnitudes, and
    # an unscaled tableau drifts enough over many pivots to misreport
    # feasibility; dividing each row by its largest entry leaves the
    # feasible set untouched
    lp_rows = lp.rows
    lp_rhs = lp.rhs
    if lp_rows.shape[0]:
        rsc = np.maximum(np.max(np.abs(lp_rows), axis=1), 1e-12)
        lp_rows = lp_rows / rsc[:, None]
        lp_rhs = lp_rhs / rsc
    # --- to standard form: min cs.u, A u = b, u >= 0 -----------------------
    col_of: list = []       # per original var: (kind, u-index or (u+, u-))
    shift = np.zeros(n)     # z = sign*u + shift
    sign = np.ones(n)
    extra_rows = []         # upper-bound rows over u
    u_count = 0
    for k in range(n):
        lo, hi = lp.lower[k], lp.upper[k]
        if math.isfinite(lo):
            col_of.append(("single", u_count))
            shift[k], sign[k] = lo, 1.0
            if math.isfinite(hi):
                extra_rows.append((u_count, hi - lo))
            u_count += 1
        elif math.isfinite(hi):
            col_of.append(("single", u_count))
            shift[k], sign[k] = hi, -1.0
            u_count += 1
        else:
            col_of.append(("split", (u_count, u_count + 1)))
            u_count += 2

    m_ineq = lp_rows.shape[0] + len(extra_rows)
    n_slack = m_ineq
    N = u_count + n_slack
    A = np.zeros((m_ineq, N))
    b = np.zeros(m_ineq)
    cs = np.zeros(N)

    def scatter(dst_row, coeff_z):
        """Write z-space coefficients into u-space columns; returns rhs shift."""
        moved = 0.0
        for k in range(n):
            ck = coeff_z[k]
            if ck == 0.0:
                continue
            kind, idx = col_of[k]
            if kind == "single":
                dst_row[idx] += ck * sign[k]
                moved += ck * shift[k]
            else:
                ip, im = idx
                dst_row[ip] += ck
                dst_row[im] -= ck
        return moved

    for r in range(lp_rows.shape[0]):
        moved = scatter(A[r], lp_rows[r])
        b[r] = lp_rhs[r] - moved
        A[r, u_count + r] = 1.0
    for e, (uidx, ub) in enumerate(extra_rows):
        r = lp_rows.shape[0] + e
        A[r, uidx] = 1.0
        b[r] = ub
        A[r, u_count + r] = 1.0

    # objective: maximize lp.c.z  ->  minimize -(lp.c).z
    scatter_obj = np.zeros(N)
    scatter(scatter_obj, -lp.c)
    cs[:] = scatter_obj

    # flip rows with negative rhs (slack coefficient becomes -1)
    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0

    # --- phase 1 ------------------------------------------------------------
    basis = [-1] * m_ineq
    art_cols = []
    for r in range(m_ineq):
        s_col = u_count + r
        if A[r, s_col] > 0:          # slack usable as the initial basic var
            basis[r] = s_col
    n_art = sum(1 for bv in basis if bv < 0)
    if n_art:
        A_ext = np.hstack([A, np.zeros((m_ineq, n_art))])
        a = 0
        for r in range(m_ineq):
            if basis[r] < 0:
                A_ext[r, N + a] = 1.0
                basis[r] = N + a
                art_cols.append(N + a)
                a += 1
        T = np.zeros((m_ineq + 1, N + n_art + 1))
        T[:m_ineq, :-1] = A_ext
        T[:m_ineq, -1] = b
        T[m_ineq, art_cols] = 1.0
        for r in range(m_ineq):
            if basis[r] in art_cols:
                T[m_ineq] -= T[r]
        status = _simplex_core(T, basis, N + n_art,
                               max_iter or (400 * (m_ineq + N) + 2000))
        if status == "unbounded":
            # the phase-1 objective is a sum of nonnegative variables and
            # cannot actually be unbounded below; reaching here means the
            # tableau has degraded numerically, not that the LP is infeasible
            raise SynthError("phase-1 simplex failed numerically")
        if T[m_ineq, -1] < -1e-7:
            return LPResult("infeasible", None, None)
        # drive artificials out of the basis (or drop redundant rows)
        keep = list(range(m_ineq))
        for r in range(m_ineq):
            if basis[r] in art_cols:
                row = T[r, :N]
                nz = np.nonzero(np.abs(row) > _PIV_TOL)[0]
                if nz.size:
                    _pivot(T, basis, r, int(nz[0]))
                else:
                    keep.remove(r)
        rows_idx = keep + [m_ineq]
        T = T[np.ix_(rows_idx, list(range(N)) + [N + n_art])]
        basis = [basis[r] for r in keep]
        m_rows = len(keep)
    else:
        T = np.zeros((m_ineq + 1, N + 1))
        T[:m_ineq, :N] = A
        T[:m_ineq, -1] = b
        m_rows = m_ineq

    # --- phase 2 ------------------------------------------------------------
    T[m_rows, :N] = cs
    T[m_rows, -1] = 0.0
    for r in range(m_rows):
        cb = T[m_rows, basis[r]]
        if cb != 0.0:
            T[m_rows] -= cb * T[r]
    status = _simplex_core(T, basis, N,
                           max_iter or (400 * (m_rows + N) + 2000))
    if status == "unbounded":
        return LPResult("unbounded", None, None)

    u = np.zeros(N)
    for r in range(m_rows):
        u[basis[r]] = T[r, -1]
    z = np.empty(n)
    for k in range(n):
        kind, idx = col_of[k]
        if kind == "single":
            z[k] = shift[k] + sign[k] * u[idx]
        else:
            ip, im = idx
            z[k] = u[ip] - u[im]
    return LPResult("optimal", z, float(np.dot(lp.c, z)))


# ---------------------------------------------------------------------------
# Constraint-row assembly over the synthesis grid
# ---------------------------------------------------------------------------

def _synth_resolution(box: WorkingBox, n: int,
                      resolution: Optional[int]) -> int:
    if resolution is not None:
        return resolution
    return min(box.resolution, 21 if n <= 2 else 9)


def _grid_points(box: WorkingBox, resolution: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, resolution)
            for lo, hi in zip(box.lows, box.highs)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _branch_groups(sys: SystemDef, X: np.ndarray):
    """Yield (pattern, point-index array) covering X, ties duplicated."""
    jb = jacobian(sys)
    if jb.n_guards == 0:
        yield (), np.arange(X.shape[0])
        return
    side, tie = _sides_and_ties(jb, X)
    any_tie = tie.any(axis=1)
    clean = np.nonzero(~any_tie)[0]
    if clean.size:
        patterns, inverse = np.unique(side[clean], axis=0, return_inverse=True)
        for u in range(patterns.shape[0]):
            yield _pattern_tuple(patterns[u]), clean[inverse == u]
    for r in np.nonzero(any_tie)[0]:
        options = [(0, 1) if tie[r, k] else (int(side[r, k]),)
                   for k in range(jb.n_guards)]
        for combo in product(*options):
            yield _pattern_tuple(np.array(combo)), np.array([r])


def _dedupe(rows: np.ndarray, rhs: np.ndarray):
    stacked = np.round(np.column_stack([rows, rhs]), 12)
    uniq = np.unique(stacked, axis=0)
    return uniq[:, :-1], uniq[:, -1]


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------

@dataclass
class SynthResult:
    success: bool
    mode: str
    weights: Optional[Union[np.ndarray, WeightFamily]]
    margin: float                 # certified margin for successes, LP bound otherwise
    lp_status: str
    reason: str = ""
    posthoc: Optional[CertReport] = None
    kamke: Optional[CertReport] = None
    resolution: int = 0

    def to_jsonable(self) -> dict:
        w = self.weights
        if isinstance(w, WeightFamily):
            wj = w.to_jsonable()
        elif w is None:
            wj = None
        else:
            wj = [float(v) for v in w]
        return {"success": self.success,
                "mode": self.mode,
                "weights": wj,
                "margin": self.margin,
                "lp_status": self.lp_status,
                "reason": self.reason,
                "posthoc": self.posthoc.to_jsonable() if self.posthoc else None,
                "resolution": self.resolution}

    def to_json(self) -> str:
        return json.dumps(self.to_jsonable(), sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# Constant weights
# ---------------------------------------------------------------------------

def synth_const(sys: SystemDef, box: Optional[WorkingBox] = None,
                mode: str = "sum", eps: float = DEFAULT_EPS,
                resolution: Optional[int] = None) -> SynthResult:
    """Find a constant positive vector making every column (or row) sum
    strictly negative on the grid.

    Solves max s with v'J(x_g) <= -s (mode "sum") or J(x_g)w <= -s (mode
    "max") over all grid points and tied branches, 1 <= entries <= V_CAP.
    The cap keeps the otherwise scale-free LP bounded; the result is
    rescaled to min(v) = 1 and the margin rescales with it.  Success
    requires a strictly positive margin on the doubled-resolution
    verification grid.
    """
    if mode not in ("sum", "max"):
        raise SynthError(f"mode must be 'sum' or 'max', got {mode!r}")
    if box is None:
        box = WorkingBox.default_for(sys)
    box.validate_for(sys)
    n = sys.n
    res = _synth_resolution(box, n, resolution)
    kamke = check_kamke(sys, box.with_resolution(res))

    X = _grid_points(box, res)
    jb = jacobian(sys)
    row_blocks = []
    for pattern, idx in _branch_groups(sys, X):
        J = jb.branch_matrix(pattern).evaluate_batch(X[idx])   # (m, n, n)
        if mode == "sum":
            cols = np.transpose(J, (0, 2, 1)).reshape(-1, n)   # row g,j = J[:, j]
        else:
            cols = J.reshape(-1, n)                            # row g,i = J[i, :]
        row_blocks.append(cols)
    body = np.concatenate(row_blocks, axis=0)
    rows = np.column_stack([body, np.ones(body.shape[0])])     # + s <= 0
    rows, rhs = _dedupe(rows, np.zeros(rows.shape[0]))

    c = np.zeros(n + 1)
    c[n] = 1.0   # maximize s
    lower = np.concatenate([np.ones(n), [-np.inf]])
    upper = np.concatenate([np.full(n, V_CAP), [np.inf]])
    lp = LPProblem(c=c, rows=rows, rhs=rhs, lower=lower, upper=upper)
    sol = solve_lp(lp)
    assert sol.status != "unbounded", "bounded by construction"
    if sol.status != "optimal":
        if not kamke.passed:
            return SynthResult(False, mode, None, -math.inf, sol.status,
                               reason="system is not monotone on the box "
                                      f"(Kamke witness {kamke.witness['point']})",
                               kamke=kamke, resolution=res)
        return SynthResult(False, mode, None, -math.inf, sol.status,
                           reason="LP infeasible", kamke=kamke, resolution=res)

    v = sol.z[:n]
    s = float(sol.z[n])
    scale = float(np.min(v))
    v = v / scale
    s = s / scale

    if not kamke.passed:
        return SynthResult(False, mode, None, s, sol.status,
                           reason="system is not monotone on the box "
                                  f"(Kamke witness {kamke.witness['point']})",
                           kamke=kamke, resolution=res)
    if s <= 1e-9:
        return SynthResult(False, mode, None, s, sol.status,
                           reason="no constant weights achieve a negative "
                                  f"margin on the grid (best s = {s:.6g})",
                           kamke=kamke, resolution=res)

    fine = box.with_resolution(2 * res - 1)
    eps_post = min(eps, s / 2)
    if mode == "sum":
        post = check_cor1(sys, v, fine, eps=eps_post)
    else:
        post = check_cor2(sys, v, fine, eps=eps_post)
    margin = -post.worst_margin
    if not post.passed or margin <= 0:
        return SynthResult(False, mode, None, margin, sol.status,
                           reason="post-hoc certification failed at doubled "
                                  f"resolution (witness {post.witness['point']})",
                           posthoc=post, kamke=kamke, resolution=res)
    return SynthResult(True, mode, v, margin, sol.status, posthoc=post,
                       kamke=kamke, resolution=res)


# ---------------------------------------------------------------------------
# Polynomial weights
# ---------------------------------------------------------------------------

def synth_poly(sys: SystemDef, box: Optional[WorkingBox] = None,
               degree: int = 2, mode: str = "sum",
               eps: float = DEFAULT_EPS,
               resolution: Optional[int] = None,
               strict_radius: float = math.inf) -> SynthResult:
    """Synthesize univariate polynomial weights of bounded degree.

    Decision variables are the coefficients of theta_i (omega_i for mode
    "max") up to ``degree`` plus the margin s.  At each grid point the
    condition components must be <= -s (within ``strict_radius`` of the
    equilibrium in sup norm; <= 0 beyond it), positivity theta_i >= eps is
    imposed on the axis grids, and the equilibrium components are forced
    <= -eps outright.  Coefficients are capped at +-COEFF_CAP to bound the
    scale-free LP; the result is normalized so the leading coefficient of
    the last non-constant weight equals 1 (skipped with a note when that
    coefficient is negative, since dividing by it would flip positivity).
    """
    if mode not in ("sum", "max"):
        raise SynthError(f"mode must be 'sum' or 'max', got {mode!r}")
    if degree < 0:
        raise SynthError("degree must be nonnegative")
    if sys.equilibrium is None:
        raise SynthError("synthesis needs a declared equilibrium")
    if box is None:
        box = WorkingBox.default_for(sys)
    box.validate_for(sys)
    n = sys.n
    d1 = degree + 1
    res = _synth_resolution(box, n, resolution)
    kamke = check_kamke(sys, box.with_resolution(res))
    xstar = np.asarray(sys.equilibrium, dtype=float)

    n_vars = n * d1 + 1      # coefficients + s
    s_col = n * d1

    def cond_rows(X: np.ndarray, strict: np.ndarray) -> np.ndarray:
        """(m*n, n_vars) rows: condition components <= -s_struct."""
        jb = jacobian(sys)
        out = []
        for pattern, idx in _branch_groups(sys, X):
            Xs = X[idx]
            m = Xs.shape[0]
            J = jb.branch_matrix(pattern).evaluate_batch(Xs)
            F = sys.f_batch(Xs)
            pw = np.stack([Xs ** k for k in range(d1)], axis=2)  # (m, n, d1)
            dpw = np.zeros_like(pw)
            for k in range(1, d1):
                dpw[:, :, k] = k * Xs ** (k - 1)
            block = np.zeros((m, n, n_vars))
            for i in range(n):
                sl = slice(i * d1, (i + 1) * d1)
                if mode == "sum":
                    # component j gets theta_i(x_i) * J[i, j]
                    block[:, :, sl] += J[:, i, :, None] * pw[:, i, None, :]
                    # component i gets theta_i'(x_i) * f_i
                    block[:, i, sl] += dpw[:, i, :] * F[:, i, None]
                else:
                    # component j gets J[j, i] * omega_i(x_i)
                    block[:, :, sl] += J[:, :, i, None] * pw[:, i, None, :]
                    # component i gets -omega_i'(x_i) * f_i
                    block[:, i, sl] -= dpw[:, i, :] * F[:, i, None]
            block[:, :, s_col] = strict[idx, None]
            out.append(block.reshape(m * n, n_vars))
        return np.concatenate(out, axis=0)

    X = _grid_points(box, res)
    strict = (np.max(np.abs(X - xstar), axis=1) <= strict_radius).astype(float)
    rows = [cond_rows(X, strict)]
    rhs = [np.zeros(rows[0].shape[0])]

    # positivity on the axis grids: -theta_i(a) <= -eps
    for i in range(n):
        ax = np.linspace(box.lows[i], box.highs[i], res)
        block = np.zeros((ax.size, n_vars))
        for k in range(d1):
            block[:, i * d1 + k] = -(ax ** k)
        rows.append(block)
        rhs.append(np.full(ax.size, -eps))

    # equilibrium strictness: condition components at x* <= -eps
    eq_rows = cond_rows(xstar[None, :], np.zeros(1))
    rows.append(eq_rows)
    rhs.append(np.full(eq_rows.shape[0], -eps))

    all_rows, all_rhs = _dedupe(np.concatenate(rows, axis=0),
                                np.concatenate(rhs))

    c = np.zeros(n_vars)
    c[s_col] = 1.0
    lower = np.concatenate([np.full(n * d1, -COEFF_CAP), [-np.inf]])
    upper = np.concatenate([np.full(n * d1, COEFF_CAP), [np.inf]])
    lp = LPProblem(c=c, rows=all_rows, rhs=all_rhs, lower=lower, upper=upper)
    sol = solve_lp(lp)
    if sol.status != "optimal":
        # an infeasible LP on a non-monotone system is a symptom, not the
        # cause — report the Kamke failure, matching synth_const
        if not kamke.passed:
            return SynthResult(False, f"poly-{mode}", None, -math.inf,
                               sol.status,
                               reason="system is not monotone on the box "
                                      f"(Kamke witness {kamke.witness['point']})",
                               kamke=kamke, resolution=res)
        return SynthResult(False, f"poly-{mode}", None, -math.inf, sol.status,
                           reason=f"LP {sol.status} at degree {degree}",
                           kamke=kamke, resolution=res)

    coeffs = sol.z[:n * d1].reshape(n, d1)
    s = float(sol.z[s_col])
    note = ""

    # normalize by the leading coefficient of the last non-constant weight
    lead = None
    for i in range(n - 1, -1, -1):
        nz = np.nonzero(np.abs(coeffs[i, 1:]) > 1e-12)[0]
        if nz.size:
            lead = coeffs[i, 1 + nz[-1]]
            break
    if lead is not None:
        if lead > 0:
            coeffs = coeffs / lead
            s = s / lead
        else:
            note = "normalization skipped: leading coefficient negative"
    else:
        # every component constant: normalize like synth_const, min = 1
        scale = float(np.min(coeffs[:, 0]))
        if scale > 0:
            coeffs = coeffs / scale
            s = s / scale

    kind = "theta" if mode == "sum" else "omega"
    fam = WeightFamily(kind, tuple(WeightComponent(tuple(coeffs[i]))
                                   for i in range(n)))

    if not kamke.passed:
        return SynthResult(False, f"poly-{mode}", None, s, sol.status,
                           reason="system is not monotone on the box "
                                  f"(Kamke witness {kamke.witness['point']})",
                           kamke=kamke, resolution=res)
    if s <= 1e-9:
        return SynthResult(False, f"poly-{mode}", None, s, sol.status,
                           reason=f"no degree-{degree} weights achieve a "
                                  f"negative margin on the grid (best s = {s:.6g})",
                           kamke=kamke, resolution=res)

    fine = box.with_resolution(2 * res - 1)
    eps_post = min(eps, s / 2)
    try:
        if mode == "sum":
            post = check_thm1(sys, fam, fine, eps=eps_post)
        else:
            post = check_thm2(sys, fam, fine, eps=eps_post)
    except CertifyError as exc:   # positivity broke between grid points
        return SynthResult(False, f"poly-{mode}", None, s, sol.status,
                           reason=f"post-hoc positivity failure: {exc}",
                           kamke=kamke, resolution=res)
    margin = -post.worst_margin
    if not post.passed or margin <= 0:
        return SynthResult(False, f"poly-{mode}", None, margin, sol.status,
                           reason="post-hoc certification failed at doubled "
                                  f"resolution (witness {post.witness['point']})",
                           posthoc=post, kamke=kamke, resolution=res)
    return SynthResult(True, f"poly-{mode}", fam, margin, sol.status,
                       reason=note, posthoc=post, kamke=kamke, resolution=res)


# ---------------------------------------------------------------------------
# Multivariate polynomial extraction (for the SOS export)
# ---------------------------------------------------------------------------

def _poly_dict(e: Expr, n: int) -> dict:
    """Exponent-tuple -> coefficient for a polynomial expression.

    Division is only allowed by a nonzero constant; anything non-polynomial
    (min/max, transcendentals, time) raises SynthError.
    """
    if isinstance(e, Const):
        return {(0,) * n: e.value} if e.value != 0.0 else {}
    if isinstance(e, Var):
        exp = [0] * n
        exp[e.index] = 1
        return {tuple(exp): 1.0}
    if isinstance(e, Neg):
        return {k: -v for k, v in _poly_dict(e.arg, n).items()}
    if isinstance(e, Add):
        out = dict(_poly_dict(e.a, n))
        for k, v in _poly_dict(e.b, n).items():
            out[k] = out.get(k, 0.0) + v
        return {k: v for k, v in out.items() if v != 0.0}
    if isinstance(e, Sub):
        out = dict(_poly_dict(e.a, n))
        for k, v in _poly_dict(e.b, n).items():
            out[k] = out.get(k, 0.0) - v
        return {k: v for k, v in out.items() if v != 0.0}
    if isinstance(e, Mul):
        pa, pb = _poly_dict(e.a, n), _poly_dict(e.b, n)
        out: dict = {}
        for ka, va in pa.items():
            for kb, vb in pb.items():
                key = tuple(a + b for a, b in zip(ka, kb))
                out[key] = out.get(key, 0.0) + va * vb
        return {k: v for k, v in out.items() if v != 0.0}
    if isinstance(e, Div):
        if isinstance(e.b, Const) and e.b.value != 0.0:
            return {k: v / e.b.value for k, v in _poly_dict(e.a, n).items()}
        raise SynthError("non-polynomial vector field: division")
    if isinstance(e, Pow):
        base = _poly_dict(e.base, n)
        out = {(0,) * n: 1.0}
        for _ in range(e.exponent):
            nxt: dict = {}
            for ka, va in out.items():
                for kb, vb in base.items():
                    key = tuple(a + b for a, b in zip(ka, kb))
                    nxt[key] = nxt.get(key, 0.0) + va * vb
            out = nxt
        return {k: v for k, v in out.items() if v != 0.0}
    if isinstance(e, (Min, Max)):
        raise SynthError("non-polynomial vector field: min/max branches")
    if isinstance(e, TimeVar):
        raise SynthError("non-polynomial vector field: time dependence")
    raise SynthError(f"non-polynomial vector field: {type(e).__name__}")


def _shift_poly(p: dict, axis: int, by: int, scale: float = 1.0) -> dict:
    """Multiply polynomial dict by scale * x_axis^by."""
    out = {}
    for k, v in p.items():
        kk = list(k)
        kk[axis] += by
        out[tuple(kk)] = v * scale
    return out


def _monomials_upto(n: int, deg: int) -> list:
    """All exponent tuples with total degree <= deg, graded lexicographic."""
    out = []
    for total in range(deg + 1):
        level = [k for k in itertools.product(range(total + 1), repeat=n)
                 if sum(k) == total]
        level.sort(reverse=True)   # lex within the grade
        out.extend(level)
    return out


# ---------------------------------------------------------------------------
# SOS feasibility program export (SDPA sparse format)
# ---------------------------------------------------------------------------

def _domain_poly(lo: float, hi: float) -> Optional[list]:
    """Univariate d(x) >= 0 encoding of [lo, hi]; None when unconstrained.

    Ascending coefficients: (x-lo)(hi-x), x-lo, or hi-x for the
    finite/semi-infinite cases.
    """
    lo_f, hi_f = math.isfinite(lo), math.isfinite(hi)
    if lo_f and hi_f:
        return [-lo * hi, lo + hi, -1.0]
    if lo_f:
        return [-lo, 1.0]
    if hi_f:
        return [hi, -1.0]
    return None


def export_sos_sdpa(sys: SystemDef, degree: int = 2,
                    eps: float = DEFAULT_EPS, path="sos.dat-s",
                    mode: str = "sum",
                    multiplier_degree: int = 0) -> dict:
    """Write the SOS feasibility program for polynomial weights as .dat-s.

    For each coordinate: theta_i(x_i) - eps = P_i + S_i d_i with P_i, S_i
    sums of squares and d_i the domain polynomial of the i-th interval
    (dropped when the axis is unconstrained).  For each condition component
    j: -(condition_j)(x) = Q_j + sum_i sigma_ji d_i.  At the equilibrium:
    -(condition_j)(x*) - eps >= 0 via nonnegative slacks.  The unknown
    coefficients enter through a final diagonal block as differences of
    nonnegative entries; all constraints are linear coefficient-matching
    equalities on the block-diagonal PSD variable.

    Returns the sidecar mapping (also written to ``path`` + ".json") needed
    by ``parse_sos_solution``.
    """
    if mode not in ("sum", "max"):
        raise SynthError(f"mode must be 'sum' or 'max', got {mode!r}")
    if degree < 0 or multiplier_degree < 0:
        raise SynthError("degrees must be nonnegative")
    if multiplier_degree % 2:
        raise SynthError("multiplier degree must be even (it is a SOS degree)")
    if sys.equilibrium is None:
        raise SynthError("SOS export needs a declared equilibrium")
    n = sys.n
    d1 = degree + 1
    xstar = np.asarray(sys.equilibrium, dtype=float)

    jb = jacobian(sys)
    if jb.n_guards:
        raise SynthError("non-polynomial vector field: min/max branches")
    J_polys = [[_poly_dict(jb.branch_matrix(())[i, j], n) for j in range(n)]
               for i in range(n)]
    f_polys = [_poly_dict(fi, n) for fi in sys.odes]

    domains = [_domain_poly(b.lo, b.hi) for b in sys.bounds]

    # linear coefficient polynomials: cond_j = sum_{i,k} c_{i,k} * L[j][i][k]
    L = [[[None] * d1 for _ in range(n)] for _ in range(n)]
    for j in range(n):
        for i in range(n):
            for k in range(d1):
                if mode == "sum":
                    p = _shift_poly(J_polys[i][j], i, k)
                    if i == j and k >= 1:
                        extra = _shift_poly(f_polys[j], j, k - 1, float(k))
                        for key, v in extra.items():
                            p[key] = p.get(key, 0.0) + v
                else:
                    p = _shift_poly(J_polys[j][i], i, k)
                    if i == j and k >= 1:
                        extra = _shift_poly(f_polys[j], j, k - 1, -float(k))
                        for key, v in extra.items():
                            p[key] = p.get(key, 0.0) + v
                L[j][i][k] = {key: v for key, v in p.items() if v != 0.0}

    # ---- block layout -----------------------------------------------------
    blocks = []          # (name, size, basis or None)
    g_pos = degree // 2
    pos_basis = list(range(g_pos + 1))
    for i in range(n):
        blocks.append((f"P_{i + 1}", g_pos + 1, pos_basis))
    mult_size = multiplier_degree // 2 + 1
    s_block_of = {}
    for i in range(n):
        if domains[i] is not None:
            s_block_of[i] = len(blocks)
            blocks.append((f"S_{i + 1}", mult_size, list(range(mult_size))))
    q_block_of = {}
    q_basis = {}
    for j in range(n):
        deg_j = 0
        for i in range(n):
            for k in range(d1):
                for key in L[j][i][k]:
                    deg_j = max(deg_j, sum(key))
        for i in range(n):
            if domains[i] is not None:
                deg_j = max(deg_j, multiplier_degree + len(domains[i]) - 1)
        basis = _monomials_upto(n, deg_j // 2)
        q_block_of[j] = len(blocks)
        q_basis[j] = basis
        blocks.append((f"Q_{j + 1}", len(basis), basis))
    sig_block_of = {}
    sig_basis = _monomials_upto(n, multiplier_degree // 2)
    for j in range(n):
        for i in range(n):
            if domains[i] is not None:
                sig_block_of[(j, i)] = len(blocks)
                blocks.append((f"sigma_{j + 1}_{i + 1}", len(sig_basis),
                               sig_basis))
    diag_block = len(blocks)
    diag_size = 2 * n * d1 + n
    blocks.append(("coeffs_and_slacks", diag_size, None))

    def coeff_pos(i: int, k: int):
        base = 2 * (i * d1 + k)
        return base + 1, base + 2          # 1-based plus, minus

    def slack_pos(j: int):
        return 2 * n * d1 + j + 1

    # ---- constraint rows ----------------------------------------------------
    # each row: {(blk, a, b): coeff}, rhs; entries upper-triangular 1-based
    rows: list = []
    rhs: list = []

    def gram_entries(blk: int, basis: list, target: dict,
                     mono_filter=None, conv: Optional[list] = None):
        """Add Gram contributions of block ``blk`` into ``target`` dict of
        rows keyed by monomial.  ``conv`` convolves with a univariate domain
        poly on axis ``conv[0]`` with coefficients conv[1]."""
        size = len(basis)
        for a in range(size):
            for b in range(a, size):
                if isinstance(basis[a], tuple):
                    mono = tuple(x + y for x, y in zip(basis[a], basis[b]))
                else:
                    mono = basis[a] + basis[b]
                if conv is None:
                    target.setdefault(mono, {})[(blk, a + 1, b + 1)] = 1.0
                else:
                    axis, dcoef = conv
                    for t, dv in enumerate(dcoef):
                        if dv == 0.0:
                            continue
                        if isinstance(mono, tuple):
                            mm = list(mono)
                            mm[axis] += t
                            key = tuple(mm)
                        else:
                            key = mono + t
                        ent = target.setdefault(key, {})
                        ent[(blk, a + 1, b + 1)] = ent.get((blk, a + 1, b + 1),
                                                           0.0) + dv

    # positivity constraints, one per coordinate (univariate, monomial = power)
    for i in range(n):
        per_mono: dict = {}
        gram_entries(i, pos_basis, per_mono)
        if domains[i] is not None:
            gram_entries(s_block_of[i], list(range(mult_size)), per_mono,
                         conv=(None, domains[i]))
        powers = sorted(set(list(per_mono.keys()) + list(range(d1))))
        for m in powers:
            ent = dict(per_mono.get(m, {}))
            if m < d1:
                p, q = coeff_pos(i, m)
                ent[(diag_block, p, p)] = ent.get((diag_block, p, p), 0.0) - 1.0
                ent[(diag_block, q, q)] = ent.get((diag_block, q, q), 0.0) + 1.0
            rows.append(ent)
            rhs.append(-eps if m == 0 else 0.0)

    # condition constraints, one per component (multivariate)
    for j in range(n):
        per_mono: dict = {}
        gram_entries(q_block_of[j], q_basis[j], per_mono)
        for i in range(n):
            if domains[i] is not None:
                gram_entries(sig_block_of[(j, i)], sig_basis, per_mono,
                             conv=(i, domains[i]))
        monos = set(per_mono.keys())
        for i in range(n):
            for k in range(d1):
                monos.update(L[j][i][k].keys())
        for mono in sorted(monos, key=lambda m: (sum(m), tuple(-e for e in m))):
            ent = dict(per_mono.get(mono, {}))
            for i in range(n):
                for k in range(d1):
                    lv = L[j][i][k].get(mono, 0.0)
                    if lv != 0.0:
                        p, q = coeff_pos(i, k)
                        ent[(diag_block, p, p)] = ent.get((diag_block, p, p),
                                                          0.0) + lv
                        ent[(diag_block, q, q)] = ent.get((diag_block, q, q),
                                                          0.0) - lv
            if not ent:
                continue
            rows.append(ent)
            rhs.append(0.0)

    # equilibrium strictness rows: -cond_j(x*) - slack_j = eps
    for j in range(n):
        ent = {}
        for i in range(n):
            for k in range(d1):
                val = 0.0
                for mono, cv in L[j][i][k].items():
                    val += cv * float(np.prod(xstar ** np.asarray(mono)))
                if val != 0.0:
                    p, q = coeff_pos(i, k)
                    ent[(diag_block, p, p)] = ent.get((diag_block, p, p),
                                                      0.0) - val
                    ent[(diag_block, q, q)] = ent.get((diag_block, q, q),
                                                      0.0) + val
        sp = slack_pos(j)
        ent[(diag_block, sp, sp)] = -1.0
        rows.append(ent)
        rhs.append(eps)

    # ---- write .dat-s -------------------------------------------------------
    m_total = len(rows)
    lines = [f"{m_total}", f"{len(blocks)}"]
    sizes = []
    for name, size, _ in blocks:
        sizes.append(str(-size) if name == "coeffs_and_slacks" else str(size))
    lines.append(" ".join(sizes))
    lines.append(" ".join(f"{v:.12g}" for v in rhs))
    for r, ent in enumerate(rows, start=1):
        for (blk, a, b), v in sorted(ent.items()):
            lines.append(f"{r} {blk + 1} {a} {b} {v:.12g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")

    sidecar = {
        "kind": "theta" if mode == "sum" else "omega",
        "mode": mode,
        "degree": degree,
        "multiplier_degree": multiplier_degree,
        "epsilon": eps,
        "n": n,
        "monomial_order": "grlex",
        "blocks": [{"name": name, "index": bi + 1, "size": size,
                    "basis": ([list(b) if isinstance(b, tuple) else b
                               for b in basis] if basis is not None else None)}
                   for bi, (name, size, basis) in enumerate(blocks)],
        "diag_block": diag_block + 1,
        "coefficients": {
            f"c_{i + 1}_{k}": {"plus": coeff_pos(i, k)[0],
                               "minus": coeff_pos(i, k)[1]}
            for i in range(n) for k in range(d1)},
        "slacks": [slack_pos(j) for j in range(n)],
        "bounds": [[b.lo, b.hi] for b in sys.bounds],
        "n_constraints": m_total,
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return sidecar


# ---------------------------------------------------------------------------
# Reading an external solver's output back
# ---------------------------------------------------------------------------

def _parse_sdpa_blocks(text: str) -> list:
    """Parse "{ blk, blk, ... }" into arrays.

    Flat blocks ("{1, 2}") become 1-D arrays; nested blocks (matrices
    printed row-wise, "{{1,2},{2,3}}") become 2-D arrays.
    """
    depth = 0
    start = None
    spans = []
    closed = False
    for i, ch in enumerate(text):
        if ch == "{":
            depth += 1
            if depth == 2 and start is None:
                start = i
        elif ch == "}":
            if depth == 2 and start is not None:
                spans.append(text[start:i + 1])
                start = None
            depth -= 1
            if depth == 0:
                closed = True
                break
    if not closed:
        raise SynthError("malformed solver output: unbalanced braces in yMat")
    out = []
    for btxt in spans:
        try:
            if "{" in btxt[1:-1]:
                out.append(np.vstack(_parse_sdpa_blocks(btxt)))
            else:
                vals = btxt.strip("{} \n\t").replace(",", " ").split()
                out.append(np.array([float(v) for v in vals]))
        except ValueError as exc:
            raise SynthError(f"malformed solver output: {exc}")
    return out


def parse_sos_solution(sidecar, solver_output) -> WeightFamily:
    """Reconstruct the weight family from an SDPA solver's output file.

    ``sidecar`` is the mapping written by ``export_sos_sdpa`` (path or
    dict); ``solver_output`` is the solver's result file containing a
    ``yMat`` section.  The recovered weights are checked for strict
    positivity on the (finite parts of the) declared bounds.
    """
    if not isinstance(sidecar, dict):
        with open(sidecar) as fh:
            sidecar = json.load(fh)
    text = solver_output
    try:
        with open(solver_output) as fh:
            text = fh.read()
    except (TypeError, OSError):
        if not isinstance(solver_output, str):
            raise SynthError("solver output must be a path or text")

    marker = text.find("yMat")
    if marker < 0:
        raise SynthError("malformed solver output: no yMat section")
    brace = text.find("{", marker)
    if brace < 0:
        raise SynthError("malformed solver output: no yMat block")
    blocks = _parse_sdpa_blocks(text[brace:])
    if len(blocks) != len(sidecar["blocks"]):
        raise SynthError(
            f"malformed solver output: expected {len(sidecar['blocks'])} "
            f"yMat blocks, found {len(blocks)}")

    diag = blocks[sidecar["diag_block"] - 1]
    if diag.ndim == 2:          # solvers may print the diagonal block densely
        diag = np.diag(diag)
    n = sidecar["n"]
    degree = sidecar["degree"]
    comps = []
    for i in range(n):
        coeffs = []
        for k in range(degree + 1):
            spec_entry = sidecar["coefficients"][f"c_{i + 1}_{k}"]
            try:
                c = float(diag[spec_entry["plus"] - 1] -
                          diag[spec_entry["minus"] - 1])
            except IndexError:
                raise SynthError("malformed solver output: diagonal block "
                                 "shorter than the coefficient layout")
            coeffs.append(c)
        comps.append(WeightComponent(tuple(coeffs)))
    fam = WeightFamily(sidecar["kind"], tuple(comps))

    # positivity diagnosis on the finite parts of the declared bounds
    for i, (lo, hi) in enumerate(sidecar["bounds"]):
        a = lo if math.isfinite(lo) else (hi - 10.0 if math.isfinite(hi) else -10.0)
        b = hi if math.isfinite(hi) else (lo + 10.0 if math.isfinite(lo) else 10.0)
        samples = np.linspace(a, b, 101)
        vals = fam.components[i].value(samples)
        if np.min(vals) <= 0:
            bad = samples[int(np.argmin(vals))]
            raise SynthError(
                f"recovered weights violate positivity: component {i + 1} "
                f"reaches {np.min(vals):.6g} at x={bad:.6g}")
    return fam
