"""Sampled certification of monotonicity/contraction conditions on a box.

Every check here evaluates a "quantity required <= 0" on a finite grid over
a working box and reports the worst (largest) value found, together with the
grid point witnessing it.  Conditions that additionally demand strictness at
the equilibrium report that margin separately.  Verification is sampling:
a pass means "verified on box B at resolution h", nothing stronger.

The checks:

* ``check_kamke``  — off-diagonal Jacobian entries >= 0 (Metzler everywhere),
  the infinitesimal characterization of monotonicity.
* ``check_thm1``   — sum-type weights: every component of
  theta(x)^T J(x) + thetadot(x)^T is <= 0 on the grid and <= -eps at x*.
* ``check_thm2``   — max-type weights: every component of
  J(x) omega(x) - omegadot(x) is <= 0 on the grid and <= -eps at x*.
* ``check_cor1``   — constant vector v > 0: v^T J(x) <= 0, strict at x*;
  with ``global_flag`` additionally v^T J(x) <= -eps everywhere (which is
  what upgrades the flow-type Lyapunov function to a global one).
* ``check_cor2``   — row analogue with a constant w > 0.
* ``check_cor3``   — mu_norm of the weighted Jacobian <= 0 on the grid and
  <= -eps at x*.

Piecewise (min/max) vector fields are handled branch-wise: at each grid
point the active branch's Jacobian is used, and wherever branch guards tie
(within the relative tie tolerance) every tied branch must satisfy the
condition — the reported value is the worst across tied branches.

Grid evaluation is chunked and may run on a small thread pool
(``MONOCERT_THREADS``, default 1); the reduction is deterministic — worst
margin, ties broken by the lexicographically smallest grid index.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .measures import WeightFamily, mu1, mu_inf
from .sysdsl import SystemDef, jacobian, JacobianBranches, TIE_TOL

__all__ = [
    "WorkingBox", "CertReport", "CertifyError",
    "check_kamke", "check_thm1", "check_thm2",
    "check_cor1", "check_cor2", "check_cor3",
    "certify_all", "grid_condition_values", "grid_mu_values",
    "ZERO_TOL", "DEFAULT_EPS", "DEFAULT_RESOLUTION",
]

ZERO_TOL = 1e-9        # strictness tolerance for the "<= 0" comparisons
DEFAULT_EPS = 0.01     # default equilibrium-strictness margin
DEFAULT_RESOLUTION = 41
_CHUNK = 65536         # max grid points evaluated per batch


class CertifyError(ValueError):
    """Invalid certification request (bad box, bad weights, missing x*)."""


# ---------------------------------------------------------------------------
# Working box
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WorkingBox:
    """A finite rectangle with a uniform per-axis grid resolution."""
    lows: tuple
    highs: tuple
    resolution: int = DEFAULT_RESOLUTION

    def __post_init__(self):
        lows = tuple(float(v) for v in self.lows)
        highs = tuple(float(v) for v in self.highs)
        object.__setattr__(self, "lows", lows)
        object.__setattr__(self, "highs", highs)
        if len(lows) != len(highs):
            raise CertifyError("box lows/highs length mismatch")
        for lo, hi in zip(lows, highs):
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise CertifyError("working box must be finite")
            if not lo < hi:
                raise CertifyError(f"empty box axis [{lo}, {hi}]")
        if self.resolution < 2:
            raise CertifyError("resolution must be at least 2")

    @property
    def n(self) -> int:
        return len(self.lows)

    @property
    def n_points(self) -> int:
        return self.resolution ** self.n

    def axes(self) -> list:
        return [np.linspace(lo, hi, self.resolution)
                for lo, hi in zip(self.lows, self.highs)]

    def refined(self) -> "WorkingBox":
        """Doubled resolution; 2r-1 points per axis keep the grid a superset."""
        return WorkingBox(self.lows, self.highs, 2 * self.resolution - 1)

    def with_resolution(self, resolution: int) -> "WorkingBox":
        return WorkingBox(self.lows, self.highs, resolution)

    def contains(self, x: Sequence[float], tol: float = 1e-12) -> bool:
        return all(lo - tol <= float(v) <= hi + tol
                   for lo, hi, v in zip(self.lows, self.highs, x))

    def validate_for(self, sys: SystemDef) -> None:
        if self.n != sys.n:
            raise CertifyError(f"box dimension {self.n} != system dimension {sys.n}")
        for b, lo, hi, name in zip(sys.bounds, self.lows, self.highs,
                                   sys.state_names):
            if not (b.contains(lo, tol=1e-12) and b.contains(hi, tol=1e-12)):
                raise CertifyError(
                    f"box axis [{lo}, {hi}] for {name} is not inside the "
                    f"declared domain {b}")
        if sys.equilibrium is not None and not self.contains(sys.equilibrium):
            raise CertifyError("working box does not contain the equilibrium")

    @staticmethod
    def default_for(sys: SystemDef, resolution: int = DEFAULT_RESOLUTION) -> "WorkingBox":
        """The system's own bounds, when finite — never a silent truncation."""
        for b, name in zip(sys.bounds, sys.state_names):
            if math.isinf(b.lo) or math.isinf(b.hi):
                raise CertifyError(
                    f"state {name} has an unbounded domain {b}: an explicit "
                    "finite working box is required")
        box = WorkingBox(tuple(b.lo for b in sys.bounds),
                         tuple(b.hi for b in sys.bounds), resolution)
        box.validate_for(sys)
        return box

    @staticmethod
    def from_string(text: str, resolution: int = DEFAULT_RESOLUTION) -> "WorkingBox":
        """Parse "lo:hi,lo:hi,..." into a box."""
        lows, highs = [], []
        for part in text.split(","):
            pieces = part.split(":")
            if len(pieces) != 2:
                raise CertifyError(f"bad box axis {part!r} (want lo:hi)")
            lows.append(float(pieces[0]))
            highs.append(float(pieces[1]))
        return WorkingBox(tuple(lows), tuple(highs), resolution)

    def to_jsonable(self) -> list:
        return [[lo, hi] for lo, hi in zip(self.lows, self.highs)]


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class CertReport:
    """Outcome of one sampled check."""
    condition: str
    verdict: str                 # pass | fail | pass-with-margin
    worst_margin: float
    witness: dict                # {"point": [...], "component": ..., "value": ...}
    box: WorkingBox
    eps: float
    branch_ties: int
    equilibrium_margin: Optional[float] = None
    positivity: Optional[dict] = None
    notes: str = ""

    @property
    def passed(self) -> bool:
        return self.verdict != "fail"

    def to_jsonable(self) -> dict:
        return {
            "condition": self.condition,
            "verdict": self.verdict,
            "worst_margin": self.worst_margin,
            "witness": self.witness,
            "box": self.box.to_jsonable(),
            "resolution": self.box.resolution,
            "eps": self.eps,
            "branch_ties": self.branch_ties,
            "equilibrium_margin": self.equilibrium_margin,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_jsonable(), sort_keys=True, indent=2)

    def summary_line(self) -> str:
        eq = ("" if self.equilibrium_margin is None
              else f"  eq margin {self.equilibrium_margin:+.6g}")
        return (f"{self.condition:<12} {self.verdict:<16} "
                f"worst margin {self.worst_margin:+.6g}{eq}")


# ---------------------------------------------------------------------------
# Grid engine
# ---------------------------------------------------------------------------

def _thread_count() -> int:
    raw = os.environ.get("MONOCERT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _iter_chunks(axes: list):
    """Yield (flat_start, X) chunks of the full grid in C (lexicographic) order."""
    shape = tuple(len(a) for a in axes)
    total = int(np.prod(shape))
    for start in range(0, total, _CHUNK):
        stop = min(start + _CHUNK, total)
        flat = np.arange(start, stop)
        multi = np.unravel_index(flat, shape)
        X = np.stack([axes[d][multi[d]] for d in range(len(axes))], axis=1)
        yield start, X


def _sides_and_ties(jb: JacobianBranches, X: np.ndarray):
    """Strict branch side (0=left, 1=right) and tie mask per guard."""
    diffs, scales = jb.guard_values(X)
    tie = np.abs(diffs) <= TIE_TOL * scales
    side = np.empty(diffs.shape, dtype=np.int8)
    for k, g in enumerate(jb.guards):
        if g.is_min:
            side[:, k] = (diffs[:, k] >= 0).astype(np.int8)
        else:
            side[:, k] = (diffs[:, k] <= 0).astype(np.int8)
    return side, tie


_SIDE_NAMES = ("left", "right")


def _pattern_tuple(row: np.ndarray) -> tuple:
    return tuple(_SIDE_NAMES[s] for s in row)


def _chunk_worst(jb: JacobianBranches, X: np.ndarray,
                 evaluator: Callable) -> tuple:
    """Per-point worst condition value and component over active/tied branches.

    Returns (vals (m,), comps (m,), tie_mask (m,)).
    """
    m = X.shape[0]
    if jb.n_guards == 0:
        vals, comps = evaluator(X, ())
        return vals, comps, np.zeros(m, dtype=bool)

    side, tie = _sides_and_ties(jb, X)
    any_tie = tie.any(axis=1)
    vals = np.full(m, -np.inf)
    comps = np.zeros(m, dtype=np.int64)

    clean = np.nonzero(~any_tie)[0]
    if clean.size:
        patterns, inverse = np.unique(side[clean], axis=0, return_inverse=True)
        for u in range(patterns.shape[0]):
            rows = clean[inverse == u]
            v, c = evaluator(X[rows], _pattern_tuple(patterns[u]))
            vals[rows] = v
            comps[rows] = c

    for r in np.nonzero(any_tie)[0]:
        options = [(0, 1) if tie[r, k] else (int(side[r, k]),)
                   for k in range(jb.n_guards)]
        best_v, best_c = -np.inf, 0
        for combo in product(*options):
            v, c = evaluator(X[r:r + 1], _pattern_tuple(np.array(combo)))
            if v[0] > best_v:
                best_v, best_c = float(v[0]), int(c[0])
        vals[r] = best_v
        comps[r] = best_c

    return vals, comps, any_tie


def _scan_grid(sys: SystemDef, box: WorkingBox,
               evaluator: Callable) -> tuple:
    """Worst value over the whole grid.

    Returns (worst, witness_point, witness_comp, n_ties).  Deterministic:
    the witness is the first (lexicographically smallest) flat grid index
    attaining the worst value, regardless of thread count.
    """
    jb = jacobian(sys)
    axes = box.axes()
    chunks = list(_iter_chunks(axes))

    def work(item):
        start, X = item
        vals, comps, ties = _chunk_worst(jb, X, evaluator)
        return start, X, vals, comps, int(ties.sum())

    workers = _thread_count()
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(c) for c in chunks]

    worst = -np.inf
    worst_idx = -1
    worst_point: Optional[np.ndarray] = None
    worst_comp = 0
    n_ties = 0
    for start, X, vals, comps, ties in results:
        n_ties += ties
        k = int(np.argmax(vals))
        v = float(vals[k])
        # worst_idx < 0 seeds the tracker: even an all--inf grid (vacuous
        # conditions) must still produce a witness point
        if worst_idx < 0 or v > worst or (v == worst and start + k < worst_idx):
            worst = v
            worst_idx = start + k
            worst_point = X[k]
            worst_comp = int(comps[k])
    return worst, worst_point, worst_comp, n_ties


def _eval_at_point(sys: SystemDef, x: Sequence[float],
                   evaluator: Callable) -> float:
    """Worst condition value at a single point over all tied branches."""
    jb = jacobian(sys)
    X = np.asarray([list(map(float, x))])
    vals, _, _ = _chunk_worst(jb, X, evaluator)
    return float(vals[0])


# ---------------------------------------------------------------------------
# Condition evaluators
# ---------------------------------------------------------------------------

def _family_axis_values(fam: WeightFamily, X: np.ndarray,
                        deriv: bool = False) -> np.ndarray:
    out = np.empty_like(X)
    for i, comp in enumerate(fam.components):
        out[:, i] = comp.deriv(X[:, i]) if deriv else comp.value(X[:, i])
    return out


def _make_kamke_eval(sys: SystemDef):
    jb = jacobian(sys)
    n = sys.n

    def ev(X, pattern):
        J = jb.branch_matrix(pattern).evaluate_batch(X)
        off = -J.reshape(X.shape[0], n * n)
        # diagonal entries carry no Metzler constraint; mask them out
        diag_cols = [i * n + i for i in range(n)]
        off[:, diag_cols] = -np.inf
        comps = np.argmax(off, axis=1)
        vals = off[np.arange(X.shape[0]), comps]
        if n == 1:  # scalar system: vacuously Metzler
            vals = np.full(X.shape[0], -np.inf)
            comps = np.zeros(X.shape[0], dtype=np.int64)
        return vals, comps

    return ev


def _make_sum_eval(sys: SystemDef, fam: WeightFamily):
    jb = jacobian(sys)

    def ev(X, pattern):
        J = jb.branch_matrix(pattern).evaluate_batch(X)
        f = sys.f_batch(X)
        th = _family_axis_values(fam, X)
        dth = _family_axis_values(fam, X, deriv=True)
        cond = np.einsum("mi,mij->mj", th, J) + dth * f
        comps = np.argmax(cond, axis=1)
        vals = cond[np.arange(X.shape[0]), comps]
        return vals, comps

    return ev


def _make_max_eval(sys: SystemDef, fam: WeightFamily):
    jb = jacobian(sys)

    def ev(X, pattern):
        J = jb.branch_matrix(pattern).evaluate_batch(X)
        f = sys.f_batch(X)
        w = _family_axis_values(fam, X)
        dw = _family_axis_values(fam, X, deriv=True)
        cond = np.einsum("mij,mj->mi", J, w) - dw * f
        comps = np.argmax(cond, axis=1)
        vals = cond[np.arange(X.shape[0]), comps]
        return vals, comps

    return ev


def _make_mu_eval(sys: SystemDef, fam: WeightFamily, norm: str):
    jb = jacobian(sys)

    def ev(X, pattern):
        J = jb.branch_matrix(pattern).evaluate_batch(X)
        f = sys.f_batch(X)
        th = _family_axis_values(fam, X)
        dth = _family_axis_values(fam, X, deriv=True)
        if fam.kind == "omega":
            dth = -dth / (th * th)
            th = 1.0 / th
        Jt = (th[:, :, None] / th[:, None, :]) * J
        idx = np.arange(sys.n)
        Jt[:, idx, idx] += dth * f / th
        d = Jt[:, idx, idx]
        if norm == "l1":
            q = np.sum(np.abs(Jt), axis=1) - np.abs(d) + d  # per column
        else:
            q = np.sum(np.abs(Jt), axis=2) - np.abs(d) + d  # per row
        comps = np.argmax(q, axis=1)
        vals = q[np.arange(X.shape[0]), comps]
        return vals, comps

    return ev


# ---------------------------------------------------------------------------
# Shared check plumbing
# ---------------------------------------------------------------------------

def _as_family(weights, kind: str) -> WeightFamily:
    if isinstance(weights, WeightFamily):
        if weights.kind != kind:
            raise CertifyError(f"expected a {kind!r} family, got {weights.kind!r}")
        return weights
    vec = np.asarray(weights, dtype=float)
    if vec.ndim != 1:
        raise CertifyError("constant weights must be a flat vector")
    return WeightFamily.constant(kind, vec)


def _positivity_check(fam: WeightFamily, box: WorkingBox) -> dict:
    """Verify the family's sign condition on the box's axis grids.

    theta kind needs theta_i >= c > 0; omega kind needs 0 < omega_i <= c.
    Violations are errors (the checks' hypotheses are simply absent), not
    fail verdicts.
    """
    axes = box.axes()
    lo = math.inf
    hi = -math.inf
    for i, comp in enumerate(fam.components):
        vals = np.asarray(comp.value(axes[i]), dtype=float)
        lo = min(lo, float(np.min(vals)))
        hi = max(hi, float(np.max(vals)))
    if lo <= 1e-12:
        raise CertifyError(
            f"{fam.kind} positivity violated on the box: min value {lo:.3e}")
    # c is the uniform bound the conditions quantify over: a lower bound
    # for theta, an upper bound for omega
    c = lo if fam.kind == "theta" else hi
    return {"min": lo, "max": hi, "c": c}


def _require_equilibrium(sys: SystemDef) -> tuple:
    if sys.equilibrium is None:
        raise CertifyError("this check needs a declared equilibrium")
    return sys.equilibrium


def _finish(condition: str, sys: SystemDef, box: WorkingBox, eps: float,
            evaluator, needs_eq: bool, uniform: bool = False,
            positivity: Optional[dict] = None,
            component_decoder=None, notes: str = "") -> CertReport:
    box.validate_for(sys)
    worst, point, comp, ties = _scan_grid(sys, box, evaluator)
    eq_margin = None
    if needs_eq:
        xstar = _require_equilibrium(sys)
        eq_margin = _eval_at_point(sys, xstar, evaluator)

    failed = worst > ZERO_TOL
    if needs_eq and eq_margin is not None and not eq_margin <= -eps:
        failed = True
    if uniform and not worst <= -eps:
        failed = True
    if failed:
        verdict = "fail"
    elif worst <= -eps:
        verdict = "pass-with-margin"
    else:
        verdict = "pass"

    decoded = component_decoder(comp) if component_decoder else comp
    witness = {
        "point": [float(v) for v in point],
        "component": decoded,
        "value": worst,
    }
    return CertReport(condition=condition, verdict=verdict, worst_margin=worst,
                      witness=witness, box=box, eps=eps, branch_ties=ties,
                      equilibrium_margin=eq_margin, positivity=positivity,
                      notes=notes)


# ---------------------------------------------------------------------------
# Public checks
# ---------------------------------------------------------------------------

def check_kamke(sys: SystemDef, box: Optional[WorkingBox] = None) -> CertReport:
    """Monotonicity: the Jacobian is Metzler at every grid point/tied branch."""
    if box is None:
        box = WorkingBox.default_for(sys)
    n = sys.n

    def decode(c):
        return [int(c) // n, int(c) % n]

    return _finish("kamke", sys, box, DEFAULT_EPS, _make_kamke_eval(sys),
                   needs_eq=False, component_decoder=decode)


def check_thm1(sys: SystemDef, theta: WeightFamily,
               box: Optional[WorkingBox] = None,
               eps: float = DEFAULT_EPS) -> CertReport:
    """Sum-type certificate: theta^T J + thetadot^T <= 0, strict at x*."""
    if box is None:
        box = WorkingBox.default_for(sys)
    fam = _as_family(theta, "theta")
    if fam.n != sys.n:
        raise CertifyError("weight dimension mismatch")
    pos = _positivity_check(fam, box)
    _require_equilibrium(sys)
    return _finish("thm1", sys, box, eps, _make_sum_eval(sys, fam),
                   needs_eq=True, positivity=pos)


def check_thm2(sys: SystemDef, omega: WeightFamily,
               box: Optional[WorkingBox] = None,
               eps: float = DEFAULT_EPS) -> CertReport:
    """Max-type certificate: J omega - omegadot <= 0, strict at x*."""
    if box is None:
        box = WorkingBox.default_for(sys)
    fam = _as_family(omega, "omega")
    if fam.n != sys.n:
        raise CertifyError("weight dimension mismatch")
    pos = _positivity_check(fam, box)
    _require_equilibrium(sys)
    return _finish("thm2", sys, box, eps, _make_max_eval(sys, fam),
                   needs_eq=True, positivity=pos)


def check_cor1(sys: SystemDef, v: Sequence[float],
               box: Optional[WorkingBox] = None, eps: float = DEFAULT_EPS,
               global_flag: bool = False) -> CertReport:
    """Constant-vector column certificate v^T J <= 0, strict at x*.

    ``global_flag`` demands v^T J <= -eps uniformly on the box, the
    sufficient condition for the flow-type Lyapunov function to be global.
    """
    if box is None:
        box = WorkingBox.default_for(sys)
    vec = np.asarray(v, dtype=float)
    if vec.shape != (sys.n,):
        raise CertifyError("v has the wrong dimension")
    if not np.all(vec > 0):
        raise CertifyError("v must be strictly positive")
    fam = WeightFamily.constant("theta", vec)
    _require_equilibrium(sys)
    cond = "cor1-global" if global_flag else "cor1"
    return _finish(cond, sys, box, eps, _make_sum_eval(sys, fam),
                   needs_eq=True, uniform=global_flag,
                   positivity={"min": float(np.min(vec)),
                               "max": float(np.max(vec)),
                               "c": float(np.min(vec))})


def check_cor2(sys: SystemDef, w: Sequence[float],
               box: Optional[WorkingBox] = None, eps: float = DEFAULT_EPS,
               global_flag: bool = False) -> CertReport:
    """Constant-vector row certificate J w <= 0, strict at x*."""
    if box is None:
        box = WorkingBox.default_for(sys)
    vec = np.asarray(w, dtype=float)
    if vec.shape != (sys.n,):
        raise CertifyError("w has the wrong dimension")
    if not np.all(vec > 0):
        raise CertifyError("w must be strictly positive")
    fam = WeightFamily.constant("omega", vec)
    _require_equilibrium(sys)
    cond = "cor2-global" if global_flag else "cor2"
    return _finish(cond, sys, box, eps, _make_max_eval(sys, fam),
                   needs_eq=True, uniform=global_flag,
                   positivity={"min": float(np.min(vec)),
                               "max": float(np.max(vec)),
                               "c": float(np.max(vec))})


def check_cor3(sys: SystemDef, w: WeightFamily, norm: str = "l1",
               box: Optional[WorkingBox] = None,
               eps: float = DEFAULT_EPS) -> CertReport:
    """Weighted-Jacobian measure certificate: mu(Jtilde) <= 0, strict at x*."""
    if box is None:
        box = WorkingBox.default_for(sys)
    if norm not in ("l1", "linf"):
        raise CertifyError(f"norm must be 'l1' or 'linf', got {norm!r}")
    fam = w if isinstance(w, WeightFamily) else WeightFamily.constant(
        "theta" if norm == "l1" else "omega", w)
    if fam.n != sys.n:
        raise CertifyError("weight dimension mismatch")
    pos = _positivity_check(fam, box)
    _require_equilibrium(sys)
    return _finish(f"cor3-{norm}", sys, box, eps,
                   _make_mu_eval(sys, fam, norm), needs_eq=True,
                   positivity=pos)


def certify_all(sys: SystemDef,
                weights: Union[None, WeightFamily, Sequence[WeightFamily]] = None,
                box: Optional[WorkingBox] = None,
                eps: float = DEFAULT_EPS) -> list:
    """Kamke check plus every weight-dependent check the weights support.

    A theta family runs the sum-type check and the l1 measure check (plus
    the constant-vector column check when it is constant); an omega family
    runs the max-type and linf analogues.  Checks are independent — a Kamke
    failure does not suppress the weight checks.
    """
    if box is None:
        box = WorkingBox.default_for(sys)
    reports = [check_kamke(sys, box)]
    if weights is None:
        fams = []
    elif isinstance(weights, WeightFamily):
        fams = [weights]
    else:
        fams = list(weights)

    multi = len(fams) > 1

    def tag(rep: CertReport, k: int) -> CertReport:
        if multi:
            rep.condition = f"{rep.condition}#{k + 1}"
        return rep

    for k, fam in enumerate(fams):
        if fam.kind == "theta":
            reports.append(tag(check_thm1(sys, fam, box, eps), k))
            if fam.is_constant:
                reports.append(tag(check_cor1(sys, fam.constants(), box, eps), k))
            reports.append(tag(check_cor3(sys, fam, "l1", box, eps), k))
        else:
            reports.append(tag(check_thm2(sys, fam, box, eps), k))
            if fam.is_constant:
                reports.append(tag(check_cor2(sys, fam.constants(), box, eps), k))
            reports.append(tag(check_cor3(sys, fam, "linf", box, eps), k))
    return reports


# ---------------------------------------------------------------------------
# Raw condition values (for golden-value tests and cross-check properties)
# ---------------------------------------------------------------------------

def grid_condition_values(sys: SystemDef, weights, box: WorkingBox,
                          which: str) -> np.ndarray:
    """The full (n_points, n) array of condition components over the grid.

    ``which``: 'sum' for the theta^T J + thetadot^T rows, 'max' for
    J omega - omegadot.  Branch ties take the componentwise worst across
    tied branches.  Points are in lexicographic grid order.
    """
    if which == "sum":
        fam = _as_family(weights, "theta")
    elif which == "max":
        fam = _as_family(weights, "omega")
    else:
        raise CertifyError("which must be 'sum' or 'max'")
    jb = jacobian(sys)

    def full_eval(X, pattern):
        J = jb.branch_matrix(pattern).evaluate_batch(X)
        f = sys.f_batch(X)
        vals = _family_axis_values(fam, X)
        dvals = _family_axis_values(fam, X, deriv=True)
        if which == "sum":
            return np.einsum("mi,mij->mj", vals, J) + dvals * f
        return np.einsum("mij,mj->mi", J, vals) - dvals * f

    out = []
    for _, X in _iter_chunks(box.axes()):
        m = X.shape[0]
        if jb.n_guards == 0:
            out.append(full_eval(X, ()))
            continue
        side, tie = _sides_and_ties(jb, X)
        any_tie = tie.any(axis=1)
        vals = np.full((m, sys.n), -np.inf)
        clean = np.nonzero(~any_tie)[0]
        if clean.size:
            patterns, inverse = np.unique(side[clean], axis=0,
                                          return_inverse=True)
            for u in range(patterns.shape[0]):
                rows = clean[inverse == u]
                vals[rows] = full_eval(X[rows], _pattern_tuple(patterns[u]))
        for r in np.nonzero(any_tie)[0]:
            options = [(0, 1) if tie[r, k] else (int(side[r, k]),)
                       for k in range(jb.n_guards)]
            acc = np.full((1, sys.n), -np.inf)
            for combo in product(*options):
                acc = np.maximum(acc, full_eval(X[r:r + 1],
                                                _pattern_tuple(np.array(combo))))
            vals[r] = acc[0]
        out.append(vals)
    return np.concatenate(out, axis=0)


def grid_mu_values(sys: SystemDef, weights, box: WorkingBox,
                   norm: str = "l1") -> np.ndarray:
    """Per-point weighted matrix measure over the grid (lexicographic order).

    'l1' expects theta weights, 'linf' omega weights; branch ties take the
    worst (largest) value across tied branches.
    """
    if norm == "l1":
        fam = _as_family(weights, "theta")
    elif norm == "linf":
        fam = _as_family(weights, "omega")
    else:
        raise CertifyError("norm must be 'l1' or 'linf'")
    ev = _make_mu_eval(sys, fam, norm)
    jb = jacobian(sys)
    out = []
    for _, X in _iter_chunks(box.axes()):
        vals, _, _ = _chunk_worst(jb, X, ev)
        out.append(vals)
    return np.concatenate(out, axis=0)
