"""Separable Lyapunov functions built from certified weights.

A positive sum-type family theta gives two l1-flavoured candidates:

* state-sum:  V(x) = sum_i | integral from xstar_i to x_i of theta_i(s) ds |
* flow-sum:   V(x) = sum_i theta_i(x_i) |f_i(x)|

A positive max-type family omega gives the linf analogues (the metric
density along coordinate i is 1/omega_i):

* state-max:  V(x) = max_i | integral from xstar_i to x_i of ds/omega_i(s) |
* flow-max:   V(x) = max_i |f_i(x)| / omega_i(x_i)

State variants decrease globally on the certified region; flow variants are
local statements near x* unless the uniform "<= -eps everywhere" addendum
was certified, in which case pass ``uniform=True`` to record global scope.
Building a candidate performs no certification — run the checks first.

``weighted_distance`` evaluates the underlying separable Finsler distance
itself: d(x, y) aggregates per-coordinate integrals of the metric density
(sum for l1/theta, max for linf/omega).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from numpy.polynomial import polynomial as P

from .measures import WeightComponent, WeightFamily
from .sysdsl import SystemDef, format_number

__all__ = ["LyapFn", "LyapError", "build_lyapunov", "eval_lyap",
           "weighted_distance", "VARIANTS"]

VARIANTS = ("state-sum", "flow-sum", "state-max", "flow-max")

_GL_NODES = 32


class LyapError(ValueError):
    """Incompatible weight kind/variant or malformed request."""


@lru_cache(maxsize=1)
def _gl_rule():
    return np.polynomial.legendre.leggauss(_GL_NODES)


# ---------------------------------------------------------------------------
# Per-coordinate metric density and its antiderivative
# ---------------------------------------------------------------------------

class _Density:
    """Metric density rho_i(s) for one coordinate with a fixed base point.

    Polynomial densities integrate exactly (antiderivative coefficients are
    stored with the base-point value subtracted); anything else falls back
    to 32-node Gauss-Legendre quadrature, which is exact well past the
    polynomial degrees in play and accurate to machine precision for the
    smooth reciprocal densities.
    """

    def __init__(self, comp: WeightComponent, kind: str, base: float):
        self.base = float(base)
        # density is theta_i for sum-type weights, 1/omega_i for max-type
        invert = (kind == "omega")
        poly_density = comp.reciprocal == invert
        if poly_density:
            self._coeffs = np.asarray(comp.coeffs, dtype=float)
            anti = P.polyint(self._coeffs)
            anti[0] = -P.polyval(self.base, anti)
            self._anti = anti
            self._fn = None
        else:
            # either omega = p (density 1/p) or theta = 1/p (density 1/p)
            self._anti = None
            p = np.asarray(comp.coeffs, dtype=float)
            self._fn = lambda s: 1.0 / P.polyval(s, p)

    def integral(self, x) -> np.ndarray:
        """integral from base to x of rho(s) ds, elementwise over x."""
        x = np.asarray(x, dtype=float)
        if self._anti is not None:
            return P.polyval(x, self._anti)
        nodes, wts = _gl_rule()
        half = (x - self.base) / 2.0
        mid = (x + self.base) / 2.0
        s = half[..., None] * nodes + mid[..., None]
        return half * np.sum(wts * self._fn(s), axis=-1)

    def describe(self, var: str) -> Optional[str]:
        """Closed form of the integral when polynomial, else None."""
        if self._anti is None:
            return None
        terms = []
        for k, c in enumerate(self._anti):
            c = float(c)
            if c == 0.0:
                continue
            if k == 0:
                terms.append(format_number(c))
            elif k == 1:
                terms.append(f"{format_number(c)}*{var}" if c != 1.0 else var)
            else:
                head = "" if c == 1.0 else f"{format_number(c)}*"
                terms.append(f"{head}{var}^{k}")
        return " + ".join(terms) if terms else "0"


# ---------------------------------------------------------------------------
# Lyapunov candidate
# ---------------------------------------------------------------------------

@dataclass
class LyapFn:
    """A separable Lyapunov candidate V with its provenance.

    ``scope`` records what the accompanying certificates justify: state
    variants are global on the certified region; flow variants are local
    unless built with ``uniform=True``.
    """
    variant: str
    scope: str
    weights: WeightFamily
    xstar: tuple
    sys: SystemDef
    _densities: tuple

    @property
    def n(self) -> int:
        return len(self.xstar)

    def value(self, x: Sequence[float]) -> float:
        return float(self.evaluate_batch(np.asarray([list(map(float, x))]))[0])

    def __call__(self, x: Sequence[float]) -> float:
        return self.value(x)

    def evaluate_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n:
            raise LyapError(f"expected points of dimension {self.n}")
        if self.variant.startswith("state"):
            terms = np.stack(
                [np.abs(d.integral(X[:, i]))
                 for i, d in enumerate(self._densities)], axis=1)
        else:
            F = np.abs(self.sys.f_batch(X))
            scale = np.stack(
                [self.weights.components[i].value(X[:, i])
                 for i in range(self.n)], axis=1)
            if self.weights.kind == "theta":
                terms = scale * F
            else:
                terms = F / scale
        if self.variant.endswith("sum"):
            return np.sum(terms, axis=1)
        return np.max(terms, axis=1)

    def describe(self) -> str:
        names = self.sys.state_names
        if self.variant.startswith("state"):
            parts = []
            for i, d in enumerate(self._densities):
                closed = d.describe(names[i])
                if closed is None:
                    dens = ("1/(" + self.weights.components[i].describe(names[i]) + ")")
                    parts.append(f"|int_{format_number(d.base)}^{names[i]} {dens} ds|")
                else:
                    parts.append(f"|{closed}|")
        else:
            parts = []
            for i in range(self.n):
                wdesc = self.weights.components[i].describe(names[i])
                if self.weights.kind == "theta":
                    parts.append(f"({wdesc})*|f_{names[i]}|"
                                 if not self.weights.components[i].is_constant
                                 else f"{wdesc}*|f_{names[i]}|")
                else:
                    parts.append(f"|f_{names[i]}|/({wdesc})")
        joiner = " + " if self.variant.endswith("sum") else ", "
        body = joiner.join(parts)
        if self.variant.endswith("max"):
            body = f"max{{{body}}}"
        return f"V(x) = {body}"

    def to_jsonable(self) -> dict:
        return {
            "variant": self.variant,
            "scope": self.scope,
            "weights": self.weights.to_jsonable(),
            "equilibrium": list(self.xstar),
            "system": self.sys.name,
            "pretty": self.describe(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_jsonable(), sort_keys=True, indent=2)


def build_lyapunov(sys: SystemDef, w: WeightFamily, variant: str,
                   uniform: bool = False) -> LyapFn:
    """Assemble the separable candidate for the given weights and variant.

    Sum variants take a theta family, max variants an omega family; the
    cross pairings have no meaning here and raise.  ``uniform`` marks a
    flow variant as globally valid (only do this after certifying the
    uniform-negativity addendum).
    """
    if variant not in VARIANTS:
        raise LyapError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    need = "theta" if variant.endswith("sum") else "omega"
    if w.kind != need:
        raise LyapError(
            f"variant {variant!r} needs kind {need!r} weights, got {w.kind!r}")
    if w.n != sys.n:
        raise LyapError("weight dimension mismatch")
    if sys.equilibrium is None:
        raise LyapError("system has no declared equilibrium")
    xstar = tuple(float(v) for v in sys.equilibrium)
    densities = tuple(_Density(c, w.kind, xstar[i])
                      for i, c in enumerate(w.components))
    if variant.startswith("state"):
        scope = "global"
    else:
        scope = "global" if uniform else "local"
    return LyapFn(variant=variant, scope=scope, weights=w, xstar=xstar,
                  sys=sys, _densities=densities)


def eval_lyap(V: LyapFn, x: Sequence[float]) -> float:
    """Evaluate the candidate at a point."""
    return V.value(x)


# ---------------------------------------------------------------------------
# The underlying weighted distance
# ---------------------------------------------------------------------------

def weighted_distance(family: WeightFamily, x: Sequence[float],
                      y: Sequence[float], norm: str = "l1") -> float:
    """Separable weighted distance between two points.

    l1 uses a theta family: d = sum_i |int_{y_i}^{x_i} theta_i|.
    linf uses an omega family: d = max_i |int_{y_i}^{x_i} 1/omega_i|.
    """
    if norm == "l1":
        if family.kind != "theta":
            raise LyapError("l1 distance requires a theta family")
    elif norm == "linf":
        if family.kind != "omega":
            raise LyapError("linf distance requires an omega family")
    else:
        raise LyapError(f"norm must be 'l1' or 'linf', got {norm!r}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (family.n,) or y.shape != (family.n,):
        raise LyapError("point dimension mismatch")
    terms = np.empty(family.n)
    for i, comp in enumerate(family.components):
        d = _Density(comp, family.kind, y[i])
        terms[i] = abs(float(d.integral(x[i])))
    return float(np.sum(terms) if norm == "l1" else np.max(terms))
