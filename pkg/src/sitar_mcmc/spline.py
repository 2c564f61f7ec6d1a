"""Knot placement and spline bases for the mean growth curve.

Both families have ``kappa + 2`` columns and are cardinal: column ``k`` equals
1 at knot ``k`` and 0 at the other knots, so a coefficient vector is the curve
height at the knots.

``natural_cubic``
    Natural cubic spline (zero second derivative at the boundary knots),
    linear beyond them.
``b_spline``
    Cubic B-spline basis on the same knots reduced by two not-a-knot end
    conditions (continuous third derivative across the first and last interior
    knots). Beyond the boundary it follows the end-span cubic.

Evaluation happens on ``u = (t - lower) / (upper - lower)`` to keep the
underlying power and B-spline bases well conditioned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

FAMILIES = ("natural_cubic", "b_spline")
KNOT_STRATEGIES = ("equal_spacing", "quantile")


class KnotError(ValueError):
    """Raised for degenerate or inconsistent knot sets."""


@dataclass(frozen=True)
class KnotSet:
    interior: tuple[float, ...]
    boundary: tuple[float, float]

    def __post_init__(self):
        lo, hi = self.boundary
        if not (np.isfinite(lo) and np.isfinite(hi)) or not lo < hi:
            raise KnotError(f"boundary knots must satisfy lower < upper, got {self.boundary}")
        inner = np.asarray(self.interior, dtype=float)
        if inner.size:
            if np.any(np.diff(inner) <= 0):
                raise KnotError("interior knots must be strictly increasing")
            if inner[0] <= lo or inner[-1] >= hi:
                raise KnotError("interior knots must lie strictly inside the boundary")

    @property
    def n_interior(self) -> int:
        return len(self.interior)

    @property
    def n_basis(self) -> int:
        return len(self.interior) + 2

    @property
    def all_knots(self) -> np.ndarray:
        return np.array([self.boundary[0], *self.interior, self.boundary[1]])

    @property
    def width(self) -> float:
        return self.boundary[1] - self.boundary[0]

    def to_dict(self) -> dict:
        return {"interior": list(self.interior), "boundary": list(self.boundary)}

    @classmethod
    def from_dict(cls, d: dict) -> "KnotSet":
        return cls(tuple(float(v) for v in d["interior"]), tuple(float(v) for v in d["boundary"]))


def place_knots(times, n_interior: int, strategy: str = "equal_spacing") -> KnotSet:
    """Boundary knots at the time range; interior knots equally spaced or at quantiles."""
    t = np.asarray(times, dtype=float).ravel()
    if t.size == 0:
        raise KnotError("cannot place knots on an empty time vector")
    if n_interior < 0:
        raise KnotError("number of interior knots must be >= 0")
    lo, hi = float(t.min()), float(t.max())
    if not lo < hi:
        raise KnotError(f"degenerate time range: all times equal {lo}")
    probs = np.arange(1, n_interior + 1) / (n_interior + 1)
    if strategy == "equal_spacing":
        inner = lo + probs * (hi - lo)
    elif strategy == "quantile":
        inner = np.quantile(t, probs)
        if np.any(np.diff(np.concatenate([[lo], inner, [hi]])) <= 0):
            raise KnotError("quantile knots collide; too few distinct times for this many knots")
    else:
        raise KnotError(f"unknown knot strategy {strategy!r}")
    return KnotSet(tuple(float(v) for v in inner), (lo, hi))


def _truncated_power(u: np.ndarray, xi: np.ndarray, order: int) -> np.ndarray:
    """Natural spline basis N1 = 1, N2 = u, N_{k+2} = d_k - d_{K-1}, valid on [0, 1]."""
    n_knots = xi.size
    out = np.zeros((u.size, n_knots))
    if order == 0:
        out[:, 0] = 1.0
        out[:, 1] = u
    elif order == 1:
        out[:, 1] = 1.0
    if n_knots > 2:
        pos = np.maximum(u[:, None] - xi[None, :], 0.0)
        if order == 0:
            p = pos**3
        elif order == 1:
            p = 3.0 * pos**2
        elif order == 2:
            p = 6.0 * pos
        else:
            p = 6.0 * (pos > 0)
        d = (p[:, :-1] - p[:, -1:]) / (xi[-1] - xi[:-1])[None, :]
        out[:, 2:] = d[:, :-1] - d[:, -1:]
    return out


def _not_a_knot_constraints(spl: BSpline, xi: np.ndarray) -> np.ndarray:
    """Rows c with c @ coef = 0 for each of the two end conditions."""
    inner = xi[1:-1]
    third = spl.derivative(3)
    if inner.size >= 2:
        rows = []
        for j in (1, xi.size - 2):
            left, right = 0.5 * (xi[j - 1] + xi[j]), 0.5 * (xi[j] + xi[j + 1])
            rows.append(third(right) - third(left))
        return np.array(rows)
    # one interior knot: cubic with no jump there, then no cubic term (a parabola)
    # no interior knots: no cubic and no quadratic term (a line)
    mid = np.array([0.25])
    if inner.size == 1:
        return np.vstack([third(np.array([0.5 * (xi[1] + xi[2])])) - third(np.array([0.5 * xi[1]])), third(mid)])
    return np.vstack([third(mid), spl.derivative(2)(mid)])


class SplineBasis:
    """Cardinal basis evaluator for a fixed knot set and family.

    ``basis``, ``deriv`` and ``second_deriv`` return arrays of shape
    ``(len(t), kappa + 2)``; derivatives are with respect to ``t``.
    """

    def __init__(self, knots: KnotSet, family: str = "natural_cubic"):
        if family not in FAMILIES:
            raise ValueError(f"unknown spline family {family!r}; expected one of {FAMILIES}")
        self.knots = knots
        self.family = family
        self.lower, self.upper = knots.boundary
        self.width = knots.width
        xi = (knots.all_knots - self.lower) / self.width
        xi[0], xi[-1] = 0.0, 1.0
        self._xi = xi
        if family == "b_spline":
            t = np.concatenate([[0.0] * 3, xi, [1.0] * 3])
            self._bspl = BSpline(t, np.eye(xi.size + 2), 3, extrapolate=True)
            c = _not_a_knot_constraints(self._bspl, xi)
            q, _ = np.linalg.qr(c.T, mode="complete")
            self._proj = q[:, 2:]
            self._bspl_derivs = [self._bspl] + [self._bspl.derivative(k) for k in (1, 2, 3)]
        self._cardinal = np.linalg.inv(self._raw(xi, 0))

    @property
    def n_basis(self) -> int:
        return self.knots.n_basis

    def _unit(self, t) -> np.ndarray:
        return np.atleast_1d((np.asarray(t, dtype=float) - self.lower) / self.width)

    def basis(self, t) -> np.ndarray:
        return self._raw(self._unit(t), 0) @ self._cardinal

    def deriv(self, t) -> np.ndarray:
        return self._raw(self._unit(t), 1) @ self._cardinal / self.width

    def second_deriv(self, t) -> np.ndarray:
        return self._raw(self._unit(t), 2) @ self._cardinal / self.width**2

    def _raw(self, u: np.ndarray, order: int) -> np.ndarray:
        if self.family == "b_spline":
            return self._bspl_derivs[order](u) @ self._proj
        xi = self._xi
        out = _truncated_power(np.clip(u, 0.0, 1.0), xi, order)
        if order == 0:
            for edge, mask in ((0.0, u < 0.0), (1.0, u > 1.0)):
                if np.any(mask):
                    at = np.array([edge])
                    out[mask] = _truncated_power(at, xi, 0) + np.outer(u[mask] - edge, _truncated_power(at, xi, 1)[0])
        elif order >= 2:
            out[(u < 0.0) | (u > 1.0)] = 0.0
        return out


def eval_basis(knots: KnotSet, family: str, t) -> np.ndarray:
    return SplineBasis(knots, family).basis(t)


def eval_basis_deriv(knots: KnotSet, family: str, t) -> np.ndarray:
    return SplineBasis(knots, family).deriv(t)
