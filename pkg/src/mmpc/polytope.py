"""Halfspace polytopes and the linear-program queries used for constraint tightening.

A polytope is stored as ``{x : H x <= h}``.  The only geometric primitives
needed by the rest of the package are membership, support functions,
emptiness certificates and the Pontryagin (erosion) difference against a
linearly mapped disturbance set.  Support and emptiness are answered by a
small dense two-phase simplex solver with Bland's rule, which keeps the
whole stack deterministic and dependency-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LpError",
    "EmptySetError",
    "UnboundedDirectionError",
    "HPolytope",
    "box",
    "pontryagin_diff",
    "bounding_box",
    "lp_maximize",
]

# Feasibility / pivot tolerance for the simplex solver.  The sets handled
# here are desk-scale (entries well below 1e9), so an absolute tolerance
# is adequate.
_LP_TOL = 1e-9


class LpError(RuntimeError):
    """Base class for linear-program failures."""


class EmptySetError(LpError):
    """Raised when a query requires a nonempty set but the set is empty."""


class UnboundedDirectionError(LpError):
    """Raised when a support function value is +infinity."""


# ---------------------------------------------------------------------------
# Dense two-phase simplex
# ---------------------------------------------------------------------------


def _pivot(T: np.ndarray, basis: np.ndarray, row: int, col: int) -> None:
    """Pivot the tableau in place so that ``col`` becomes basic in ``row``."""
    T[row] /= T[row, col]
    for r in range(T.shape[0]):
        if r != row and T[r, col] != 0.0:
            T[r] -= T[r, col] * T[row]
    basis[row] = col


def _simplex_iterate(T: np.ndarray, basis: np.ndarray, ncols: int) -> str:
    """Run primal simplex on a tableau whose last row is the (max) objective.

    Bland's rule on both the entering and the leaving variable guarantees
    termination.  Returns ``"optimal"`` or ``"unbounded"``.
    """
    nrows = T.shape[0] - 1
    while True:
        enter = -1
        for j in range(ncols):
            if T[-1, j] > _LP_TOL:
                enter = j
                break
        if enter < 0:
            return "optimal"
        leave = -1
        best = np.inf
        for i in range(nrows):
            a = T[i, enter]
            if a > _LP_TOL:
                ratio = T[i, -1] / a
                if ratio < best - _LP_TOL or (
                    abs(ratio - best) <= _LP_TOL
                    and (leave < 0 or basis[i] < basis[leave])
                ):
                    best = ratio
                    leave = i
        if leave < 0:
            return "unbounded"
        _pivot(T, basis, leave, enter)


def lp_maximize(c: np.ndarray, A_ub: np.ndarray, b_ub: np.ndarray):
    """Maximize ``c @ x`` subject to ``A_ub @ x <= b_ub`` with ``x`` free.

    Returns ``(status, x, value)`` where status is one of ``"optimal"``,
    ``"unbounded"`` or ``"infeasible"`` (``x``/``value`` are None unless
    optimal).  Free variables are split into positive parts; feasibility is
    established by a phase-1 problem with artificial variables.
    """
    c = np.asarray(c, dtype=float).ravel()
    A = np.atleast_2d(np.asarray(A_ub, dtype=float))
    b = np.asarray(b_ub, dtype=float).ravel()
    q, d = A.shape
    if c.size != d or b.size != q:
        raise ValueError("inconsistent LP dimensions")

    # Standard form: columns are [x+, x-, slack]; rows scaled so rhs >= 0.
    n = 2 * d + q
    rows = np.hstack([A, -A, np.eye(q)])
    rhs = b.copy()
    neg = rhs < 0.0
    rows[neg] *= -1.0
    rhs[neg] *= -1.0

    # Phase 1: artificial variable on every row, minimize their sum.
    T = np.zeros((q + 1, n + q + 1))
    T[:q, :n] = rows
    T[:q, n : n + q] = np.eye(q)
    T[:q, -1] = rhs
    basis = np.arange(n, n + q)
    # Reduced-cost row for max(-sum(artificials)) after eliminating the
    # initial artificial basis; the value cell tracks -(objective).
    T[-1, :] = T[:q, :].sum(axis=0)
    T[-1, n : n + q] = 0.0
    status = _simplex_iterate(T, basis, n + q)
    assert status == "optimal"  # phase 1 objective is bounded above by 0
    if T[-1, -1] > _LP_TOL * max(1.0, np.abs(b).max(initial=0.0)):
        return "infeasible", None, None

    # Drive any artificial still basic (at zero level) out of the basis.
    drop_rows = []
    for i in range(q):
        if basis[i] >= n:
            piv = -1
            for j in range(n):
                if abs(T[i, j]) > _LP_TOL:
                    piv = j
                    break
            if piv < 0:
                drop_rows.append(i)  # redundant constraint row
            else:
                _pivot(T, basis, i, piv)
    if drop_rows:
        keep = [i for i in range(q) if i not in drop_rows]
        T = T[keep + [q]]
        basis = basis[keep]

    # Phase 2: real objective over [x+, x-, slack].
    T = np.hstack([T[:, :n], T[:, -1:]])
    obj = np.concatenate([c, -c, np.zeros(q)])
    T[-1, :n] = obj
    T[-1, -1] = 0.0
    for i, bv in enumerate(basis):
        if T[-1, bv] != 0.0:
            T[-1] -= T[-1, bv] * T[i]
    status = _simplex_iterate(T, basis, n)
    if status == "unbounded":
        return "unbounded", None, None
    x = np.zeros(2 * d)
    for i, bv in enumerate(basis):
        if bv < 2 * d:
            x[bv] = T[i, -1]
    xval = x[:d] - x[d:]
    return "optimal", xval, float(c @ xval)


# ---------------------------------------------------------------------------
# Polytope type
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class HPolytope:
    """Convex polytope ``{x : H x <= h}`` in halfspace form.

    ``bounds`` is an optional ``(lower, upper)`` pair recorded when the set
    was built as an axis-aligned box; it is carried along (and shrunk by
    tightening) so that box vertices stay cheap to enumerate.
    """

    H: np.ndarray
    h: np.ndarray
    bounds: tuple | None = field(default=None)

    def __post_init__(self) -> None:
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.h = np.asarray(self.h, dtype=float).ravel()
        if self.H.shape[0] != self.h.size:
            raise ValueError("H and h have inconsistent row counts")
        if self.H.shape[0] < 1:
            raise ValueError("polytope needs at least one halfspace")
        if not (np.isfinite(self.H).all() and np.isfinite(self.h).all()):
            raise ValueError("polytope data must be finite")

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @property
    def nrows(self) -> int:
        return self.H.shape[0]

    def contains(self, x: np.ndarray, tol: float = 1e-9) -> bool:
        """True iff ``max_i (H_i x - h_i) <= tol``."""
        x = np.asarray(x, dtype=float).ravel()
        return bool((self.H @ x - self.h).max() <= tol)

    def support(self, c: np.ndarray) -> float:
        """Support value ``max {c @ x : x in P}``.

        Raises :class:`EmptySetError` / :class:`UnboundedDirectionError`
        when the set is empty or unbounded along ``c``.
        """
        status, _, value = lp_maximize(np.asarray(c, dtype=float), self.H, self.h)
        if status == "infeasible":
            raise EmptySetError("support of an empty set")
        if status == "unbounded":
            raise UnboundedDirectionError("set is unbounded along the query direction")
        return value

    def is_empty(self) -> bool:
        """Emptiness certificate via a phase-1 feasibility LP."""
        status, _, _ = lp_maximize(np.zeros(self.dim), self.H, self.h)
        return status == "infeasible"

    def to_dict(self) -> dict:
        if self.bounds is not None:
            lo, hi = self.bounds
            return {"box": {"lower": list(map(float, lo)), "upper": list(map(float, hi))}}
        return {"H": self.H.tolist(), "h": self.h.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "HPolytope":
        if "box" in data:
            return box(data["box"]["lower"], data["box"]["upper"])
        return cls(np.array(data["H"], dtype=float), np.array(data["h"], dtype=float))


def box(lower, upper) -> HPolytope:
    """Axis-aligned box ``{x : lower <= x <= upper}`` (degenerate faces allowed)."""
    lo = np.atleast_1d(np.asarray(lower, dtype=float))
    hi = np.atleast_1d(np.asarray(upper, dtype=float))
    if lo.shape != hi.shape or lo.ndim != 1:
        raise ValueError("box bounds must be 1-D arrays of equal length")
    if (lo > hi).any():
        raise ValueError("box lower bound exceeds upper bound")
    d = lo.size
    H = np.vstack([np.eye(d), -np.eye(d)])
    h = np.concatenate([hi, -lo])
    return HPolytope(H, h, bounds=(lo.copy(), hi.copy()))


def box_vertices(P: HPolytope) -> np.ndarray:
    """Vertices of a box-built polytope, shape ``(2**d, d)``."""
    if P.bounds is None:
        raise ValueError("vertex enumeration is only supported for box-built sets")
    lo, hi = P.bounds
    d = lo.size
    verts = np.empty((2**d, d))
    for i in range(2**d):
        for j in range(d):
            verts[i, j] = hi[j] if (i >> j) & 1 else lo[j]
    return verts


def bounding_box(P: HPolytope) -> tuple:
    """Smallest axis-aligned box containing ``P`` (via 2d support LPs)."""
    d = P.dim
    lo = np.empty(d)
    hi = np.empty(d)
    e = np.zeros(d)
    for i in range(d):
        e[:] = 0.0
        e[i] = 1.0
        hi[i] = P.support(e)
        lo[i] = -P.support(-e)
    return lo, hi


def pontryagin_diff(P: HPolytope, M: np.ndarray, W: HPolytope) -> HPolytope:
    """Erosion ``{x : x + M w in P for all w in W}``.

    Each offset is tightened by the support of ``W`` in the mapped row
    direction: ``h_i' = h_i - sup_{w in W} (H_i M) w``.  The row set of the
    result is identical to that of ``P`` (no redundancy removal), so row
    identities remain stable under repeated tightening.  The result may be
    empty; callers query :meth:`HPolytope.is_empty` to detect that.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape != (P.dim, W.dim):
        raise ValueError(f"map must be {P.dim}x{W.dim}, got {M.shape}")
    h_new = P.h.copy()
    HM = P.H @ M
    for i in range(P.nrows):
        h_new[i] -= W.support(HM[i])
    bounds = None
    if P.bounds is not None:
        d = P.dim
        # box rows were laid out [I; -I] with h = [upper; -lower]
        upper, lower = h_new[:d], -h_new[d:]
        if (lower <= upper).all():
            bounds = (lower.copy(), upper.copy())
    return HPolytope(P.H.copy(), h_new, bounds=bounds)
