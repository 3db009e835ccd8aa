"""Dense quadratic programs for the receding-horizon controllers.

The per-step optimal control problems are condensed onto their decision
moves (eliminating the states through the stacked prediction) and solved
with a primal active-set method.  Three condensers cover the three problem
shapes that occur:

* :func:`condense_nominal` -- one channel optimizes its own future moves,
  the other channels' pending moves are frozen affine terms;
* :func:`condense_robust`  -- same decision structure against tightened
  constraint families and a disturbance-corrected buffer;
* :func:`condense_all_channels` -- every future move is free (controller
  initialization and the synchronized baseline).

All QPs are minimizations of ``0.5 x'Hx + g'x + const`` subject to
``A_in x <= b_in``.  Constant terms are kept so the reported objective is
the full horizon cost, which makes decrease arguments directly testable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .lti_model import DiscretePlant, Schedule, build_prediction
from .periodic_lq import _stacked_state_weight
from .polytope import HPolytope

FEAS_TOL = 1e-8
_DUAL_TOL = 1e-9


class QpShapeError(ValueError):
    """Raised when instance pieces have inconsistent dimensions."""


@dataclass(frozen=True)
class QpInstance:
    """Immutable dense QP ``min 0.5 x'Hx + g'x + const, A_in x <= b_in``.

    ``meta`` maps every constraint row to a ``(kind, step)`` pair with
    ``kind`` one of ``"input"``, ``"state"``, ``"terminal"`` and ``step``
    the prediction step the row belongs to.
    """

    Hess: np.ndarray
    grad: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    meta: dict
    const: float = 0.0

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.Hess, dtype=float))
        g = np.asarray(self.grad, dtype=float).ravel()
        v = H.shape[0]
        if H.shape != (v, v) or g.size != v:
            raise QpShapeError("Hessian/gradient dimensions are inconsistent")
        A = np.asarray(self.A_in, dtype=float)
        if A.size == 0:
            A = np.zeros((0, v))
        A = np.atleast_2d(A)
        b = np.asarray(self.b_in, dtype=float).ravel()
        if A.shape[1] != v or b.size != A.shape[0]:
            raise QpShapeError("constraint dimensions are inconsistent")
        if not (np.isfinite(H).all() and np.isfinite(g).all()
                and np.isfinite(A).all() and np.isfinite(b).all()):
            raise QpShapeError("QP data must be finite")
        scale = np.linalg.norm(H, 2) if v else 0.0
        if np.abs(H - H.T).max(initial=0.0) > 1e-8 * (1.0 + scale):
            raise QpShapeError("Hessian must be symmetric")
        H = 0.5 * (H + H.T)
        if v and np.linalg.eigvalsh(H).min() < -1e-9 * max(scale, 1e-300):
            raise QpShapeError("Hessian must be positive semidefinite")
        if set(self.meta) != set(range(A.shape[0])):
            raise QpShapeError("meta must cover every constraint row exactly")
        object.__setattr__(self, "Hess", H)
        object.__setattr__(self, "grad", g)
        object.__setattr__(self, "A_in", A)
        object.__setattr__(self, "b_in", b)
        object.__setattr__(self, "const", float(self.const))

    @property
    def v(self) -> int:
        return self.Hess.shape[0]

    @property
    def n_rows(self) -> int:
        return self.A_in.shape[0]

    def objective_at(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float).ravel()
        return float(0.5 * x @ self.Hess @ x + self.grad @ x + self.const)

    def violated_rows(self, x: np.ndarray, tol: float = FEAS_TOL) -> list:
        """Rows violated at ``x`` as ``(row, kind, step, amount)`` tuples."""
        x = np.asarray(x, dtype=float).ravel()
        res = self.A_in @ x - self.b_in
        out = []
        for i in np.flatnonzero(res > tol):
            kind, step = self.meta[int(i)]
            out.append((int(i), kind, step, float(res[i])))
        return out


@dataclass(frozen=True)
class QpSolution:
    """Solver result; ``active_rows`` index into the instance rows.

    The KKT residuals (stationarity, primal feasibility, complementary
    slackness) are recorded so callers can certify optimal statuses.
    On ``infeasible`` status ``x_star`` is the least-violating point found
    by the feasibility phase, which makes diagnostic row reports possible.
    """

    x_star: np.ndarray
    objective: float
    status: str
    active_rows: frozenset
    iterations: int = 0
    stationarity: float = 0.0
    primal: float = 0.0
    comp_slack: float = 0.0
    wall_time: float = 0.0


def _chol_solve(L: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``L L' x = rhs`` given the lower Cholesky factor."""
    y = np.linalg.solve(L, rhs)
    return np.linalg.solve(L.T, y)


def _feasible_point(A: np.ndarray, b: np.ndarray):
    """Phase-1 LP: minimize the largest violation ``t``.

    Returns ``(x, t)`` where ``t <= FEAS_TOL`` certifies feasibility.
    """
    from .polytope import lp_maximize

    c_rows, v = A.shape
    cvec = np.zeros(v + 1)
    cvec[v] = -1.0
    A1 = np.hstack([A, -np.ones((c_rows, 1))])
    A1 = np.vstack([A1, np.zeros((1, v + 1))])
    A1[-1, v] = -1.0
    b1 = np.concatenate([b, [0.0]])
    status, z, _ = lp_maximize(cvec, A1, b1)
    if status != "optimal":  # cannot happen: large t is feasible, objective <= 0
        raise RuntimeError(f"feasibility LP returned {status}")
    return z[:v], float(z[v])


def solve(qp: QpInstance, warm=None, x0=None) -> QpSolution:
    """Primal active-set solve of a convex ``QpInstance``.

    ``warm`` is an optional iterable of constraint rows used as the initial
    working-set guess; ``x0`` an optional starting point.  Both are hints:
    they may change the iteration count but never the converged optimum
    (the Hessian is positive definite up to regularization, so the
    minimizer is unique).  Iterations are capped at ``50 v``; the statuses
    are ``optimal``, ``infeasible`` and ``max_iter``.
    """
    t0 = time.perf_counter()
    H, g, A, b = qp.Hess, qp.grad, qp.A_in, qp.b_in
    v, c = qp.v, qp.n_rows
    max_iter = max(50 * v, 50)

    # Cholesky of the (possibly regularized) Hessian.
    scale = max(np.abs(H).max(initial=0.0), 1.0)
    ridge = 0.0
    for _ in range(40):
        try:
            L_H = np.linalg.cholesky(H + ridge * np.eye(v))
            break
        except np.linalg.LinAlgError:
            ridge = max(2.0 * ridge, 1e-14 * scale)
    else:
        raise RuntimeError("Hessian could not be factorized")

    def finish(x, status, W, lam, iters):
        lam = np.asarray(lam, dtype=float).ravel()
        grad_res = H @ x + g
        comp = 0.0
        if W:
            grad_res = grad_res + A[W].T @ lam
            comp = float(np.abs(lam * (A[W] @ x - b[W])).max(initial=0.0))
        primal = float((A @ x - b).max(initial=0.0)) if c else 0.0
        return QpSolution(
            x_star=x.copy(),
            objective=qp.objective_at(x),
            status=status,
            active_rows=frozenset(int(i) for i in W),
            iterations=iters,
            stationarity=float(np.abs(grad_res).max(initial=0.0)),
            primal=max(primal, 0.0),
            comp_slack=comp,
            wall_time=time.perf_counter() - t0,
        )

    # ----- working set ----------------------------------------------------
    W: list = []            # active row indices, insertion-ordered
    Y: list = []            # cached H^{-1} a_i per active row
    L_S = np.zeros((0, 0))  # Cholesky factor of A_W H^{-1} A_W'

    def rebuild_factor():
        nonlocal L_S
        s = len(W)
        S = np.empty((s, s))
        for i in range(s):
            for j in range(s):
                S[i, j] = A[W[i]] @ Y[j]
        S = 0.5 * (S + S.T)
        jitter = 0.0
        for _ in range(40):
            try:
                L_S = np.linalg.cholesky(S + jitter * np.eye(s))
                return True
            except np.linalg.LinAlgError:
                jitter = max(2.0 * jitter, 1e-14 * max(np.abs(S).max(initial=0.0), 1.0))
        return False

    def try_add(row) -> bool:
        """Border-update the factor with ``row``; reject dependent rows."""
        nonlocal L_S
        y_new = _chol_solve(L_H, A[row])
        s12 = np.array([A[i] @ y_new for i in W])
        s22 = float(A[row] @ y_new)
        if len(W) == 0:
            if s22 <= 0.0:
                return False
            W.append(row)
            Y.append(y_new)
            L_S = np.array([[np.sqrt(s22)]])
            return True
        l12 = np.linalg.solve(L_S, s12)
        d = s22 - l12 @ l12
        if d <= 1e-12 * max(s22, 1e-300):
            return False
        s = len(W)
        L_new = np.zeros((s + 1, s + 1))
        L_new[:s, :s] = L_S
        L_new[s, :s] = l12
        L_new[s, s] = np.sqrt(d)
        W.append(row)
        Y.append(y_new)
        L_S = L_new
        return True

    def reset_working_set():
        nonlocal L_S
        W.clear()
        Y.clear()
        L_S = np.zeros((0, 0))

    # ----- starting point -------------------------------------------------
    # The working set must only ever contain rows active at the iterate, so
    # a warm hint is used to build an equality-constrained trial point and
    # adopted only when that point is feasible.
    x_uc = _chol_solve(L_H, -g)
    x = None
    if c == 0:
        return finish(x_uc, "optimal", [], [], 0)
    if warm is not None:
        for row in sorted({int(i) for i in warm}):
            if 0 <= row < c and np.abs(A[row]).max(initial=0.0) > 0.0:
                try_add(row)
        if W:
            h0 = _chol_solve(L_H, g)
            mu0 = _chol_solve(L_S, -(np.array([A[i] @ h0 for i in W]) + b[W]))
            x_try = -h0 - np.column_stack(Y) @ mu0
            if (A @ x_try - b).max(initial=0.0) <= FEAS_TOL:
                x = x_try
            else:
                reset_working_set()
    if x is None and x0 is not None:
        cand = np.asarray(x0, dtype=float).ravel()
        if cand.size == v and (A @ cand - b).max(initial=0.0) <= FEAS_TOL:
            x = cand.copy()
    if x is None and (A @ x_uc - b).max(initial=0.0) <= FEAS_TOL:
        return finish(x_uc, "optimal", [], [], 0)
    if x is None:
        x, t_viol = _feasible_point(A, b)
        if t_viol > FEAS_TOL:
            return finish(x, "infeasible", [], [], 0)

    in_W = np.zeros(c, dtype=bool)
    in_W[W] = True
    mu = np.zeros(len(W))

    # Degenerate vertices (e.g. an origin terminal set written as opposing
    # inequality pairs) can make the default most-negative-multiplier rule
    # cycle; after a stall of zero-length steps the selection switches to
    # the least-index rule until real progress resumes.
    stall = 0
    bland = False

    iters = 0
    while iters < max_iter:
        iters += 1
        d = H @ x + g
        h = _chol_solve(L_H, d)
        if W:
            r_W = b[W] - A[W] @ x
            rhs = -(np.array([A[i] @ h for i in W]) + r_W)
            mu = _chol_solve(L_S, rhs)
            p = -h - np.column_stack(Y) @ mu
            r_resid = float(np.abs(A[W] @ p - r_W).max(initial=0.0))
        else:
            mu = np.zeros(0)
            p = -h
            r_resid = 0.0

        if np.abs(p).max(initial=0.0) <= 1e-11 * (1.0 + np.abs(x).max(initial=0.0)):
            if mu.size == 0:
                return finish(x, "optimal", W, mu, iters)
            tol_mu = _DUAL_TOL * (1.0 + np.abs(mu).max())
            neg = [t for t in range(len(W)) if mu[t] < -tol_mu]
            if not neg:
                return finish(x, "optimal", W, mu, iters)
            if bland:
                j = min(neg, key=lambda t: W[t])
            else:
                # most negative multiplier (ties: argmin takes the first,
                # i.e. the earliest-added row -- deterministic)
                j = int(np.argmin(mu))
            stall += 1
            if stall >= 50:
                bland = True
            row = W.pop(j)
            Y.pop(j)
            in_W[row] = False
            if not rebuild_factor():
                return finish(x, "max_iter", W, np.zeros(len(W)), iters)
            continue

        Ap = A @ p
        slack = b - A @ x
        # A row dependent on the working set (e.g. the mirror half of an
        # active equality pair) sees a directional derivative that is pure
        # equality-solve noise; below that scale it must not block, or it
        # would truncate every step to zero without ever being addable.
        ap_tol = max(1e-12 * (1.0 + np.abs(p).max()), 4.0 * r_resid)
        alpha = 1.0
        block = -1
        for i in range(c):
            if in_W[i] or Ap[i] <= ap_tol:
                continue
            ai = max(slack[i], 0.0) / Ap[i]
            if ai < alpha - 1e-12:
                alpha = ai
                block = i
        x = x + alpha * p
        if alpha <= 1e-14:
            stall += 1
            if stall >= 50:
                bland = True
        else:
            stall = 0
            bland = False
        if block >= 0:
            if try_add(block):
                in_W[block] = True
            # dependent blocking rows are skipped; the next ratio test
            # will pick them up again once the working set changes

    return finish(x, "max_iter", W, np.zeros(len(W)), iters)


# ---------------------------------------------------------------------------
# Condensation
# ---------------------------------------------------------------------------


def _check_sets_nonempty(entries):
    """Raise if any (i, kind, set) entry is an empty polytope."""
    for i, kind, P in entries:
        if P is not None and P.is_empty():
            raise ValueError(f"empty tightened set at step {i} (kind: {kind})")


def _assemble(plant, q, r, F, x_k, Phi, G_dec, G_fro, frozen,
              x_rows, u_rows, t_rows):
    """Shared assembly of the condensed QP pieces.

    ``x_rows``/``t_rows``: lists of ``(i, HPolytope)`` on the step-``i``
    state; ``u_rows``: list of ``(cols, HPolytope, step)`` on decision
    subvectors.  ``frozen`` is the affine move vector matching ``G_fro``.
    """
    n = plant.n
    N = Phi.shape[0] // n
    x_k = np.asarray(x_k, dtype=float).ravel()
    if x_k.size != n:
        raise QpShapeError("state dimension mismatch")
    frozen = np.asarray(frozen, dtype=float).ravel()
    if frozen.size != G_fro.shape[1]:
        raise QpShapeError("frozen move vector does not match its columns")

    W = _stacked_state_weight(q, F, N)
    base = Phi @ x_k + (G_fro @ frozen if frozen.size else np.zeros(N * n))
    v = G_dec.shape[1]
    H = 2.0 * (G_dec.T @ W @ G_dec + r * np.eye(v))
    g = 2.0 * (G_dec.T @ (W @ base))
    const = float(base @ W @ base + x_k @ q @ x_k + r * frozen @ frozen)

    rows_A, rows_b, meta = [], [], {}
    row_count = 0

    def add(block_A, block_b, kind, step):
        nonlocal row_count
        for t in range(block_A.shape[0]):
            meta[row_count + t] = (kind, step)
        row_count += block_A.shape[0]
        rows_A.append(block_A)
        rows_b.append(block_b)

    for cols, P, step in u_rows:
        if P is None:
            continue
        blk = np.zeros((P.nrows, v))
        blk[:, list(cols)] = P.H
        add(blk, P.h.copy(), "input", step)
    for i, P in x_rows:
        if P is None:
            continue
        sl = slice((i - 1) * n, i * n)
        add(P.H @ G_dec[sl], P.h - P.H @ base[sl], "state", i)
    for i, P in t_rows:
        if P is None:
            continue
        sl = slice((i - 1) * n, i * n)
        add(P.H @ G_dec[sl], P.h - P.H @ base[sl], "terminal", i)

    A = np.vstack(rows_A) if rows_A else np.zeros((0, v))
    b = np.concatenate(rows_b) if rows_b else np.zeros(0)
    return QpInstance(Hess=H, grad=g, A_in=A, b_in=b, meta=meta, const=const)


def _own_channel_pieces(plant, sched, k, N_u):
    """Prediction split into own-move and frozen-buffer columns."""
    m = plant.m
    N = (N_u - 1) * m + 1
    pred = build_prediction(plant, sched, k, N)
    G1 = pred.g(1)
    if m > 1 and N_u > 1:
        G_fro = np.hstack([pred.g(j) for j in range(2, m + 1)])
    else:
        G_fro = np.zeros((N * plant.n, 0))
    return N, pred.Phi, G1, G_fro


def condense_nominal(plant: DiscretePlant, sched: Schedule, k: int, N_u: int,
                     q: np.ndarray, r: float, F_phase: np.ndarray,
                     X: HPolytope | None, U_per_phase, T_phase: HPolytope | None,
                     x_k: np.ndarray, plan_buffer: np.ndarray) -> QpInstance:
    """Condense the single-channel receding-horizon problem at step ``k``.

    The decision vector is the ``N_u`` own-channel moves; ``plan_buffer``
    holds the ``(m-1)(N_u-1)`` pending moves of the other channels (slot
    order: the channel moving next first).  ``X`` constrains the state at
    steps ``1..N-1``, ``T_phase`` at step ``N``, and ``U_per_phase[a]`` the
    scalar move of channel ``a+1``.  Any of the sets may be ``None``.
    """
    m = plant.m
    buf = np.asarray(plan_buffer, dtype=float).ravel()
    if buf.size != (m - 1) * (N_u - 1):
        raise QpShapeError(
            f"plan buffer must have {(m - 1) * (N_u - 1)} entries, got {buf.size}")
    N, Phi, G1, G_fro = _own_channel_pieces(plant, sched, k, N_u)
    u_rows = []
    if U_per_phase is not None:
        for ell in range(N_u):
            step = ell * m
            Us = U_per_phase[sched.phase(k + step)]
            u_rows.append(((ell,), Us, step))
    x_rows = [(i, X) for i in range(1, N)]
    t_rows = [(N, T_phase)]
    return _assemble(plant, np.asarray(q, dtype=float), float(r),
                     np.asarray(F_phase, dtype=float), x_k,
                     Phi, G1, G_fro, buf, x_rows, u_rows, t_rows)


def condense_robust(plant: DiscretePlant, sched: Schedule, k: int, N_u: int,
                    q: np.ndarray, r: float, F_phase: np.ndarray,
                    sets, x_k: np.ndarray, plan_buffer: np.ndarray) -> QpInstance:
    """Condense the tightened problem against corrected pending moves.

    ``sets`` provides the tightened families (``X_sets[i][a]``,
    ``U_sets[i][a]``, ``T_sets[a]`` as built by the controller module);
    ``plan_buffer`` must already include the disturbance corrections.
    Raises ``ValueError`` naming ``(i, kind)`` if a used set is empty
    (skipped when the family is marked verified).
    """
    m = plant.m
    a = sched.phase(k)
    buf = np.asarray(plan_buffer, dtype=float).ravel()
    if buf.size != (m - 1) * (N_u - 1):
        raise QpShapeError(
            f"plan buffer must have {(m - 1) * (N_u - 1)} entries, got {buf.size}")
    N, Phi, G1, G_fro = _own_channel_pieces(plant, sched, k, N_u)
    u_rows = []
    if sets.U_sets is not None:
        for ell in range(N_u):
            step = ell * m
            u_rows.append(((ell,), sets.U_sets[step][a], step))
    x_rows = []
    if sets.X_sets is not None:
        x_rows = [(i, sets.X_sets[i][a]) for i in range(1, N)]
    t_rows = [(N, sets.T_sets[a] if sets.T_sets is not None else None)]
    if not getattr(sets, "verified_nonempty", False):
        _check_sets_nonempty([(s, "input", P) for (_, P, s) in u_rows]
                             + [(i, "state", P) for i, P in x_rows]
                             + [(N, "terminal", P) for _, P in t_rows])
    return _assemble(plant, np.asarray(q, dtype=float), float(r),
                     np.asarray(F_phase, dtype=float), x_k,
                     Phi, G1, G_fro, buf, x_rows, u_rows, t_rows)


def move_columns(plant: DiscretePlant, moves, N: int) -> np.ndarray:
    """Prediction columns for explicit ``(step, channel)`` move pairs.

    Column ``j`` maps move ``moves[j]`` into the stacked states ``1..N``;
    several channels may move at the same step (the synchronized pattern).
    """
    n = plant.n
    G = np.zeros((N * n, len(moves)))
    for j, (step, ch) in enumerate(moves):
        if not 0 <= step < N:
            raise QpShapeError(f"move step {step} outside horizon {N}")
        vcol = plant.b_col(ch).ravel()
        for i in range(step, N):
            G[i * n:(i + 1) * n, j] = vcol
            if i + 1 < N:
                vcol = plant.A @ vcol
    return G


def condense_all_channels(plant: DiscretePlant, sched: Schedule, k: int,
                          N_u: int, q: np.ndarray, r: float,
                          F_phase: np.ndarray, X: HPolytope | None,
                          U_per_phase, T_phase: HPolytope | None,
                          x_k: np.ndarray, *, moves=None, N: int | None = None,
                          x_sets=None, u_groups=None) -> QpInstance:
    """Condense with every future move free.

    By default the moves are the multiplexed pattern over the horizon
    ``N=(N_u-1)m+1`` (one move per step on channel ``sigma(k+j)``), the
    shape used to initialize the receding-horizon controllers.  The
    synchronized baseline passes explicit ``moves`` (a list of ``(step,
    channel)`` pairs), its horizon ``N``, and optionally ``u_groups``
    (``(cols, set, step)`` triples on move subvectors) overriding the
    per-phase input sets.  ``x_sets`` (callable ``i -> HPolytope``)
    overrides ``X`` per step when tightened families are in play.
    """
    m = plant.m
    if N is None:
        N = (N_u - 1) * m + 1
    if moves is None:
        moves = [(j, sched.sigma(k + j)) for j in range(N)]
    Phi = build_prediction(plant, sched, k, N).Phi
    G = move_columns(plant, moves, N)
    if u_groups is None:
        u_groups = []
        if U_per_phase is not None:
            for j, (step, ch) in enumerate(moves):
                u_groups.append(((j,), U_per_phase[ch - 1], step))
    if x_sets is None:
        x_rows = [(i, X) for i in range(1, N)]
    else:
        x_rows = [(i, x_sets(i)) for i in range(1, N)]
    t_rows = [(N, T_phase)]
    return _assemble(plant, np.asarray(q, dtype=float), float(r),
                     np.asarray(F_phase, dtype=float), x_k,
                     Phi, G, np.zeros((N * plant.n, 0)), np.zeros(0),
                     x_rows, u_groups, t_rows)


def dump_instance(qp: QpInstance, path=None) -> str:
    """Plain-text dump (dimensions, then row-major matrices) for external checks."""
    lines = [f"{qp.v} {qp.n_rows}"]
    fmt = lambda row: " ".join(f"{x:.17g}" for x in np.atleast_1d(row))
    lines += [fmt(row) for row in qp.Hess]
    lines.append(fmt(qp.grad))
    lines += [fmt(row) for row in qp.A_in]
    lines.append(fmt(qp.b_in) if qp.n_rows else "")
    lines.append(f"{qp.const:.17g}")
    lines += [f"{i} {qp.meta[i][0]} {qp.meta[i][1]}" for i in range(qp.n_rows)]
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
