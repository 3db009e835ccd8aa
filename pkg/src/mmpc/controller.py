"""Receding-horizon controllers over channel-multiplexed input schedules.

This module holds everything between the raw prediction/QP layer and the
simulation loop: disturbance-to-state tightening policies (one input channel
corrected per fast step), constraint tightening by Pontryagin differences,
sampling-based invariance checks for the terminal ingredients, and the step
functions for the nominal controller, the disturbance-rejecting controller,
and the synchronized baseline that moves every channel at once on a slower
grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import qp
from .lti_model import DiscretePlant, Schedule
from .periodic_lq import solve_dpre
from .polytope import HPolytope, box, box_vertices, lp_maximize, pontryagin_diff

# A deadbeat construction must actually reach zero; anything above this is
# treated as a stalled recursion rather than roundoff.
DEADBEAT_TOL = 1e-8


class ControllerError(RuntimeError):
    """Base class for controller-level failures."""


class DesignError(ControllerError):
    """A policy or set construction could not be completed."""


class InfeasibleStepError(ControllerError):
    """A step's program had no admissible point.

    ``rows`` holds ``(row, kind, step, amount)`` diagnostics for the
    constraints violated at the solver's last iterate, ``step`` the fast
    step that failed, and ``mode`` which controller raised.
    """

    def __init__(self, message: str, step: int, rows, mode: str):
        super().__init__(message)
        self.step = int(step)
        self.rows = list(rows)
        self.mode = str(mode)


# ---------------------------------------------------------------------------
# move patterns and tightening policies


@dataclass(frozen=True)
class MovePattern:
    """Which channels may move at each offset from an anchor step.

    ``multiplexed`` rotates through the channels one per step (the anchor
    phase decides who starts); ``synchronized`` moves all channels together
    every ``period`` steps and has a single phase.
    """

    kind: str
    m: int
    period: int

    def __post_init__(self):
        if self.kind not in ("multiplexed", "synchronized"):
            raise ValueError(f"unknown move pattern kind {self.kind!r}")
        if self.m < 1 or self.period < 1:
            raise ValueError("move pattern needs m >= 1 and period >= 1")

    @staticmethod
    def multiplexed(m: int) -> "MovePattern":
        return MovePattern("multiplexed", m, m)

    @staticmethod
    def synchronized(m: int, period: int) -> "MovePattern":
        return MovePattern("synchronized", m, period)

    @property
    def n_phases(self) -> int:
        # A synchronized phase is the position within the move period: a
        # disturbance born mid-period can only be corrected from the next
        # move instant on, so its maps differ from an instant-born one's.
        return self.m if self.kind == "multiplexed" else self.period

    @property
    def move_dim(self) -> int:
        return 1 if self.kind == "multiplexed" else self.m

    def moves_at(self, phase: int, offset: int) -> bool:
        if self.kind == "multiplexed":
            return True
        return (phase + offset) % self.period == 0

    def channels(self, phase: int, offset: int) -> tuple:
        """1-based channels moving ``offset`` steps after an anchor of ``phase``."""
        if self.kind == "multiplexed":
            return (((phase + offset) % self.m) + 1,)
        if (phase + offset) % self.period == 0:
            return tuple(range(1, self.m + 1))
        return ()

    def move_matrix(self, plant: DiscretePlant, phase: int, offset: int) -> np.ndarray:
        """Input columns matching the ``move_dim`` rows of the policy maps."""
        if self.kind == "multiplexed":
            return plant.b_col(((phase + offset) % self.m) + 1)
        return plant.B


@dataclass(frozen=True, eq=False)
class TighteningPolicy:
    """Per-phase correction maps and the induced disturbance-to-state maps.

    ``M[i][a]`` (``move_dim x n_w``) corrects the move ``i`` steps after an
    anchor of phase ``a`` by ``M[i][a] @ w``; ``L[i][a]`` (``n x n_w``) is
    the state map left over after those corrections, seeded at
    ``L[0][a] = E`` and closed by ``L[i+1][a] = A L[i][a] + B_i M[i][a]``
    with ``B_i`` the mover's input columns.  ``K[a]`` is the terminal gain
    (zero for the deadbeat constructions, which pin the terminal set at the
    origin).
    """

    M: tuple
    K: tuple
    L: tuple
    E: np.ndarray
    pattern: MovePattern

    @property
    def N(self) -> int:
        return len(self.M)

    @property
    def n_phases(self) -> int:
        return len(self.K)

    def recursion_residual(self, plant: DiscretePlant) -> float:
        """Worst entrywise defect of the stored maps against the recursion."""
        worst = 0.0
        for a in range(self.n_phases):
            La = np.asarray(self.E, dtype=float)
            worst = max(worst, float(np.abs(La - self.L[0][a]).max()))
            for i in range(self.N):
                Bi = self.pattern.move_matrix(plant, a, i)
                La = plant.A @ La + Bi @ self.M[i][a]
                worst = max(worst, float(np.abs(La - self.L[i + 1][a]).max()))
        return worst


def _policy_tables(n_steps: int, n_phases: int):
    M = [[None] * n_phases for _ in range(n_steps)]
    L = [[None] * n_phases for _ in range(n_steps + 1)]
    return M, L


def _freeze(policy_rows) -> tuple:
    return tuple(tuple(np.asarray(x, dtype=float) for x in row) for row in policy_rows)


def deadbeat_policy(plant: DiscretePlant, sched: Schedule, N: int,
                    pattern: MovePattern | None = None) -> TighteningPolicy:
    """Greedy deadbeat construction: each move removes what it can of ``A L_i``.

    Every step solves the one-move least-squares problem
    ``M_i = -B_i^+ (A L_i)``, projecting out the mover's column.  The
    recursion must reach ``||L_N||_F <= 1e-8``; a stalled recursion raises
    ``DesignError`` suggesting a longer horizon or a user-supplied policy
    (``min_norm_deadbeat_policy`` chooses all moves jointly and succeeds on
    plants where the greedy sweep plateaus).
    """
    if plant.E is None:
        raise DesignError("plant has no disturbance injection columns")
    if sched.m != plant.m:
        raise DesignError("schedule and plant disagree on the channel count")
    if pattern is None:
        pattern = MovePattern.multiplexed(plant.m)
    E = np.asarray(plant.E, dtype=float)
    n, n_w = E.shape
    M, L = _policy_tables(N, pattern.n_phases)
    worst = 0.0
    for a in range(pattern.n_phases):
        La = E.copy()
        L[0][a] = La
        for i in range(N):
            Bi = pattern.move_matrix(plant, a, i)
            target = plant.A @ La
            if pattern.moves_at(a, i):
                Mi = -np.linalg.lstsq(Bi, target, rcond=None)[0]
            else:
                Mi = np.zeros((pattern.move_dim, n_w))
            M[i][a] = Mi
            La = target + Bi @ Mi
            L[i + 1][a] = La
        worst = max(worst, float(np.linalg.norm(L[N][a])))
    if worst > DEADBEAT_TOL:
        raise DesignError(
            f"greedy deadbeat recursion stalled at ||L_N||_F = {worst:.3e}; "
            "increase the horizon or supply a policy (for example from "
            "min_norm_deadbeat_policy)")
    K = tuple(np.zeros((pattern.move_dim, n)) for _ in range(pattern.n_phases))
    return TighteningPolicy(M=_freeze(M), K=K, L=_freeze(L), E=E, pattern=pattern)


def min_norm_deadbeat_policy(plant: DiscretePlant, sched: Schedule, N: int,
                             pattern: MovePattern | None = None,
                             window: int | None = None,
                             margin_rows=None,
                             reg: float = 1e-8) -> TighteningPolicy:
    """Joint deadbeat construction minimizing weighted constraint margins.

    All corrections in a ``window``-step prefix are chosen together by an
    equality-constrained least squares: the disturbance-to-state map must
    vanish exactly at the window end (so later margins stop growing), while
    the weighted row margins ``sum_i (weight * row . L_i)^2`` plus ``reg``
    times the correction energy are minimized.  ``margin_rows`` is a
    sequence of ``(row_vector, weight)`` pairs measuring which state
    directions the tightening should keep cheap; identity rows of weight
    one are used when omitted.  The window defaults to ``n + period``.
    """
    if plant.E is None:
        raise DesignError("plant has no disturbance injection columns")
    if sched.m != plant.m:
        raise DesignError("schedule and plant disagree on the channel count")
    if pattern is None:
        pattern = MovePattern.multiplexed(plant.m)
    E = np.asarray(plant.E, dtype=float)
    n, n_w = E.shape
    T = window if window is not None else min(N, n + pattern.period)
    if not 1 <= T <= N:
        raise DesignError(f"window must lie in 1..{N}, got {T}")
    if margin_rows is None:
        margin_rows = [(np.eye(n)[j], 1.0) for j in range(n)]
    rows = [(np.asarray(v, dtype=float).ravel(), float(w)) for v, w in margin_rows]
    for v, _ in rows:
        if v.size != n:
            raise DesignError(f"margin row has {v.size} entries, state has {n}")

    md = pattern.move_dim
    M, L = _policy_tables(N, pattern.n_phases)
    for a in range(pattern.n_phases):
        offs = [i for i in range(T) if pattern.moves_at(a, i)]
        if not offs:
            raise DesignError("no move opportunities inside the window")
        nz = len(offs) * md
        # effect[o][i]: how the move at offset offs[o] shows up in the map
        # at offset i (an n x move_dim block, = A^(i-1-o) B_o).
        effect = []
        for o in offs:
            chain = pattern.move_matrix(plant, a, o)
            blocks = {o + 1: chain}
            for i in range(o + 2, T + 1):
                chain = plant.A @ chain
                blocks[i] = chain
            effect.append(blocks)
        for c in range(n_w):
            base = [E[:, c]]
            for _ in range(T):
                base.append(plant.A @ base[-1])
            F_rows, f_vals = [], []
            for i in range(1, T):
                for v, wgt in rows:
                    coef = np.zeros(nz)
                    for o_idx, o in enumerate(offs):
                        if o < i:
                            coef[o_idx * md:(o_idx + 1) * md] = wgt * (v @ effect[o_idx][i])
                    F_rows.append(coef)
                    f_vals.append(wgt * float(v @ base[i]))
            F = np.array(F_rows) if F_rows else np.zeros((0, nz))
            f = np.array(f_vals)
            G = np.zeros((n, nz))
            for o_idx in range(len(offs)):
                G[:, o_idx * md:(o_idx + 1) * md] = effect[o_idx][T]
            g = base[T]
            # min ||F z + f||^2 + reg ||z||^2  s.t.  G z + g = 0, solved by
            # the nullspace method so the window-end equality holds to
            # machine precision no matter how lopsided the weights are.
            z_p = np.linalg.lstsq(G, -g, rcond=None)[0]
            _, sv, Vt = np.linalg.svd(G)
            rank = int(np.sum(sv > sv[0] * max(G.shape) * np.finfo(float).eps)) if sv.size else 0
            Z = Vt[rank:].T
            if Z.shape[1]:
                Hm = F.T @ F + reg * np.eye(nz)
                y = np.linalg.lstsq(Z.T @ Hm @ Z,
                                    -Z.T @ (Hm @ z_p + F.T @ f), rcond=None)[0]
                z = z_p + Z @ y
            else:
                z = z_p
            for o_idx, o in enumerate(offs):
                if M[o][a] is None:
                    M[o][a] = np.zeros((md, n_w))
                M[o][a][:, c] = z[o_idx * md:(o_idx + 1) * md]
        for i in range(N):
            if M[i][a] is None:
                M[i][a] = np.zeros((md, n_w))
        La = E.copy()
        L[0][a] = La
        for i in range(N):
            Bi = pattern.move_matrix(plant, a, i)
            La = plant.A @ La + Bi @ M[i][a]
            L[i + 1][a] = La
    worst = max(float(np.linalg.norm(L[N][a])) for a in range(pattern.n_phases))
    if worst > DEADBEAT_TOL:
        raise DesignError(
            f"windowed deadbeat fit left ||L_N||_F = {worst:.3e}; "
            "try a longer window or different margin weights")
    K = tuple(np.zeros((md, n)) for _ in range(pattern.n_phases))
    return TighteningPolicy(M=_freeze(M), K=K, L=_freeze(L), E=E, pattern=pattern)


# ---------------------------------------------------------------------------
# constraint tightening


@dataclass(frozen=True, eq=False)
class TightenedSets:
    """Tightened families indexed ``[offset][anchor phase]``.

    ``X_sets`` runs over offsets ``0..N`` (``X_sets[0][a]`` is the original
    state set), ``U_sets`` over the same offsets for the mover's move,
    ``T_sets`` is the per-anchor terminal set.  ``empty`` lists
    ``(offset, phase, kind)`` for members that came out empty;
    ``verified_nonempty`` is True when the scan found none, letting the
    per-step condenser skip its own check.
    """

    X_sets: tuple | None
    U_sets: tuple | None
    T_sets: tuple | None
    N: int
    empty: tuple = ()
    verified_nonempty: bool = False


def _product_set(sets) -> HPolytope:
    dims = [P.dim for P in sets]
    total = sum(dims)
    rows = sum(P.nrows for P in sets)
    H = np.zeros((rows, total))
    h = np.zeros(rows)
    r0, c0 = 0, 0
    bounds_lo, bounds_hi = [], []
    boxy = all(P.bounds is not None for P in sets)
    for P in sets:
        H[r0:r0 + P.nrows, c0:c0 + P.dim] = P.H
        h[r0:r0 + P.nrows] = P.h
        r0 += P.nrows
        c0 += P.dim
        if boxy:
            lo, hi = P.bounds
            bounds_lo.extend(lo)
            bounds_hi.extend(hi)
    bounds = (np.array(bounds_lo), np.array(bounds_hi)) if boxy else None
    return HPolytope(H, h, bounds=bounds)


def build_tightened_sets(policy: TighteningPolicy, X: HPolytope | None,
                         U_per_phase, W: HPolytope,
                         T_per_phase=None, N: int | None = None) -> TightenedSets:
    """Shrink the state/move/terminal families against the policy's maps.

    One tube layer is subtracted per elapsed disturbance, the anchor phase
    advancing alongside: ``X[i+1][a] = X[i][a+] - L[i][a+] W`` and
    ``U[i][a] = U[i-1][a+] - M[i-1][a+] W``.  ``U_per_phase`` holds the
    original per-channel move sets (channel ``a+1`` at index ``a``) for the
    multiplexed pattern; the synchronized pattern uses their product.
    Empty members are recorded, not raised, so a checker can report every
    hole at once.
    """
    n_ph = policy.n_phases
    if N is None:
        N = policy.N
    if N > policy.N:
        raise DesignError(f"family horizon {N} exceeds the policy's {policy.N}")
    succ = lambda a: (a + 1) % n_ph

    X_sets = None
    if X is not None:
        X_sets = [[None] * n_ph for _ in range(N + 1)]
        for a in range(n_ph):
            X_sets[0][a] = X
        for i in range(N):
            for a in range(n_ph):
                ap = succ(a)
                X_sets[i + 1][a] = pontryagin_diff(X_sets[i][ap], policy.L[i][ap], W)

    U_sets = None
    if U_per_phase is not None:
        U_sets = [[None] * n_ph for _ in range(N + 1)]
        for a in range(n_ph):
            if policy.pattern.kind == "multiplexed":
                U_sets[0][a] = U_per_phase[a]
            else:
                U_sets[0][a] = _product_set(list(U_per_phase))
        for i in range(1, N + 1):
            for a in range(n_ph):
                ap = succ(a)
                U_sets[i][a] = pontryagin_diff(U_sets[i - 1][ap], policy.M[i - 1][ap], W)

    n = policy.E.shape[0]
    if T_per_phase is None:
        origin = box(np.zeros(n), np.zeros(n))
        T_sets = [origin] * n_ph
    else:
        T_sets = list(T_per_phase)
        if len(T_sets) != n_ph:
            raise DesignError(f"need {n_ph} terminal sets, got {len(T_sets)}")

    empty = []
    for fam, kind in ((X_sets, "state"), (U_sets, "input")):
        if fam is None:
            continue
        for i in range(N + 1):
            for a in range(n_ph):
                P = fam[i][a]
                if P.bounds is None and P.is_empty():
                    empty.append((i, a, kind))
    for a in range(n_ph):
        P = T_sets[a]
        if P.bounds is None and P.is_empty():
            empty.append((N, a, "terminal"))

    return TightenedSets(
        X_sets=tuple(tuple(row) for row in X_sets) if X_sets is not None else None,
        U_sets=tuple(tuple(row) for row in U_sets) if U_sets is not None else None,
        T_sets=tuple(T_sets),
        N=N,
        empty=tuple(empty),
        verified_nonempty=not empty)


# ---------------------------------------------------------------------------
# invariance checks


@dataclass(frozen=True)
class InvarianceReport:
    """Outcome of a sampled invariance check with witnesses for failures."""

    ok: bool
    failures: tuple
    checked: int


def _polytope_points(P: HPolytope, rng, count: int = 16) -> list:
    """Points of ``P``: box vertices when available, support points otherwise."""
    pts = []
    if P.bounds is not None:
        lo, hi = P.bounds
        if P.dim <= 10:
            pts.extend(box_vertices(P))
        else:
            for _ in range(count):
                s = rng.integers(0, 2, size=P.dim)
                pts.append(np.where(s == 1, hi, lo))
        pts.append((lo + hi) / 2.0)
        for _ in range(count // 2):
            pts.append(lo + rng.random(P.dim) * (hi - lo))
    else:
        base = []
        dirs = list(np.eye(P.dim)) + list(-np.eye(P.dim))
        dirs += [rng.standard_normal(P.dim) for _ in range(count)]
        for d in dirs:
            nrm = np.linalg.norm(d)
            if nrm == 0.0:
                continue
            status, x, _ = lp_maximize(d / nrm, P.H, P.h)
            if status == "optimal":
                base.append(np.asarray(x, dtype=float))
        if not base:
            raise DesignError("could not sample any point of the set")
        pts.extend(base)
        for _ in range(count // 2):
            wts = rng.random(len(base))
            pts.append(np.vstack(base).T @ (wts / wts.sum()))
    arr = np.unique(np.round(np.vstack(pts), 12), axis=0)
    return [row for row in arr]


def verify_terminal_invariance(plant: DiscretePlant, sched: Schedule,
                               policy: TighteningPolicy, sets: TightenedSets,
                               W: HPolytope, rng=None,
                               samples: int = 16) -> InvarianceReport:
    """Check the terminal ingredients against the policy's end-of-horizon maps.

    For sampled ``x`` in each anchor's terminal set and every disturbance
    vertex: the mapped point must land in the successor anchor's terminal
    set, the terminal gain's move must be admissible for the tightened move
    set at the horizon end, and the terminal set must sit inside the
    tightened state set there.  Failures carry ``(check, phase, x, w)``.
    """
    if sets.T_sets is None:
        raise DesignError("no terminal sets to verify")
    if rng is None:
        rng = np.random.default_rng(0)
    n_ph = policy.n_phases
    w_pts = _polytope_points(W, rng, samples)
    w_pts.append(np.zeros(W.dim))
    failures = []
    checked = 0
    for a in range(n_ph):
        ap = (a + 1) % n_ph
        Bsel = policy.pattern.move_matrix(plant, a, sets.N)
        LN = policy.L[min(sets.N, policy.N)][a]
        for x in _polytope_points(sets.T_sets[a], rng, samples):
            u = -(policy.K[ap] @ x)
            checked += 1
            if sets.U_sets is not None and not sets.U_sets[sets.N][a].contains(u):
                failures.append(("terminal-input", a, x, None))
            if sets.X_sets is not None and not sets.X_sets[sets.N][a].contains(x):
                failures.append(("terminal-state", a, x, None))
            for w in w_pts:
                checked += 1
                x_next = plant.A @ x + Bsel @ u + LN @ w
                if not sets.T_sets[ap].contains(x_next):
                    failures.append(("terminal-map", a, x, w))
    return InvarianceReport(ok=not failures, failures=tuple(failures), checked=checked)


def verify_periodic_invariance(plant: DiscretePlant, sched: Schedule,
                               K_per_phase, X_I_per_phase,
                               X: HPolytope | None, U_per_phase,
                               rng=None, samples: int = 16) -> InvarianceReport:
    """Check a per-phase invariant family under the per-phase gains.

    Sampled ``x`` in phase ``a``'s member must give an admissible move
    ``-K[a] x``, map into the successor member under the one-channel
    closed loop, and lie in the original state set.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    m = plant.m
    failures = []
    checked = 0
    for a in range(m):
        ap = (a + 1) % m
        Ka = np.atleast_2d(np.asarray(K_per_phase[a], dtype=float))
        for x in _polytope_points(X_I_per_phase[a], rng, samples):
            checked += 1
            u = -(Ka @ x)
            if U_per_phase is not None and not U_per_phase[a].contains(u):
                failures.append(("input", a, x, None))
            x_next = plant.A @ x + plant.b_col(a + 1) @ u
            if not X_I_per_phase[ap].contains(x_next):
                failures.append(("map", a, x, None))
            if X is not None and not X.contains(x):
                failures.append(("state", a, x, None))
    return InvarianceReport(ok=not failures, failures=tuple(failures), checked=checked)


# ---------------------------------------------------------------------------
# designs and loop state


@dataclass(frozen=True, eq=False)
class MmpcDesign:
    """Weights, horizon, and constraint sets for the one-channel-per-step law.

    ``F`` is indexed by the phase at which a prediction ends; ``U`` by the
    channel (index ``a`` for channel ``a+1``); ``T`` like ``F``.  Any of
    the set fields may be ``None`` for an unconstrained direction.
    """

    N_u: int
    q: np.ndarray
    r: float
    F: tuple
    X: HPolytope | None = None
    U: tuple | None = None
    T: tuple | None = None

    def __post_init__(self):
        if self.N_u < 1:
            raise ValueError("need at least one move")
        if self.r <= 0.0:
            raise ValueError("move weight must be positive")


@dataclass(frozen=True, eq=False)
class SyncDesign:
    """Same ingredients for the synchronized baseline.

    The horizon is ``n_inst`` move instants spaced ``period`` fast steps
    apart (all channels move at an instant); constraints are enforced on
    the fast grid throughout.
    """

    n_inst: int
    period: int
    q: np.ndarray
    r: float
    F: np.ndarray
    X: HPolytope | None = None
    U: tuple | None = None
    T: HPolytope | None = None

    def __post_init__(self):
        if self.n_inst < 1 or self.period < 1:
            raise ValueError("need n_inst >= 1 and period >= 1")
        if self.r <= 0.0:
            raise ValueError("move weight must be positive")


def dpre_terminal_weights(plant: DiscretePlant, sched: Schedule,
                          q: np.ndarray, r: float) -> tuple:
    """Per-phase terminal weights from the periodic Riccati recursion."""
    ric = solve_dpre(plant, sched, q, r)
    return tuple(np.asarray(P, dtype=float) for P in ric.P)


@dataclass(eq=False)
class ControllerState:
    """Mutable loop state for the multiplexed controllers.

    ``plan_buffer`` holds the pending moves of the other channels in slot
    order (the channel moving next first, ``N_u - 1`` entries per slot);
    ``candidate`` is the shifted own-channel plan used to warm start the
    next solve; ``last_prediction`` is the one-step state prediction the
    disturbance inference compares against.
    """

    plant: DiscretePlant
    sched: Schedule
    design: MmpcDesign
    mode: str
    k: int
    plan_buffer: np.ndarray
    candidate: np.ndarray
    last_prediction: np.ndarray | None
    last_objective: float | None
    last_solution: qp.QpSolution | None = None
    warm_rows: tuple = ()
    solved: bool = False
    policy: TighteningPolicy | None = None
    sets: TightenedSets | None = None
    E_pinv: np.ndarray | None = field(default=None, repr=False)


@dataclass(eq=False)
class SyncState:
    """Mutable loop state for the synchronized baseline.

    ``plan`` holds the pending instant moves (instant-major, ``m`` entries
    per instant) left from the last solve; in robust mode they receive the
    policy's corrections every fast step, driven by the one-step
    prediction gap, before seeding the next solve's candidate.
    """

    plant: DiscretePlant
    sched: Schedule
    design: SyncDesign
    mode: str
    k0: int
    k: int
    plan: np.ndarray
    last_prediction: np.ndarray | None
    last_objective: float | None
    last_solution: qp.QpSolution | None = None
    warm_rows: tuple = ()
    solved: bool = False
    policy: TighteningPolicy | None = None
    sets: TightenedSets | None = None
    E_pinv: np.ndarray | None = field(default=None, repr=False)


def equilibrium_state(plant: DiscretePlant, sched: Schedule, design: MmpcDesign,
                      mode: str = "nominal", k0: int = 0,
                      policy: TighteningPolicy | None = None,
                      sets: TightenedSets | None = None) -> ControllerState:
    """Loop state for a start at the origin with an all-zero plan.

    At the origin the initialization program returns the zero plan, so the
    loop can begin stepping directly; for nonzero starts use
    ``init_nominal``/``init_robust``.
    """
    if mode not in ("nominal", "robust"):
        raise ValueError(f"unknown mode {mode!r}")
    E_pinv = None
    if mode == "robust":
        if policy is None or sets is None:
            raise DesignError("robust mode needs a policy and tightened sets")
        if plant.E is None:
            raise DesignError("plant has no disturbance injection columns")
        E_pinv = np.linalg.pinv(np.asarray(plant.E, dtype=float))
    m = plant.m
    return ControllerState(
        plant=plant, sched=sched, design=design, mode=mode, k=k0,
        plan_buffer=np.zeros((m - 1) * (design.N_u - 1)),
        candidate=np.zeros(design.N_u),
        last_prediction=np.zeros(plant.n),
        last_objective=None,
        policy=policy, sets=sets, E_pinv=E_pinv)


def _end_phase(sched: Schedule, k: int, N: int) -> int:
    return sched.phase(k + N)


def _split_init_plan(v: np.ndarray, m: int, N_u: int):
    """Buffer slots and shifted own-channel candidate from an all-moves plan.

    The state advances one step when the first move is applied, so slot
    ``j`` of the new anchor holds the moves planned at steps ``j+1, j+1+m,
    ...`` (the last slot being the tail of the channel that just moved);
    the moves at steps ``1, 1+m, ...`` belong to the channel re-optimized
    next and seed its candidate.
    """
    if m > 1:
        buffer = np.concatenate([v[j + 1::m][:N_u - 1] for j in range(1, m)]) \
            if N_u > 1 else np.zeros(0)
        candidate = np.append(v[1::m][:N_u - 1], 0.0)
    else:
        buffer = np.zeros(0)
        candidate = np.append(v[1:], 0.0)
    return buffer, candidate


def init_nominal(plant: DiscretePlant, sched: Schedule, design: MmpcDesign,
                 x0: np.ndarray, k0: int = 0):
    """Solve the all-channels initialization program and apply its first move.

    Returns ``(state, first_move)`` with the state ready for step
    ``k0 + 1``.  Iteration-capped but feasible answers are accepted here
    (initialization only needs an admissible plan); an infeasible program
    raises ``InfeasibleStepError`` with the violated rows.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    m = plant.m
    N = (design.N_u - 1) * m + 1
    ae = _end_phase(sched, k0, N)
    qpi = qp.condense_all_channels(
        plant, sched, k0, design.N_u, design.q, design.r, design.F[ae],
        design.X, design.U, design.T[ae] if design.T is not None else None, x0)
    sol = qp.solve(qpi)
    if sol.status == "infeasible" or (sol.status == "max_iter"
                                      and sol.primal > qp.FEAS_TOL):
        raise InfeasibleStepError(
            f"initialization program has no admissible plan at step {k0}",
            k0, qpi.violated_rows(sol.x_star), "nominal-init")
    v = sol.x_star
    buffer, candidate = _split_init_plan(v, m, design.N_u)
    state = ControllerState(
        plant=plant, sched=sched, design=design, mode="nominal", k=k0 + 1,
        plan_buffer=buffer, candidate=candidate,
        last_prediction=plant.A @ x0 + plant.b_col(sched.sigma(k0)).ravel() * v[0],
        last_objective=sol.objective, last_solution=sol,
        warm_rows=tuple(sorted(sol.active_rows)), solved=True)
    return state, float(v[0])


def init_robust(plant: DiscretePlant, sched: Schedule, design: MmpcDesign,
                policy: TighteningPolicy, sets: TightenedSets,
                x0: np.ndarray, k0: int = 0):
    """All-channels initialization against the tightened families."""
    if plant.E is None:
        raise DesignError("plant has no disturbance injection columns")
    x0 = np.asarray(x0, dtype=float).ravel()
    m = plant.m
    N = (design.N_u - 1) * m + 1
    if sets.N < N:
        raise DesignError(f"tightened families cover {sets.N} steps, need {N}")
    a0 = sched.phase(k0)
    ae = _end_phase(sched, k0, N)
    x_fam = (lambda i: sets.X_sets[i][a0]) if sets.X_sets is not None else None
    u_groups = None
    if sets.U_sets is not None:
        u_groups = [((j,), sets.U_sets[j][a0], j) for j in range(N)]
    qpi = qp.condense_all_channels(
        plant, sched, k0, design.N_u, design.q, design.r, design.F[ae],
        None, None, sets.T_sets[a0] if sets.T_sets is not None else None, x0,
        x_sets=x_fam, u_groups=u_groups)
    sol = qp.solve(qpi)
    if sol.status == "infeasible" or (sol.status == "max_iter"
                                      and sol.primal > qp.FEAS_TOL):
        raise InfeasibleStepError(
            f"tightened initialization program has no admissible plan at step {k0}",
            k0, qpi.violated_rows(sol.x_star), "robust-init")
    v = sol.x_star
    buffer, candidate = _split_init_plan(v, m, design.N_u)
    state = ControllerState(
        plant=plant, sched=sched, design=design, mode="robust", k=k0 + 1,
        plan_buffer=buffer, candidate=candidate,
        last_prediction=plant.A @ x0 + plant.b_col(sched.sigma(k0)).ravel() * v[0],
        last_objective=sol.objective, last_solution=sol,
        warm_rows=tuple(sorted(sol.active_rows)), solved=True,
        policy=policy, sets=sets,
        E_pinv=np.linalg.pinv(np.asarray(plant.E, dtype=float)))
    return state, float(v[0])


def infer_disturbance(state: ControllerState, x_k: np.ndarray) -> np.ndarray:
    """Injected disturbance reconstructed from the one-step prediction gap."""
    if state.last_prediction is None:
        raise ControllerError("no stored prediction to infer a disturbance from")
    return np.asarray(x_k, dtype=float).ravel() - state.last_prediction


def _advance(state: ControllerState, x_k: np.ndarray, v: np.ndarray,
             sol: qp.QpSolution) -> None:
    """Apply the bookkeeping shared by the per-step controllers.

    The buffer rotates one slot group: the next channel's pending moves
    leave the buffer (they become the shifted candidate for the next
    solve), every other slot moves up, and the tail of today's own plan
    enters as the last slot.
    """
    plant, design = state.plant, state.design
    m, N_u = plant.m, design.N_u
    if m > 1:
        slots = state.plan_buffer.reshape(m - 1, N_u - 1)
        next_own = slots[0].copy()
        state.plan_buffer = np.vstack([slots[1:], v[1:][None, :]]).ravel()
        state.candidate = np.append(next_own, 0.0)
    else:
        state.candidate = np.append(v[1:], 0.0)
    state.last_prediction = (plant.A @ np.asarray(x_k, dtype=float).ravel()
                             + plant.b_col(state.sched.sigma(state.k)).ravel() * v[0])
    state.last_objective = sol.objective
    state.last_solution = sol
    state.warm_rows = tuple(sorted(sol.active_rows))
    state.solved = True
    state.k += 1


def nominal_mmpc_step(state: ControllerState, x_k: np.ndarray):
    """One fast step of the nominal controller: returns ``(move, state)``.

    Only channel ``sigma(k)`` moves; the caller applies the scalar move to
    that channel and exact zeros elsewhere.  Infeasibility raises a
    diagnostic ``InfeasibleStepError`` listing the violated rows.
    """
    x_k = np.asarray(x_k, dtype=float).ravel()
    plant, sched, design = state.plant, state.sched, state.design
    k = state.k
    N = (design.N_u - 1) * plant.m + 1
    ae = _end_phase(sched, k, N)
    qpi = qp.condense_nominal(
        plant, sched, k, design.N_u, design.q, design.r, design.F[ae],
        design.X, design.U, design.T[ae] if design.T is not None else None,
        x_k, state.plan_buffer)
    warm = tuple(r for r in state.warm_rows if r < qpi.n_rows)
    sol = qp.solve(qpi, warm=warm, x0=state.candidate)
    if sol.status != "optimal":
        raise InfeasibleStepError(
            f"program {sol.status} at step {k}",
            k, qpi.violated_rows(sol.x_star), "nominal")
    _advance(state, x_k, sol.x_star, sol)
    return float(sol.x_star[0]), state


def robust_mmpc_step(state: ControllerState, x_k: np.ndarray):
    """One fast step of the disturbance-rejecting controller.

    Infers the last disturbance from the prediction gap, corrects every
    pending move (the buffer and the shifted candidate) through the
    policy's maps, and solves the tightened program.  Failure here means
    the disturbance model or the tightened design no longer covers the
    plant, so it raises hard.
    """
    if state.mode != "robust" or state.policy is None or state.sets is None:
        raise ControllerError("state was not prepared for robust stepping")
    x_k = np.asarray(x_k, dtype=float).ravel()
    plant, sched, design = state.plant, state.sched, state.design
    policy, sets = state.policy, state.sets
    m, N_u = plant.m, design.N_u
    k = state.k
    a = sched.phase(k)

    w_hat = state.E_pinv @ infer_disturbance(state, x_k)
    if m > 1 and N_u > 1:
        slots = state.plan_buffer.reshape(m - 1, N_u - 1).copy()
        for j in range(1, m):
            for ell in range(N_u - 1):
                slots[j - 1, ell] += float((policy.M[j + ell * m][a] @ w_hat)[0])
        state.plan_buffer = slots.ravel()
    candidate = state.candidate.copy()
    for ell in range(N_u - 1):
        candidate[ell] += float((policy.M[ell * m][a] @ w_hat)[0])
    state.candidate = candidate

    N = (N_u - 1) * m + 1
    ae = _end_phase(sched, k, N)
    qpi = qp.condense_robust(
        plant, sched, k, N_u, design.q, design.r, design.F[ae],
        sets, x_k, state.plan_buffer)
    warm = tuple(r for r in state.warm_rows if r < qpi.n_rows)
    sol = qp.solve(qpi, warm=warm, x0=state.candidate)
    if sol.status != "optimal":
        raise InfeasibleStepError(
            f"tightened program {sol.status} at step {k}; the disturbance "
            "model or tightened design no longer covers the plant",
            k, qpi.violated_rows(sol.x_star), "robust")
    _advance(state, x_k, sol.x_star, sol)
    return float(sol.x_star[0]), state


def make_smpc_state(plant: DiscretePlant, design: SyncDesign,
                    mode: str = "nominal", k0: int = 0,
                    policy: TighteningPolicy | None = None,
                    sets: TightenedSets | None = None) -> SyncState:
    """Loop state for the synchronized baseline starting with a zero plan.

    Valid for a start at the origin (where the initialization program
    returns the zero plan); robust mode needs a policy built on the
    synchronized pattern plus its tightened families.
    """
    if mode not in ("nominal", "robust"):
        raise ValueError(f"unknown mode {mode!r}")
    E_pinv = None
    if mode == "robust":
        if policy is None or sets is None:
            raise DesignError("robust mode needs a policy and tightened sets")
        if policy.pattern.kind != "synchronized" \
                or policy.pattern.period != design.period:
            raise DesignError("policy pattern does not match the move period")
        if plant.E is None:
            raise DesignError("plant has no disturbance injection columns")
        E_pinv = np.linalg.pinv(np.asarray(plant.E, dtype=float))
    return SyncState(
        plant=plant, sched=Schedule(plant.m), design=design, mode=mode,
        k0=k0, k=k0,
        plan=np.zeros((design.n_inst - 1) * plant.m),
        last_prediction=np.zeros(plant.n), last_objective=None,
        policy=policy, sets=sets, E_pinv=E_pinv)


def smpc_step(state: SyncState, x_k: np.ndarray):
    """One fast step of the synchronized baseline: ``(moves, state)``.

    At a move instant every channel moves (a length-``m`` vector is
    returned); between instants the moves are exactly zero and no program
    is solved.  Constraints are enforced on the fast grid.  In robust mode
    the pending instant moves are corrected every fast step through the
    policy's maps for the step's position within the period.
    """
    x_k = np.asarray(x_k, dtype=float).ravel()
    plant, design = state.plant, state.design
    m = plant.m
    p = design.period
    a = (state.k - state.k0) % p
    state.solved = False

    if state.mode == "robust":
        w_hat = state.E_pinv @ infer_disturbance(state, x_k)
        pending = state.plan.reshape(-1, m)
        first = (p - a) % p  # fast offset of the next instant
        for ell in range(pending.shape[0]):
            pending[ell] += state.policy.M[first + ell * p][a] @ w_hat
        state.plan = pending.ravel()

    if a != 0:
        state.last_prediction = plant.A @ x_k
        state.k += 1
        return np.zeros(m), state

    N_s = design.n_inst * p
    moves = [(i * p, ch) for i in range(design.n_inst) for ch in range(1, m + 1)]
    u_groups = None
    x_fam = None
    T_set = design.T
    X_set = design.X
    if state.mode == "robust":
        sets = state.sets
        if sets.X_sets is not None:
            x_fam = lambda i: sets.X_sets[i][0]
            X_set = None
        if sets.U_sets is not None:
            u_groups = [(tuple(range(i * m, (i + 1) * m)), sets.U_sets[i * p][0], i * p)
                        for i in range(design.n_inst)]
        if sets.T_sets is not None:
            T_set = sets.T_sets[0]
    elif design.U is not None:
        u_groups = [((j,), design.U[ch - 1], step)
                    for j, (step, ch) in enumerate(moves)]
    # solves only happen at phase 0 and the horizon is a whole number of
    # periods, so the terminal phase is 0 as well
    qpi = qp.condense_all_channels(
        plant, state.sched, state.k, design.n_inst, design.q, design.r,
        design.F[0], X_set, None, T_set, x_k,
        moves=moves, N=N_s, u_groups=u_groups, x_sets=x_fam)
    warm = tuple(r for r in state.warm_rows if r < qpi.n_rows)
    candidate = np.concatenate([state.plan, np.zeros(m)])
    sol = qp.solve(qpi, warm=warm, x0=candidate)
    if sol.status != "optimal":
        raise InfeasibleStepError(
            f"synchronized program {sol.status} at step {state.k}",
            state.k, qpi.violated_rows(sol.x_star), "synchronized")
    v = sol.x_star
    du = v[:m].copy()
    state.plan = v[m:].copy()
    state.last_prediction = plant.A @ x_k + plant.B @ du
    state.last_objective = sol.objective
    state.last_solution = sol
    state.warm_rows = tuple(sorted(sol.active_rows))
    state.solved = True
    state.k += 1
    return du, state
