"""Periodic LQ machinery: Riccati recursions, terminal costs, cost matrices.

A plant whose channels move one-per-step in cyclic order is a periodic
linear system, so its unconstrained LQ treatment rests on a discrete
periodic Riccati equation (one value matrix per phase of the cycle) and on
periodic Lyapunov equations for evaluating the closed-loop cost of a given
periodic feedback.  This module provides:

* ``solve_dpre`` / ``periodic_gains`` / ``terminal_cost`` -- the periodic
  Riccati family used both as terminal weight and as terminal feedback;
* ``build_augmented`` -- the plant extended with the register of moves that
  were planned earlier but not applied yet;
* ``unconstrained_mmpc_gains`` -- periodic LQ gains on the augmented system;
* ``mmpc_qp_law_gains`` -- the explicit linear law of the constrained
  controller when no constraint is active (a function of plant state and
  plan register);
* ``mmpc_cost_matrices`` / ``compare_designs`` -- closed-loop quadratic cost
  matrices of a periodic feedback, and eigenvalue comparison of two designs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lti_model import DiscretePlant, Schedule, build_prediction

__all__ = [
    "PeriodicRiccati",
    "AugmentedSystem",
    "CostMatrices",
    "solve_dpre",
    "periodic_gains",
    "terminal_cost",
    "dpre_residual",
    "solve_dlyap",
    "build_augmented",
    "unconstrained_mmpc_gains",
    "mmpc_qp_law_gains",
    "mmpc_cost_matrices",
    "compare_designs",
    "step_disturbance_state",
]

# Added only when an input-weight block is numerically singular (can happen
# on the first backward sweeps of the augmented recursion, whose register
# states initially carry no cost).
_RICCATI_JITTER = 1e-12


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def _solve_spd(S: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``S x = rhs`` for symmetric positive (semi)definite ``S``.

    Falls back to a tiny diagonal regularization when ``S`` is numerically
    singular.
    """
    S = _sym(S)
    try:
        c = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        c = np.linalg.cholesky(S + _RICCATI_JITTER * np.eye(S.shape[0]))
    y = np.linalg.solve(c, rhs)
    return np.linalg.solve(c.T, y)


@dataclass(frozen=True)
class PeriodicRiccati:
    """Converged periodic Riccati family.

    ``P[a]`` is the value matrix that applies at steps whose 0-based phase
    is ``a`` (i.e. channel ``a+1`` moves at such steps).  ``sweeps`` is the
    number of backward sweeps used.
    """

    P: list
    sweeps: int


def _dpre_core(A, B_per_phase, q, r_per_phase, tol, max_sweeps):
    """Backward fixed-phase sweeps of the periodic Riccati recursion."""
    m = len(B_per_phase)
    n = A.shape[0]
    P = [q.copy() for _ in range(m)]
    for sweep in range(1, max_sweeps + 1):
        delta = 0.0
        for a in reversed(range(m)):
            Pn = P[(a + 1) % m]
            Ba = B_per_phase[a]
            S = Ba.T @ Pn @ Ba + r_per_phase[a]
            K = _solve_spd(S, Ba.T @ Pn @ A)
            Pnew = _sym(A.T @ Pn @ A - A.T @ Pn @ Ba @ K + q)
            delta = max(delta, np.abs(Pnew - P[a]).max())
            P[a] = Pnew
        if delta <= tol:
            return P, sweep
    raise RuntimeError(
        f"periodic Riccati recursion did not converge in {max_sweeps} sweeps "
        f"(last change {delta:.3e}); check stabilizability/detectability"
    )


def solve_dpre(
    plant: DiscretePlant,
    sched: Schedule,
    q: np.ndarray,
    r: float,
    tol: float = 1e-11,
    max_sweeps: int = 10000,
) -> PeriodicRiccati:
    """Solve the periodic Riccati equation of the one-channel-per-step plant.

    ``q`` is the (PSD) state weight and ``r > 0`` the scalar weight on each
    move.  Returns one value matrix per phase; phase ``a`` corresponds to
    steps where channel ``a+1`` moves.
    """
    q = _sym(np.atleast_2d(np.asarray(q, dtype=float)))
    if q.shape != (plant.n, plant.n):
        raise ValueError("q must be n x n")
    if min(np.linalg.eigvalsh(q)) < -1e-10:
        raise ValueError("q must be positive semidefinite")
    if not r > 0:
        raise ValueError("r must be positive")
    if plant.m != sched.m:
        raise ValueError("schedule does not match the plant")
    B = [plant.b_col(a + 1) for a in range(plant.m)]
    rr = [np.array([[float(r)]]) for _ in range(plant.m)]
    P, sweeps = _dpre_core(plant.A, B, q, rr, tol, max_sweeps)
    return PeriodicRiccati(P=P, sweeps=sweeps)


def periodic_gains(plant: DiscretePlant, sched: Schedule, ric: PeriodicRiccati, r: float) -> list:
    """Per-phase LQ gain rows ``K[a]`` (apply the move as ``-K[a] @ x``).

    Phase ``a`` uses the successor-phase value matrix, matching the
    backward recursion that produced ``ric``.
    """
    m = plant.m
    out = []
    for a in range(m):
        Pn = ric.P[(a + 1) % m]
        Ba = plant.b_col(a + 1)
        S = Ba.T @ Pn @ Ba + r
        out.append(_solve_spd(S, Ba.T @ Pn @ plant.A))
    return out


def terminal_cost(ric: PeriodicRiccati, phase: int) -> np.ndarray:
    """Terminal weight matrix attached to a prediction ending at ``phase``."""
    return ric.P[phase % len(ric.P)].copy()


def dpre_residual(plant: DiscretePlant, ric: PeriodicRiccati, q: np.ndarray, r: float) -> float:
    """Max-norm residual of the periodic Riccati fixed point (for tests)."""
    m = len(ric.P)
    worst = 0.0
    for a in range(m):
        Pn = ric.P[(a + 1) % m]
        Ba = plant.b_col(a + 1)
        S = Ba.T @ Pn @ Ba + r
        K = _solve_spd(S, Ba.T @ Pn @ plant.A)
        res = plant.A.T @ Pn @ plant.A - plant.A.T @ Pn @ Ba @ K + q - ric.P[a]
        worst = max(worst, np.abs(res).max())
    return worst


def solve_dlyap(Psi: np.ndarray, Q: np.ndarray, tol: float = 1e-12, max_doublings: int = 200) -> np.ndarray:
    """Solve ``P = Psi' P Psi + Q`` by doubling.

    Accumulates ``sum_j (Psi^j)' Q Psi^j`` with repeated squaring; requires
    the spectral radius of ``Psi`` to be below one.
    """
    S = _sym(np.asarray(Q, dtype=float)).copy()
    T = np.asarray(Psi, dtype=float).copy()
    for _ in range(max_doublings):
        upd = T.T @ S @ T
        S = _sym(S + upd)
        T = T @ T
        if np.linalg.norm(upd, "fro") <= tol * max(1.0, np.linalg.norm(S, "fro")):
            return S
    raise RuntimeError("Lyapunov doubling did not converge; closed loop may be unstable")


# ---------------------------------------------------------------------------
# Augmented (plant + plan register) system
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentedSystem:
    """Plant extended with the register of pending planned moves.

    State ``xi = [x; p]`` where ``p`` stacks the ``m - 1`` pending move
    groups, each of length ``N_u - 1`` (group ``j`` holds the moves that
    execute ``j, j + m, ...`` steps ahead).  The decision vector of one
    step has length ``N_u``: the move applied now followed by the solving
    channel's future moves, which refill the last register group.

    ``K_tilde[a]``, when attached, is the per-phase feedback of the full
    decision vector: ``v = K_tilde[a] @ xi`` (note the plus convention).
    """

    A_tilde: np.ndarray
    B_tilde: list
    q_tilde: np.ndarray | None
    r_tilde: np.ndarray | None
    K_tilde: list | None
    n_x: int
    m: int
    N_u: int

    @property
    def buffer_dim(self) -> int:
        return (self.m - 1) * (self.N_u - 1)

    @property
    def dim(self) -> int:
        return self.n_x + self.buffer_dim

    def closed_loop(self) -> list:
        """Per-phase closed-loop maps ``A_tilde + B_tilde[a] K_tilde[a]``."""
        if self.K_tilde is None:
            raise ValueError("no feedback attached to the augmented system")
        return [self.A_tilde + self.B_tilde[a] @ self.K_tilde[a] for a in range(self.m)]


def build_augmented(
    plant: DiscretePlant,
    sched: Schedule,
    N_u: int,
    q: np.ndarray | None = None,
    r: float | None = None,
    feedback: list | None = None,
) -> AugmentedSystem:
    """Assemble the plant-plus-plan-register system for ``N_u`` moves per channel.

    When ``q``/``r`` are given, the corresponding augmented weights are
    attached: the state weight acts on the plant block only and the move
    weight on the first (applied) entry of the decision vector only.
    """
    if N_u < 1:
        raise ValueError("N_u must be >= 1")
    if plant.m != sched.m:
        raise ValueError("schedule does not match the plant")
    n, m = plant.n, plant.m
    s = N_u - 1
    d_b = (m - 1) * s
    A_u = np.zeros((d_b, d_b))
    for j in range(m - 2):
        A_u[j * s : (j + 1) * s, (j + 1) * s : (j + 2) * s] = np.eye(s)
    B_u = np.zeros((d_b, s))
    if d_b:
        B_u[(m - 2) * s :, :] = np.eye(s)
    A_tilde = np.block([[plant.A, np.zeros((n, d_b))], [np.zeros((d_b, n)), A_u]])
    B_tilde = []
    for a in range(m):
        Bt = np.zeros((n + d_b, N_u))
        Bt[:n, 0] = plant.B[:, a]
        Bt[n:, 1:] = B_u
        B_tilde.append(Bt)
    q_t = r_t = None
    if q is not None:
        q = np.atleast_2d(np.asarray(q, dtype=float))
        q_t = np.zeros((n + d_b, n + d_b))
        q_t[:n, :n] = _sym(q)
    if r is not None:
        r_t = np.zeros((N_u, N_u))
        r_t[0, 0] = float(r)
    if feedback is not None:
        feedback = [np.atleast_2d(np.asarray(K, dtype=float)) for K in feedback]
        for K in feedback:
            if K.shape != (N_u, n + d_b):
                raise ValueError("feedback gains must be N_u x (n + register)")
    return AugmentedSystem(
        A_tilde=A_tilde, B_tilde=B_tilde, q_tilde=q_t, r_tilde=r_t,
        K_tilde=feedback, n_x=n, m=m, N_u=N_u,
    )


def unconstrained_mmpc_gains(
    aug: AugmentedSystem,
    q_tilde: np.ndarray | None = None,
    r_tilde: np.ndarray | None = None,
    tol: float = 1e-11,
    max_sweeps: int = 10000,
) -> list:
    """Periodic LQ gains on the augmented system (decision ``v = K[a] @ xi``).

    Solves the periodic Riccati recursion with the augmented weights and
    returns one ``N_u x dim`` gain per phase.  Along closed-loop runs
    started from a full-horizon solve these gains agree with the
    constrained controller while no constraint is active.
    """
    q_t = aug.q_tilde if q_tilde is None else np.asarray(q_tilde, dtype=float)
    r_t = aug.r_tilde if r_tilde is None else np.asarray(r_tilde, dtype=float)
    if q_t is None or r_t is None:
        raise ValueError("augmented weights are required")
    rr = [r_t for _ in range(aug.m)]
    P, _ = _dpre_core(aug.A_tilde, aug.B_tilde, _sym(q_t), rr, tol, max_sweeps)
    gains = []
    for a in range(aug.m):
        Pn = P[(a + 1) % aug.m]
        Ba = aug.B_tilde[a]
        S = Ba.T @ Pn @ Ba + r_t
        gains.append(-_solve_spd(S, Ba.T @ Pn @ aug.A_tilde))
    return gains


def _stacked_state_weight(q: np.ndarray, P_F: np.ndarray, N: int) -> np.ndarray:
    """Block-diagonal weight on stacked states 1..N (terminal block last)."""
    n = q.shape[0]
    W = np.zeros((N * n, N * n))
    for i in range(N - 1):
        W[i * n : (i + 1) * n, i * n : (i + 1) * n] = q
    W[(N - 1) * n :, (N - 1) * n :] = P_F
    return W


def mmpc_qp_law_gains(
    plant: DiscretePlant,
    sched: Schedule,
    N_u: int,
    q: np.ndarray,
    r: float,
    ric: PeriodicRiccati | None = None,
) -> list:
    """Explicit per-phase law of the constraint-free receding-horizon problem.

    At a step of phase ``a`` the controller minimizes the horizon cost over
    its own ``N_u`` moves with the other channels' pending moves frozen at
    the register contents; eliminating the quadratic gives a linear map
    ``v = K[a] @ [x; p]``.  The terminal weight is the periodic Riccati
    matrix of the phase where the horizon ends (one past ``a``, since the
    horizon length is ``(N_u - 1) m + 1``).
    """
    m = plant.m
    N = (N_u - 1) * m + 1
    q = _sym(np.atleast_2d(np.asarray(q, dtype=float)))
    if ric is None:
        ric = solve_dpre(plant, sched, q, r)
    gains = []
    for a in range(m):
        k = (a - sched.offset) % m  # any step whose phase is a
        pred = build_prediction(plant, sched, k, N)
        P_F = ric.P[sched.successor(a)]
        W = _stacked_state_weight(q, P_F, N)
        G1 = pred.g(1)
        Gbuf = (
            np.hstack([pred.g(i) for i in range(2, m + 1)])
            if m > 1 and N_u > 1
            else np.zeros((N * plant.n, 0))
        )
        H = G1.T @ W @ G1 + r * np.eye(N_u)
        rhs = G1.T @ W @ np.hstack([pred.Phi, Gbuf])
        gains.append(-np.linalg.solve(_sym(H), rhs))
    return gains


@dataclass(frozen=True)
class CostMatrices:
    """Closed-loop quadratic cost of a periodic feedback on the augmented system.

    For a run started at a step of phase ``a`` from state ``xi``, the
    accumulated cost (states counted from the next step on, moves from the
    current step on) is ``xi' P_total[a] xi``; ``P_state``/``P_move`` split
    it by term.  ``hat(a)`` is the plant-block restriction, the matrix that
    prices a plant-only initial condition with an empty plan register.
    """

    P_state: list
    P_move: list
    P_total: list
    n_x: int
    spectral_radius: float

    def hat(self, a: int) -> np.ndarray:
        return self.P_total[a][: self.n_x, : self.n_x].copy()


def mmpc_cost_matrices(aug: AugmentedSystem) -> CostMatrices:
    """Evaluate the quadratic closed-loop cost of the attached feedback.

    Builds the per-phase one-period transition (monodromy) matrices, checks
    that the loop is stable, and solves one periodic Lyapunov equation per
    phase for the state-cost and move-cost terms.
    """
    if aug.K_tilde is None:
        raise ValueError("mmpc_cost_matrices needs an AugmentedSystem with feedback")
    if aug.q_tilde is None or aug.r_tilde is None:
        raise ValueError("mmpc_cost_matrices needs augmented weights")
    m = aug.m
    Phi = aug.closed_loop()
    P_state, P_move, P_total = [], [], []
    rho_max = 0.0
    for a in range(m):
        # partial products PP[j] maps xi_k -> xi_{k+j} for an anchor of phase a
        PP = [np.eye(aug.dim)]
        for j in range(m):
            PP.append(Phi[(a + j) % m] @ PP[-1])
        Psi = PP[m]
        rho = max(abs(np.linalg.eigvals(Psi)))
        rho_max = max(rho_max, rho)
        if rho >= 1.0 - 1e-12:
            raise RuntimeError(
                f"closed loop is not stable (spectral radius {rho:.6f} at phase {a})"
            )
        Qsum = np.zeros((aug.dim, aug.dim))
        Rsum = np.zeros((aug.dim, aug.dim))
        for j in range(m):
            Sx = PP[j + 1]  # states are costed from one step after the anchor
            Qsum += Sx.T @ aug.q_tilde @ Sx
            Sv = aug.K_tilde[(a + j) % m] @ PP[j]  # moves from the anchor itself
            Rsum += Sv.T @ aug.r_tilde @ Sv
        P_state.append(solve_dlyap(Psi, Qsum))
        P_move.append(solve_dlyap(Psi, Rsum))
        P_total.append(_sym(P_state[-1] + P_move[-1]))
    return CostMatrices(
        P_state=P_state, P_move=P_move, P_total=P_total,
        n_x=aug.n_x, spectral_radius=rho_max,
    )


def compare_designs(hat_P_a: np.ndarray, hat_P_b: np.ndarray) -> np.ndarray:
    """Ascending eigenvalues of the (symmetrized) cost-matrix difference."""
    D = _sym(np.asarray(hat_P_a, dtype=float) - np.asarray(hat_P_b, dtype=float))
    return np.sort(np.linalg.eigvalsh(D))


def step_disturbance_state(plant: DiscretePlant, d: np.ndarray) -> np.ndarray:
    """State displacement equivalent to a step of size ``d`` at the plant inputs.

    For a move-increment plant this is ``B @ d``: the state reached one
    step after an unmodelled input step ``d`` from rest.
    """
    d = np.asarray(d, dtype=float).ravel()
    if d.size != plant.m:
        raise ValueError("d must have one entry per input channel")
    return plant.B @ d
