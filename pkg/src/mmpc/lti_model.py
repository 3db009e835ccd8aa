"""Plant models, discretization and stacked prediction matrices.

The controllers in this package drive a discrete-time linear plant whose
input channels are updated one at a time in a fixed cyclic order.  This
module owns the plant containers, zero-order-hold discretization, the
move-increment (delta-u) reformulation and the stacked prediction
matrices with their per-channel column grouping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ContinuousPlant",
    "DiscretePlant",
    "Schedule",
    "PredictionMatrices",
    "expm",
    "discretize_zoh",
    "augment_delta_u",
    "is_stabilizable",
    "build_prediction",
]


@dataclass(frozen=True)
class ContinuousPlant:
    """Continuous-time plant ``xdot = A_c x + B_c u (+ E_c w)``, ``y = C x``."""

    A_c: np.ndarray
    B_c: np.ndarray
    C: np.ndarray
    E_c: np.ndarray | None = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A_c, dtype=float))
        B = np.atleast_2d(np.asarray(self.B_c, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n) or B.shape[0] != n or C.shape[1] != n:
            raise ValueError("inconsistent continuous plant dimensions")
        object.__setattr__(self, "A_c", A)
        object.__setattr__(self, "B_c", B)
        object.__setattr__(self, "C", C)
        if self.E_c is not None:
            E = np.atleast_2d(np.asarray(self.E_c, dtype=float))
            if E.shape[0] != n:
                raise ValueError("E_c row count must match the state dimension")
            object.__setattr__(self, "E_c", E)

    @property
    def n(self) -> int:
        return self.A_c.shape[0]

    @property
    def m(self) -> int:
        return self.B_c.shape[1]


@dataclass(frozen=True)
class DiscretePlant:
    """Discrete-time plant ``x+ = A x + B u + E w`` with per-channel columns.

    ``B`` is ``n x m``; channel ``j`` (1-based) acts through column
    ``B[:, j-1]``.  ``delta_form`` records whether the state was already
    augmented so that inputs are move increments (see
    :func:`augment_delta_u`); the flag guards against double augmentation.
    """

    A: np.ndarray
    B: np.ndarray
    E: np.ndarray = None
    dt: float = 1.0
    C: np.ndarray | None = None
    delta_form: bool = False

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n) or B.shape[0] != n:
            raise ValueError("inconsistent discrete plant dimensions")
        if not (np.isfinite(A).all() and np.isfinite(B).all()):
            raise ValueError("plant matrices must be finite")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        E = self.E
        if E is None:
            E = np.zeros((n, 0))
        E = np.atleast_2d(np.asarray(E, dtype=float))
        if E.shape[0] != n:
            raise ValueError("E row count must match the state dimension")
        object.__setattr__(self, "E", E)
        if self.C is not None:
            C = np.atleast_2d(np.asarray(self.C, dtype=float))
            if C.shape[1] != n:
                raise ValueError("C column count must match the state dimension")
            object.__setattr__(self, "C", C)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def n_w(self) -> int:
        return self.E.shape[1]

    def b_col(self, channel: int) -> np.ndarray:
        """Input column for 1-based ``channel`` as an ``(n, 1)`` matrix."""
        if not 1 <= channel <= self.m:
            raise ValueError(f"channel must be in 1..{self.m}")
        return self.B[:, channel - 1 : channel]

    @property
    def B_cols(self) -> list:
        return [self.b_col(j) for j in range(1, self.m + 1)]


@dataclass(frozen=True)
class Schedule:
    """Cyclic single-channel update order over ``m`` channels.

    ``offset`` rotates which channel moves first: the channel updated at
    step ``k`` is ``((k + offset) mod m) + 1``.
    """

    m: int
    offset: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        object.__setattr__(self, "offset", int(self.offset) % self.m)

    def sigma(self, k: int) -> int:
        """1-based channel updated at step ``k``."""
        return (k + self.offset) % self.m + 1

    def phase(self, k: int) -> int:
        """0-based phase index at step ``k`` (``sigma(k) - 1``)."""
        return (k + self.offset) % self.m

    def successor(self, phase: int) -> int:
        """0-based phase one step later."""
        return (phase + 1) % self.m


# ---------------------------------------------------------------------------
# Matrix exponential (scaling and squaring with a truncated series)
# ---------------------------------------------------------------------------


def expm(M: np.ndarray) -> np.ndarray:
    """Matrix exponential via scaling-and-squaring of a truncated series.

    Adequate for the well-scaled plant matrices handled here; validated in
    the tests against closed forms and a series reference.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    n = M.shape[0]
    norm = np.linalg.norm(M, 1)
    s = max(0, int(np.ceil(np.log2(norm))) + 1) if norm > 0 else 0
    A = M / (2.0**s)
    X = np.eye(n)
    term = np.eye(n)
    for k in range(1, 40):
        term = term @ A / k
        X = X + term
        if np.linalg.norm(term, 1) <= 1e-18 * max(1.0, np.linalg.norm(X, 1)):
            break
    for _ in range(s):
        X = X @ X
    return X


def discretize_zoh(plant: ContinuousPlant, dt: float) -> DiscretePlant:
    """Zero-order-hold discretization using one augmented matrix exponential.

    The exponential of ``[[A_c, [B_c E_c]], [0, 0]] * dt`` yields the
    discrete ``A`` in the upper-left block and the held-input maps in the
    upper-right block.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    n, m = plant.n, plant.m
    Ec = plant.E_c if plant.E_c is not None else np.zeros((n, 0))
    n_in = m + Ec.shape[1]
    M = np.zeros((n + n_in, n + n_in))
    M[:n, :n] = plant.A_c
    M[:n, n:] = np.hstack([plant.B_c, Ec])
    Phi = expm(M * dt)
    A = Phi[:n, :n]
    BE = Phi[:n, n:]
    B = BE[:, :m]
    E = BE[:, m:] if Ec.shape[1] else None
    return DiscretePlant(A=A, B=B, E=E, dt=dt, C=plant.C.copy())


def augment_delta_u(plant: DiscretePlant) -> DiscretePlant:
    """Rewrite a plant so its inputs are per-channel move increments.

    The held input levels become extra states::

        [x+; u+] = [[A, B], [0, I]] [x; u] + [B_j; e_j] du_j

    Disturbances keep acting on the original states only.  Raises if the
    plant is already in delta form.
    """
    if plant.delta_form:
        raise ValueError("plant is already in delta-input form")
    n, m = plant.n, plant.m
    A_aug = np.block([[plant.A, plant.B], [np.zeros((m, n)), np.eye(m)]])
    B_aug = np.vstack([plant.B, np.eye(m)])
    E_aug = np.vstack([plant.E, np.zeros((m, plant.n_w))]) if plant.n_w else None
    C_aug = np.hstack([plant.C, np.zeros((plant.C.shape[0], m))]) if plant.C is not None else None
    return DiscretePlant(A=A_aug, B=B_aug, E=E_aug, dt=plant.dt, C=C_aug, delta_form=True)


def is_stabilizable(A: np.ndarray, B: np.ndarray, tol_scale: float = 1e-9) -> bool:
    """Eigenvector (PBH) stabilizability test.

    For every eigenvalue with ``|lambda| >= 1`` the matrix ``[A - lambda I, B]``
    must have full row rank; rank is measured by SVD with threshold
    ``tol_scale * max(||A||, ||B||)``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n = A.shape[0]
    thresh = tol_scale * max(np.linalg.norm(A, 2), np.linalg.norm(B, 2), 1.0)
    for lam in np.linalg.eigvals(A):
        if abs(lam) >= 1.0 - 1e-12:
            M = np.hstack([A - lam * np.eye(n), B])
            rank = int((np.linalg.svd(M, compute_uv=False) > thresh).sum())
            if rank < n:
                return False
    return True


# ---------------------------------------------------------------------------
# Stacked prediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionMatrices:
    """Stacked ``N``-step prediction anchored at step ``k``.

    ``X = Phi x_k + G dU`` where ``dU`` holds the single move of each of the
    ``N`` steps in time order.  ``group_columns[i]`` lists the columns of
    ``G`` belonging to the channel that moves ``i`` steps after the anchor
    (``i = 0`` is the channel solving now); together the groups partition
    ``range(N)``.
    """

    Phi: np.ndarray
    G: np.ndarray
    group_columns: list
    k: int
    N: int

    def g(self, i: int) -> np.ndarray:
        """Column block of group ``i`` (1-based, as in ``g_1 .. g_m``)."""
        return self.G[:, self.group_columns[i - 1]]


def build_prediction(plant: DiscretePlant, sched: Schedule, k: int, N: int) -> PredictionMatrices:
    """Build ``Phi``, ``G`` and the per-channel column grouping.

    Column ``j`` of ``G`` is ``[0; ...; B_{s(k+j)}; A B_{s(k+j)}; ...]`` with
    the input column first reaching the state at block row ``j``.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if plant.m != sched.m:
        raise ValueError("schedule channel count does not match the plant")
    n, m = plant.n, plant.m
    Phi = np.empty((N * n, n))
    G = np.zeros((N * n, N))
    # power rows: block i holds A^(i+1)
    P = np.eye(n)
    for i in range(N):
        P = plant.A @ P
        Phi[i * n : (i + 1) * n] = P
    for j in range(N):
        col = plant.b_col(sched.sigma(k + j)).ravel()
        v = col
        for i in range(j, N):
            G[i * n : (i + 1) * n, j] = v
            if i + 1 < N:
                v = plant.A @ v
    # group 1: the solving channel's moves at 0, m, 2m, ...; group i >= 2:
    # moves at i-1, i-1+m, ... (one fewer column when N = (Nu-1)m + 1).
    groups = []
    for i in range(m):
        if i >= N:
            groups.append(np.array([], dtype=int))
            continue
        groups.append(np.arange(i, N, m))
    return PredictionMatrices(Phi=Phi, G=G, group_columns=groups, k=k, N=N)
