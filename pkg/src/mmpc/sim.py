"""Closed-loop simulation: example plants, disturbances, metrics, traces.

The scenario runner steps the true plant (including the disturbance
injection) against one of the four controller modes, records a full trace
with per-solve statistics, and reduces it to a metrics table.  Runs are
bit-reproducible for a fixed scenario and seed; wall-clock numbers are the
only nondeterministic fields.
"""
from __future__ import annotations

import csv
import importlib.resources
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import controller as ctrl
from .lti_model import (
    ContinuousPlant,
    DiscretePlant,
    Schedule,
    augment_delta_u,
    discretize_zoh,
)
from .polytope import HPolytope, box


# ---------------------------------------------------------------------------
# example plants


def spring_mass_plant() -> ContinuousPlant:
    """Chain of four unit-stiffness springs between four 5-unit masses.

    States are the four positions followed by the four velocities; each
    mass takes a force input; the disturbance force acts on mass 4; the
    output is the position of mass 1.  Both chain ends are free, so the
    rigid-body (total momentum) mode is present.
    """
    n_m = 4
    K = np.zeros((n_m, n_m))
    for i in range(n_m):
        if i > 0:
            K[i, i] -= 1.0
            K[i, i - 1] += 1.0
        if i < n_m - 1:
            K[i, i] -= 1.0
            K[i, i + 1] += 1.0
    A_c = np.zeros((2 * n_m, 2 * n_m))
    A_c[:n_m, n_m:] = np.eye(n_m)
    A_c[n_m:, :n_m] = K / 5.0
    B_c = np.vstack([np.zeros((n_m, n_m)), np.eye(n_m) / 5.0])
    E_c = B_c[:, 3:4].copy()
    C = np.zeros((1, 2 * n_m))
    C[0, 0] = 1.0
    return ContinuousPlant(A_c, B_c, C, E_c)


def tito_plant() -> ContinuousPlant:
    """Two-input two-output plant of four first-order lags.

    Transfer matrix [[1/(7s+1), 1/(3s+1)], [2/(8s+1), 1/(4s+1)]], realized
    with one state per entry (diagonal lag realization).
    """
    taus = (7.0, 3.0, 8.0, 4.0)
    gains = (1.0, 1.0, 2.0, 1.0)
    A_c = np.diag([-1.0 / t for t in taus])
    B_c = np.zeros((4, 2))
    for i, (t, g) in enumerate(zip(taus, gains)):
        B_c[i, i % 2] = g / t
    C = np.array([[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]])
    return ContinuousPlant(A_c, B_c, C)


def tito_velocity_form(dt: float) -> DiscretePlant:
    """Velocity-form augmentation of the lag plant: state [dx; y], input du.

    Natively in move-increment form (no extra level states), which is the
    shape the cost-comparison study runs on.
    """
    p = tito_plant()
    d = discretize_zoh(p, dt)
    C = p.C
    n = d.n
    Av = np.block([[d.A, np.zeros((n, C.shape[0]))], [C @ d.A, np.eye(C.shape[0])]])
    Bv = np.vstack([d.B, C @ d.B])
    Cv = np.hstack([np.zeros((C.shape[0], n)), np.eye(C.shape[0])])
    return DiscretePlant(A=Av, B=Bv, dt=dt, C=Cv, delta_form=True)


def surrogate_aircraft_plant() -> ContinuousPlant:
    """Stable two-input longitudinal surrogate (short-period plus thrust).

    Stands in for the unavailable A-7A matrices: four states with the
    second one the regulated variable, two actuators, disturbances entering
    through the same columns as the controls.
    """
    A_c = np.array([
        [-0.10, 0.05, 0.00, -0.20],
        [0.05, -0.70, 0.90, 0.00],
        [0.00, -3.50, -1.00, -0.30],
        [0.00, 0.00, 1.00, -0.05],
    ])
    B_c = np.array([
        [0.00, 1.20],
        [-0.60, 0.15],
        [-3.00, 0.00],
        [0.00, 0.00],
    ])
    C = np.array([[0.0, 1.0, 0.0, 0.0]])
    return ContinuousPlant(A_c, B_c, C, B_c.copy())


_BUILTIN_CONTINUOUS = {
    "spring_mass": spring_mass_plant,
    "tito": tito_plant,
    "surrogate_aircraft": surrogate_aircraft_plant,
}


# ---------------------------------------------------------------------------
# disturbance profiles


@dataclass(frozen=True)
class PulseDisturbance:
    """Constant vector between two times (inclusive start, exclusive end)."""

    start_s: float
    end_s: float
    magnitude: np.ndarray

    def sequence(self, n_steps: int, dt: float, seed=None) -> np.ndarray:
        mag = np.atleast_1d(np.asarray(self.magnitude, dtype=float))
        out = np.zeros((n_steps, mag.size))
        for k in range(n_steps):
            t = k * dt
            if self.start_s <= t < self.end_s:
                out[k] = mag
        return out


@dataclass(frozen=True)
class RandomDisturbance:
    """Vertex-biased i.i.d. samples from a box-shaped bound.

    Each step draws a vertex of the box with probability one half (to
    stress the constraints) and a uniform interior point otherwise.
    """

    W: HPolytope
    seed: int | None = None

    def sequence(self, n_steps: int, dt: float, seed=None) -> np.ndarray:
        if self.W.bounds is None:
            raise ValueError("random disturbance sampling needs a box-shaped bound")
        lo, hi = self.W.bounds
        use = self.seed if self.seed is not None else seed
        rng = np.random.default_rng(use)
        out = np.empty((n_steps, lo.size))
        for k in range(n_steps):
            if rng.random() < 0.5:
                pick = rng.integers(0, 2, size=lo.size)
                out[k] = np.where(pick == 1, hi, lo)
            else:
                out[k] = rng.uniform(lo, hi)
        return out


@dataclass(frozen=True)
class InputStepDisturbance:
    """Unmodelled input step, folded into the initial state.

    For a move-increment plant a sustained step ``d`` at the plant inputs
    is equivalent to starting one step later from ``B @ d``; the runner
    applies that displacement and injects nothing afterwards.
    """

    magnitude: np.ndarray

    def sequence(self, n_steps: int, dt: float, seed=None) -> np.ndarray:
        return np.zeros((n_steps, 0))

    def initial_state(self, plant: DiscretePlant) -> np.ndarray:
        return plant.B @ np.asarray(self.magnitude, dtype=float).ravel()


def pulse_disturbance(start_s: float, end_s: float, magnitude) -> PulseDisturbance:
    if not end_s >= start_s:
        raise ValueError("pulse must end at or after its start")
    return PulseDisturbance(start_s, end_s, np.atleast_1d(np.asarray(magnitude, float)))


def bounded_random_disturbance(W: HPolytope, seed: int | None = None) -> RandomDisturbance:
    return RandomDisturbance(W, seed)


# ---------------------------------------------------------------------------
# scenario description


@dataclass(frozen=True)
class TighteningSpec:
    """Parameters of the windowed min-norm recovery policy."""

    window: int | None = None
    reg: float = 1e-8
    w_output: float = 1.0
    w_levels: float = 1.0
    w_other: float = 1.0


@dataclass(frozen=True)
class SetsSpec:
    """Constraint-set description on the simulated (augmented) state.

    ``output_abs_limit`` bounds each plant output symmetrically,
    ``level_abs_limit`` bounds the held input levels (delta-u-augmented
    plants only), ``x_rows`` adds explicit halfspace rows, ``u_abs_limit``
    bounds each move increment, and ``w_box`` is the disturbance bound used
    for tightening and random sampling.
    """

    output_abs_limit: float | None = None
    level_abs_limit: float | None = None
    x_rows: tuple | None = None          # (A, b) on the augmented state
    u_abs_limit: float | None = None
    w_box: tuple | None = None           # (lo, hi)
    tightening: TighteningSpec | None = None


@dataclass(frozen=True)
class ControllerSpec:
    mode: str                            # nominal-mmpc | robust-mmpc | nominal-smpc | robust-smpc
    N_u: int
    q: np.ndarray
    r: float
    terminal_weight: object = "zero"     # "zero" | "dpre" | matrix
    terminal_set: object = "origin"      # "origin" | None
    sets: SetsSpec | None = None


@dataclass(frozen=True)
class Scenario:
    name: str
    plant: object                        # builtin name | ContinuousPlant | DiscretePlant
    dt: float
    controller: ControllerSpec
    disturbance: object = None
    duration_s: float = 0.0
    seed: int = 0

    def __post_init__(self):
        steps = self.duration_s / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("duration must be a whole number of steps")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration_s / self.dt))


MODES = ("nominal-mmpc", "robust-mmpc", "nominal-smpc", "robust-smpc")


def build_plant(scn: Scenario) -> DiscretePlant:
    """Resolve the scenario's plant into the discrete move-increment model."""
    src = scn.plant
    if isinstance(src, str):
        if src == "tito_velocity":
            return tito_velocity_form(scn.dt)
        if src not in _BUILTIN_CONTINUOUS:
            raise ValueError(f"unknown builtin plant {src!r}")
        src = _BUILTIN_CONTINUOUS[src]()
    if isinstance(src, ContinuousPlant):
        return augment_delta_u(discretize_zoh(src, scn.dt))
    if isinstance(src, DiscretePlant):
        if not src.delta_form:
            return augment_delta_u(src)
        return src
    raise TypeError("plant must be a builtin name or a plant object")


def _phys_dim(plant: DiscretePlant) -> int:
    """States that are not held-level registers.

    augment_delta_u puts the level block last with an identity footprint in
    B; native delta-form plants (no such footprint) have no level states.
    """
    m = plant.m
    if plant.n > m and np.allclose(plant.B[-m:], np.eye(m)):
        return plant.n - m
    return plant.n


# ---------------------------------------------------------------------------
# controller assembly


@dataclass(eq=False)
class ControllerRig:
    """A ready-to-step controller plus the design artifacts behind it."""

    mode: str
    plant: DiscretePlant
    sched: Schedule
    design: object
    state: object
    decision_vars: int
    policy: object = None
    sets_built: object = None
    X: HPolytope | None = None
    U_per_channel: tuple | None = None
    W: HPolytope | None = None

    def step(self, x):
        if self.mode == "nominal-mmpc":
            du, self.state = ctrl.nominal_mmpc_step(self.state, x)
        elif self.mode == "robust-mmpc":
            du, self.state = ctrl.robust_mmpc_step(self.state, x)
        else:
            vec, self.state = ctrl.smpc_step(self.state, x)
            return vec, self.state.solved
        vec = np.zeros(self.plant.m)
        vec[self.sched.sigma(self.state.k - 1) - 1] = du
        return vec, True


def _state_rows(plant: DiscretePlant, spec: SetsSpec, n_phys: int):
    """Assemble the halfspace description of the state set, or None."""
    rows, offs = [], []
    n = plant.n
    if spec.output_abs_limit is not None:
        if plant.C is None:
            raise ValueError("output limit given but the plant has no output map")
        for crow in plant.C:
            rows += [crow, -crow]
            offs += [spec.output_abs_limit] * 2
    if spec.level_abs_limit is not None:
        if n_phys >= n:
            raise ValueError("level limit given but the plant has no level states")
        for j in range(n_phys, n):
            e = np.zeros(n)
            e[j] = 1.0
            rows += [e, -e]
            offs += [spec.level_abs_limit] * 2
    if spec.x_rows is not None:
        A, b = spec.x_rows
        rows += list(np.atleast_2d(np.asarray(A, dtype=float)))
        offs += list(np.asarray(b, dtype=float).ravel())
    if not rows:
        return None
    return HPolytope(np.vstack(rows), np.array(offs))


def _margin_rows(plant: DiscretePlant, spec: TighteningSpec, n_phys: int):
    rows = []
    if plant.C is not None:
        for crow in plant.C:
            rows.append((crow, spec.w_output))
    eye = np.eye(plant.n)
    for j in range(n_phys):
        rows.append((eye[j], spec.w_other))
    for j in range(n_phys, plant.n):
        rows.append((eye[j], spec.w_levels))
    return rows


def build_controller(scn: Scenario, plant: DiscretePlant, n_phys: int) -> ControllerRig:
    spec = scn.controller
    if spec.mode not in MODES:
        raise ValueError(f"unknown controller mode {spec.mode!r}")
    m = plant.m
    sched = Schedule(m)
    q = np.atleast_2d(np.asarray(spec.q, dtype=float))
    if q.shape != (plant.n, plant.n):
        raise ValueError(f"q must be {plant.n}x{plant.n} on the simulated state")
    r = float(spec.r)
    sync = spec.mode.endswith("smpc")
    robust = spec.mode.startswith("robust")
    pattern = (ctrl.MovePattern.synchronized(m, m) if sync
               else ctrl.MovePattern.multiplexed(m))
    n_ph = pattern.n_phases

    # terminal weight per phase
    tw = spec.terminal_weight
    if isinstance(tw, str):
        if tw == "zero":
            F = tuple(np.zeros((plant.n, plant.n)) for _ in range(n_ph))
        elif tw == "dpre":
            if sync:
                raise ValueError("dpre terminal weights are defined per fast phase")
            F = ctrl.dpre_terminal_weights(plant, sched, q, r)
        else:
            raise ValueError(f"unknown terminal weight {tw!r}")
    else:
        Fm = np.atleast_2d(np.asarray(tw, dtype=float))
        F = tuple(Fm.copy() for _ in range(n_ph))

    sets_spec = spec.sets or SetsSpec()
    X = _state_rows(plant, sets_spec, n_phys)
    U = None
    if sets_spec.u_abs_limit is not None:
        lim = float(sets_spec.u_abs_limit)
        U = tuple(box(np.array([-lim]), np.array([lim])) for _ in range(m))
    W = None
    if sets_spec.w_box is not None:
        lo, hi = sets_spec.w_box
        W = box(np.asarray(lo, float).ravel(), np.asarray(hi, float).ravel())

    term_set = None
    if spec.terminal_set == "origin":
        term_set = box(np.zeros(plant.n), np.zeros(plant.n))
    elif spec.terminal_set is not None:
        raise ValueError(f"unknown terminal set {spec.terminal_set!r}")

    policy = sets_built = None
    if robust:
        if plant.E is None:
            raise ValueError("robust modes need a disturbance injection map")
        if W is None:
            raise ValueError("robust modes need a disturbance bound (w_box)")
        tspec = sets_spec.tightening or TighteningSpec()
        N = (spec.N_u - 1) * m + 1 if not sync else spec.N_u * m
        policy = ctrl.min_norm_deadbeat_policy(
            plant, sched, N, pattern=pattern if sync else None,
            window=tspec.window, margin_rows=_margin_rows(plant, tspec, n_phys),
            reg=tspec.reg)
        sets_built = ctrl.build_tightened_sets(
            policy, X, U, W,
            T_per_phase=tuple(term_set for _ in range(n_ph)) if term_set is not None else None,
            N=N)

    if sync:
        design = ctrl.SyncDesign(
            n_inst=spec.N_u, period=m, q=q, r=r, F=F,
            X=X, U=U, T=term_set)
        state = ctrl.make_smpc_state(
            plant, design, mode="robust" if robust else "nominal",
            policy=policy, sets=sets_built)
        dvars = spec.N_u * m
    else:
        design = ctrl.MmpcDesign(
            N_u=spec.N_u, q=q, r=r, F=F,
            X=X, U=U,
            T=tuple(term_set for _ in range(m)) if term_set is not None else None)
        state = ctrl.equilibrium_state(
            plant, sched, design, mode="robust" if robust else "nominal",
            policy=policy, sets=sets_built)
        dvars = spec.N_u
    return ControllerRig(
        mode=spec.mode, plant=plant, sched=sched, design=design, state=state,
        decision_vars=dvars, policy=policy, sets_built=sets_built,
        X=X, U_per_channel=U, W=W)


# ---------------------------------------------------------------------------
# closed loop


@dataclass(eq=False)
class SimResult:
    scenario: Scenario
    t: np.ndarray
    x: np.ndarray          # simulated (augmented) state, one row per step end
    u: np.ndarray          # accumulated input levels
    du: np.ndarray         # applied move increments
    w: np.ndarray
    qp_iters: np.ndarray   # -1 on steps without a solve
    qp_time: np.ndarray
    objective: np.ndarray  # nan on steps without a solve
    decision_vars: int
    metrics: dict = field(default_factory=dict)


def run_closed_loop(scn: Scenario) -> SimResult:
    """Run one scenario to completion and reduce it to a metrics table.

    Controller infeasibility propagates as InfeasibleStepError carrying the
    step index; everything else is recorded in the trace.
    """
    plant = build_plant(scn)
    rig = build_controller(scn, plant, _phys_dim(plant))
    n_steps = scn.n_steps
    n, m = plant.n, plant.m
    n_w = plant.n_w

    w_seq = np.zeros((n_steps, n_w))
    x0 = np.zeros(n)
    if scn.disturbance is not None:
        seq = scn.disturbance.sequence(n_steps, scn.dt, seed=scn.seed)
        if seq.shape[1]:
            if seq.shape[1] != n_w:
                raise ValueError("disturbance width does not match the plant")
            w_seq = seq
        if isinstance(scn.disturbance, InputStepDisturbance):
            x0 = scn.disturbance.initial_state(plant)

    x = x0.copy()
    u_level = np.zeros(m)
    X_audit = rig.X
    t = np.empty(n_steps)
    xs = np.empty((n_steps, n))
    us = np.empty((n_steps, m))
    dus = np.empty((n_steps, m))
    qp_iters = np.full(n_steps, -1, dtype=int)
    qp_time = np.zeros(n_steps)
    objective = np.full(n_steps, np.nan)
    peak_violation = 0.0
    qp_count = 0
    cost_acc = 0.0
    q = np.atleast_2d(np.asarray(scn.controller.q, dtype=float))
    r = float(scn.controller.r)

    for k in range(n_steps):
        du_vec, solved = rig.step(x)
        if solved:
            sol = rig.state.last_solution
            qp_iters[k] = sol.iterations
            qp_time[k] = sol.wall_time
            objective[k] = rig.state.last_objective
            qp_count += 1
        w_k = w_seq[k] if n_w else np.zeros(0)
        x = plant.A @ x + plant.B @ du_vec
        if n_w:
            x = x + plant.E @ w_k
        u_level = u_level + du_vec
        cost_acc += float(x @ q @ x) + r * float(du_vec @ du_vec)
        if X_audit is not None:
            viol = float((X_audit.H @ x - X_audit.h).max())
            peak_violation = max(peak_violation, viol)
        t[k] = (k + 1) * scn.dt
        xs[k] = x
        us[k] = u_level
        dus[k] = du_vec

    res = SimResult(
        scenario=scn, t=t, x=xs, u=us, du=dus, w=w_seq,
        qp_iters=qp_iters, qp_time=qp_time, objective=objective,
        decision_vars=rig.decision_vars)
    res.metrics = compute_metrics(res, plant, qp_count, cost_acc, peak_violation)
    return res


def compute_metrics(res: SimResult, plant: DiscretePlant, qp_count: int,
                    cost_acc: float, peak_violation: float) -> dict:
    dt = res.scenario.dt
    energy = float(np.sum(res.u * res.u)) * dt
    solved = res.qp_iters >= 0
    out = {
        "qp_count": int(qp_count),
        "decision_vars": int(res.decision_vars),
        "energy_x1000": 1000.0 * energy,
        "qp_time_total_s": float(res.qp_time.sum()),
        "qp_time_mean_s": float(res.qp_time[solved].mean()) if qp_count else 0.0,
        "qp_iters_mean": float(res.qp_iters[solved].mean()) if qp_count else 0.0,
        "accumulated_cost": float(cost_acc),
        "peak_violation": float(peak_violation),
        "peak_state_inf": float(np.abs(res.x).max(initial=0.0)),
        "infeasible_count": 0,
    }
    if plant.C is not None:
        y = res.x @ plant.C.T
        out["peak_abs_output"] = float(np.abs(y).max(initial=0.0))
    if res.x.shape[1] >= 2:
        out["peak_abs_x2"] = float(np.abs(res.x[:, 1]).max(initial=0.0))
    return out


def run_many(scenarios, workers: int | None = None) -> list:
    """Run several scenarios, optionally in parallel; results keep order."""
    if workers is None:
        workers = int(os.environ.get("MMPC_THREADS", "1"))
    scenarios = list(scenarios)
    if workers <= 1 or len(scenarios) <= 1:
        return [run_closed_loop(s) for s in scenarios]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_closed_loop, scenarios))


# ---------------------------------------------------------------------------
# export


def _fmt(v) -> str:
    return "%.17g" % float(v)


def write_trace_csv(res: SimResult, path) -> None:
    """One row per fast step; 17 significant digits throughout.

    All columns are reproducible for a fixed scenario and seed except
    qp_time, which is measured wall time.
    """
    n = res.x.shape[1]
    m = res.u.shape[1]
    n_w = res.w.shape[1]
    header = (["t"]
              + [f"x{i}" for i in range(n)]
              + [f"u{i}" for i in range(m)]
              + [f"du{i}" for i in range(m)]
              + [f"w{i}" for i in range(n_w)]
              + ["qp_iters", "qp_time"])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for k in range(res.t.size):
            row = ([_fmt(res.t[k])]
                   + [_fmt(v) for v in res.x[k]]
                   + [_fmt(v) for v in res.u[k]]
                   + [_fmt(v) for v in res.du[k]]
                   + [_fmt(v) for v in res.w[k]]
                   + [str(int(res.qp_iters[k])), _fmt(res.qp_time[k])])
            wr.writerow(row)


def write_metrics_json(res: SimResult, path) -> None:
    doc = {"scenario": res.scenario.name, "metrics": res.metrics}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def bundled_scenario(name: str) -> str:
    """Filesystem path of a scenario shipped with the package."""
    if not name.endswith(".json"):
        name += ".json"
    path = importlib.resources.files(__package__) / "scenarios" / name
    if not path.is_file():
        have = sorted(p.name for p in path.parent.iterdir())
        raise FileNotFoundError(f"no bundled scenario {name!r}; have {have}")
    return str(path)
