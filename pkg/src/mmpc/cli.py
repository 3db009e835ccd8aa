"""Command-line front end: run scenarios, analyses, checks; emit CSV/JSON.

Exit codes: 0 success, 1 configuration error (bad JSON, bad schema, bad
design), 2 controller infeasibility during a run.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import controller as ctrl
from . import periodic_lq as plq
from . import sim
from .controller import ControllerError, DesignError, InfeasibleStepError
from .lti_model import ContinuousPlant, DiscretePlant, Schedule, is_stabilizable
from .polytope import HPolytope


class ConfigError(ValueError):
    """Anything wrong with a scenario document or the command line."""


# ---------------------------------------------------------------------------
# schema


def _expect_keys(doc: dict, where: str, required=(), optional=()):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    allowed = set(required) | set(optional)
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = set(required) - set(doc)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")


def _number(doc, where: str) -> float:
    if isinstance(doc, bool) or not isinstance(doc, (int, float)):
        raise ConfigError(f"{where}: expected a number")
    return float(doc)


def _matrix(doc, where: str) -> np.ndarray:
    try:
        M = np.asarray(doc, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected a numeric array") from None
    if M.ndim == 1:
        M = np.diag(M)
    if M.ndim != 2:
        raise ConfigError(f"{where}: expected a vector (diagonal) or a matrix")
    return M


def _vector(doc, where: str) -> np.ndarray:
    try:
        v = np.asarray(doc, dtype=float).ravel()
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected a numeric vector") from None
    return v


def _parse_plant(doc):
    if isinstance(doc, str):
        if doc not in ("spring_mass", "tito", "surrogate_aircraft", "tito_velocity"):
            raise ConfigError(f"plant: unknown builtin {doc!r}")
        return doc
    _expect_keys(doc, "plant", required=("A_c", "B_c", "C"), optional=("E_c",))
    A = _matrix(doc["A_c"], "plant.A_c")
    B = _matrix(doc["B_c"], "plant.B_c")
    C = _matrix(doc["C"], "plant.C")
    E = _matrix(doc["E_c"], "plant.E_c") if doc.get("E_c") is not None else None
    try:
        return ContinuousPlant(A, B, C, E)
    except ValueError as e:
        raise ConfigError(f"plant: {e}") from None


def _parse_tightening(doc):
    if doc is None:
        return None
    _expect_keys(doc, "controller.sets.tightening", optional=(
        "window", "reg", "w_output", "w_levels", "w_other"))
    kw = {}
    if "window" in doc:
        if not isinstance(doc["window"], int):
            raise ConfigError("tightening.window: expected an integer")
        kw["window"] = doc["window"]
    for key in ("reg", "w_output", "w_levels", "w_other"):
        if key in doc:
            kw[key] = _number(doc[key], f"tightening.{key}")
    return sim.TighteningSpec(**kw)


def _parse_sets(doc):
    if doc is None:
        return None
    _expect_keys(doc, "controller.sets", optional=(
        "output_abs_limit", "level_abs_limit", "x_rows", "u_abs_limit",
        "w_box", "tightening"))
    kw = {}
    for key in ("output_abs_limit", "level_abs_limit", "u_abs_limit"):
        if doc.get(key) is not None:
            kw[key] = _number(doc[key], f"sets.{key}")
    if doc.get("x_rows") is not None:
        xr = doc["x_rows"]
        _expect_keys(xr, "sets.x_rows", required=("A", "b"))
        kw["x_rows"] = (_matrix(xr["A"], "sets.x_rows.A"),
                        _vector(xr["b"], "sets.x_rows.b"))
    if doc.get("w_box") is not None:
        wb = doc["w_box"]
        _expect_keys(wb, "sets.w_box", required=("lo", "hi"))
        kw["w_box"] = (_vector(wb["lo"], "sets.w_box.lo"),
                       _vector(wb["hi"], "sets.w_box.hi"))
    kw["tightening"] = _parse_tightening(doc.get("tightening"))
    return sim.SetsSpec(**kw)


def _parse_controller(doc):
    _expect_keys(doc, "controller",
                 required=("mode", "N_u", "q", "r"),
                 optional=("terminal", "sets"))
    mode = doc["mode"]
    if mode not in sim.MODES:
        raise ConfigError(f"controller.mode: expected one of {sim.MODES}")
    if not isinstance(doc["N_u"], int) or doc["N_u"] < 1:
        raise ConfigError("controller.N_u: expected a positive integer")
    term_w, term_s = "zero", "origin"
    if "terminal" in doc:
        term = doc["terminal"]
        _expect_keys(term, "controller.terminal", optional=("weight", "set"))
        if "weight" in term:
            term_w = term["weight"]
            if not (term_w in ("zero", "dpre") or isinstance(term_w, list)):
                raise ConfigError('controller.terminal.weight: expected "zero", '
                                  '"dpre" or a matrix')
            if isinstance(term_w, list):
                term_w = _matrix(term_w, "controller.terminal.weight")
        if "set" in term:
            term_s = term["set"]
            if term_s not in ("origin", None):
                raise ConfigError('controller.terminal.set: expected "origin" or null')
    return sim.ControllerSpec(
        mode=mode, N_u=doc["N_u"], q=_matrix(doc["q"], "controller.q"),
        r=_number(doc["r"], "controller.r"),
        terminal_weight=term_w, terminal_set=term_s,
        sets=_parse_sets(doc.get("sets")))


def _parse_disturbance(doc, sets_spec):
    if doc is None:
        return None
    _expect_keys(doc, "disturbance", required=("kind",),
                 optional=("start_s", "end_s", "magnitude", "seed"))
    kind = doc["kind"]
    if kind == "none":
        _expect_keys(doc, "disturbance", required=("kind",))
        return None
    if kind == "pulse":
        _expect_keys(doc, "disturbance",
                     required=("kind", "start_s", "end_s", "magnitude"))
        return sim.pulse_disturbance(
            _number(doc["start_s"], "disturbance.start_s"),
            _number(doc["end_s"], "disturbance.end_s"),
            _vector(doc["magnitude"], "disturbance.magnitude"))
    if kind == "random":
        _expect_keys(doc, "disturbance", required=("kind",), optional=("seed",))
        if sets_spec is None or sets_spec.w_box is None:
            raise ConfigError("disturbance.random needs controller.sets.w_box")
        lo, hi = sets_spec.w_box
        from .polytope import box
        return sim.bounded_random_disturbance(box(lo, hi), doc.get("seed"))
    if kind == "input_step":
        _expect_keys(doc, "disturbance", required=("kind", "magnitude"))
        return sim.InputStepDisturbance(_vector(doc["magnitude"],
                                                "disturbance.magnitude"))
    raise ConfigError(f"disturbance.kind: unknown kind {kind!r}")


def load_scenario(path, seed_override=None) -> tuple:
    """Parse and validate a scenario file; returns (Scenario, outputs dict)."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    _expect_keys(doc, path,
                 required=("plant", "discretization", "controller",
                           "disturbance", "duration", "seed", "outputs"))
    disc = doc["discretization"]
    _expect_keys(disc, "discretization", required=("dt",))
    dt = _number(disc["dt"], "discretization.dt")
    if dt <= 0:
        raise ConfigError("discretization.dt: must be positive")
    controller = _parse_controller(doc["controller"])
    disturbance = _parse_disturbance(doc["disturbance"], controller.sets)
    outputs = doc["outputs"]
    _expect_keys(outputs, "outputs", optional=("trace", "metrics"))
    for key, val in outputs.items():
        if not isinstance(val, str) or not val:
            raise ConfigError(f"outputs.{key}: expected a filename")
    seed = doc["seed"]
    if not isinstance(seed, int):
        raise ConfigError("seed: expected an integer")
    if seed_override is not None:
        seed = seed_override
    name = os.path.splitext(os.path.basename(path))[0]
    try:
        scn = sim.Scenario(
            name=name, plant=_parse_plant(doc["plant"]), dt=dt,
            controller=controller, disturbance=disturbance,
            duration_s=_number(doc["duration"], "duration"), seed=seed)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return scn, dict(outputs)


# ---------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    scn, outputs = load_scenario(args.scenario, args.seed)
    res = sim.run_closed_loop(scn)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    trace_path = os.path.join(out_dir, outputs.get("trace", "trace.csv"))
    metrics_path = os.path.join(out_dir, outputs.get("metrics", "metrics.json"))
    sim.write_trace_csv(res, trace_path)
    sim.write_metrics_json(res, metrics_path)
    print(f"{scn.name}: {res.metrics['qp_count']} solves, "
          f"{res.metrics['decision_vars']} variables each; "
          f"wrote {trace_path} and {metrics_path}")
    return 0


def cmd_analyze_cost(args) -> int:
    scn, _ = load_scenario(args.scenario, args.seed)
    plant = sim.build_plant(scn)
    if not plant.delta_form:
        raise ConfigError("analyze-cost needs a move-increment (delta-form) plant")
    try:
        nus = [int(s) for s in args.nu.split(",") if s]
    except ValueError:
        raise ConfigError("--nu: expected a comma-separated integer list") from None
    if not nus or min(nus) < 1:
        raise ConfigError("--nu: expected positive horizons")
    try:
        pa, pb = (int(s) for s in args.phases.split(","))
    except ValueError:
        raise ConfigError("--phases: expected two comma-separated phases") from None
    sched = Schedule(plant.m)
    if not (0 <= pa < plant.m and 0 <= pb < plant.m):
        raise ConfigError(f"--phases: must lie in 0..{plant.m - 1}")
    q = np.atleast_2d(np.asarray(scn.controller.q, dtype=float))
    if q.shape != (plant.n, plant.n):
        raise ConfigError(f"controller.q must be {plant.n}x{plant.n} for this plant")
    r = float(scn.controller.r)
    try:
        Lq = np.linalg.cholesky(q)
    except np.linalg.LinAlgError:
        raise ConfigError("analyze-cost needs a positive definite q "
                          "(eigenvalues are reported in the q-whitened basis)") from None
    Li = np.linalg.inv(Lq)
    x0 = None
    if isinstance(scn.disturbance, sim.InputStepDisturbance):
        x0 = scn.disturbance.initial_state(plant)
    ric = plq.solve_dpre(plant, sched, q, r)
    lines = []
    header = ["N_u"] + [f"lam{i + 1}" for i in range(plant.n)]
    if x0 is not None:
        header.append("cost_diff")
    lines.append(",".join(header))
    for nu in nus:
        gains = plq.mmpc_qp_law_gains(plant, sched, nu, q, r, ric=ric)
        aug = plq.build_augmented(plant, sched, nu, q=q, r=r, feedback=gains)
        cm = plq.mmpc_cost_matrices(aug)
        Da, Db = cm.hat(pa), cm.hat(pb)
        lam = plq.compare_designs(Li @ Da @ Li.T, Li @ Db @ Li.T)
        row = [str(nu)] + ["%.17g" % v for v in lam]
        if x0 is not None:
            row.append("%.17g" % float(x0 @ (Da - Db) @ x0))
        lines.append(",".join(row))
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _metrics_table(results) -> str:
    keys = sorted(set().union(*(r.metrics for r in results)))
    names = [r.scenario.name for r in results]
    width = max(len(k) for k in keys)
    cols = [max(len(n), 12) for n in names]
    lines = [" " * width + "  " + "  ".join(n.rjust(c) for n, c in zip(names, cols))]
    for key in keys:
        cells = []
        for r, c in zip(results, cols):
            v = r.metrics.get(key)
            if v is None:
                cells.append("-".rjust(c))
            elif isinstance(v, int):
                cells.append(str(v).rjust(c))
            else:
                cells.append(f"{v:.6g}".rjust(c))
        lines.append(key.ljust(width) + "  " + "  ".join(cells))
    return "\n".join(lines)


def cmd_compare(args) -> int:
    scn_a, _ = load_scenario(args.scenario_a, args.seed)
    scn_b, _ = load_scenario(args.scenario_b, args.seed)
    if args.sweep_nu:
        try:
            nus = [int(s) for s in args.sweep_nu.split(",") if s]
        except ValueError:
            raise ConfigError("--sweep-nu: expected an integer list") from None
        lines = [f"N_u,qp_time_mean_{scn_a.name},qp_time_mean_{scn_b.name}"]
        for nu in nus:
            pair = []
            for scn in (scn_a, scn_b):
                c = dataclasses.replace(scn.controller, N_u=nu)
                ss = c.sets
                if (ss is not None and ss.tightening is not None
                        and ss.tightening.window is not None):
                    # the sweep varies the horizon; a window frozen for the
                    # full-length design cannot exceed the shorter one
                    m = sim.build_plant(scn).m
                    N = nu * m if c.mode.endswith("smpc") else (nu - 1) * m + 1
                    t = dataclasses.replace(ss.tightening,
                                            window=min(ss.tightening.window, N))
                    c = dataclasses.replace(c, sets=dataclasses.replace(ss, tightening=t))
                pair.append(dataclasses.replace(scn, controller=c))
            ra, rb = sim.run_many(pair)
            lines.append(f"{nu},%.17g,%.17g" % (
                ra.metrics["qp_time_mean_s"], rb.metrics["qp_time_mean_s"]))
        text = "\n".join(lines) + "\n"
    else:
        ra, rb = sim.run_many([scn_a, scn_b])
        text = _metrics_table([ra, rb]) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_check(args) -> int:
    scn, _ = load_scenario(args.scenario, args.seed)
    plant = sim.build_plant(scn)
    sched = Schedule(plant.m)
    checks = []  # (name, ok, detail)

    ok = is_stabilizable(plant.A, plant.B)
    checks.append(("stabilizability", ok, "" if ok else "PBH test failed"))

    q = np.atleast_2d(np.asarray(scn.controller.q, dtype=float))
    r = float(scn.controller.r)
    if q.shape != (plant.n, plant.n):
        checks.append(("weights", False, f"q must be {plant.n}x{plant.n}"))
    else:
        checks.append(("weights", True, ""))
        # the periodic Riccati recursion only enters the design through
        # "dpre" terminal weights, so only judge it there
        tw = scn.controller.terminal_weight
        if isinstance(tw, str) and tw == "dpre":
            try:
                # an unstabilizable design makes the recursion blow up;
                # report the divergence instead of spraying overflow warnings
                with np.errstate(over="ignore", invalid="ignore"):
                    ric = plq.solve_dpre(plant, sched, q, r)
                    res = plq.dpre_residual(plant, ric, q, r)
                ok = res < 1e-8
                checks.append(("dpre-convergence", ok, f"residual {res:.2e}"))
            except Exception as e:  # noqa: BLE001 - reported, not raised
                checks.append(("dpre-convergence", False, str(e)))

    rig = None
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            rig = sim.build_controller(scn, plant, sim._phys_dim(plant))
        checks.append(("controller-build", True, ""))
    except (ControllerError, ValueError) as e:
        checks.append(("controller-build", False, str(e)))

    if rig is not None and rig.sets_built is not None:
        empty = rig.sets_built.empty
        detail = "" if not empty else "empty members: " + ", ".join(
            f"(offset {i}, phase {a}, {kind})" for i, a, kind in empty[:8])
        checks.append(("tightened-sets-nonempty", not empty, detail))
        rep = ctrl.verify_terminal_invariance(
            plant, sched, rig.policy, rig.sets_built, rig.W,
            rng=np.random.default_rng(scn.seed))
        detail = "" if rep.ok else f"{len(rep.failures)} of {rep.checked} samples escaped"
        checks.append(("terminal-invariance", rep.ok, detail))

    failed = [c for c in checks if not c[1]]
    for name, ok, detail in checks:
        mark = "pass" if ok else "FAIL"
        print(f"{mark}  {name}" + (f"  ({detail})" if detail else ""))
    return 0 if not failed else 1


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    # the exit-code contract reserves 2 for controller infeasibility, so
    # command-line mistakes must exit 1 like any other configuration error
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmpc", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None,
                   help="override the scenario seed")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="run one scenario, write trace + metrics")
    pr.add_argument("scenario")
    pr.add_argument("--out", default=None, help="output directory")
    pr.set_defaults(func=cmd_run)

    pa = sub.add_parser("analyze-cost",
                        help="eigenvalues of the phase cost-matrix difference")
    pa.add_argument("scenario")
    pa.add_argument("--nu", default="1,2,3,4,5",
                    help="comma-separated list of N_u values")
    pa.add_argument("--phases", default="0,1", help="phase pair to compare")
    pa.add_argument("--out", default=None, help="output CSV path")
    pa.set_defaults(func=cmd_analyze_cost)

    pc = sub.add_parser("compare", help="run two scenarios side by side")
    pc.add_argument("scenario_a")
    pc.add_argument("scenario_b")
    pc.add_argument("--sweep-nu", default=None,
                    help="sweep N_u over this list and report mean QP times")
    pc.add_argument("--out", default=None, help="output path")
    pc.set_defaults(func=cmd_compare)

    pk = sub.add_parser("check", help="validate a scenario's design")
    pk.add_argument("scenario")
    pk.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ValueError as e:
        # ConfigError plus the builders' own diagnostics (bad q shape,
        # mismatched disturbance width, ...) -- all user-input problems.
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DesignError as e:
        print(f"design error: {e}", file=sys.stderr)
        return 1
    except InfeasibleStepError as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
