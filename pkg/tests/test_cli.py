"""Scenario-file schema, exit codes, and output formats of the front end."""
import csv
import json
import os

import numpy as np
import pytest

from mmpc import cli, sim


def _minimal_doc():
    """A tiny valid scenario document (fast to run)."""
    return {
        "plant": "tito_velocity",
        "discretization": {"dt": 0.5},
        "controller": {
            "mode": "nominal-mmpc",
            "N_u": 3,
            "q": [1.0] * 6,
            "r": 1.0,
            "terminal": {"weight": "dpre", "set": None},
            "sets": None,
        },
        "disturbance": {"kind": "input_step", "magnitude": [1.0, 1.0]},
        "duration": 10.0,
        "seed": 0,
        "outputs": {"trace": "trace.csv", "metrics": "metrics.json"},
    }


def _write(tmp_path, doc, name="scn.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def test_run_writes_trace_and_metrics(tmp_path):
    path = _write(tmp_path, _minimal_doc())
    out = tmp_path / "out"
    assert cli.main(["run", path, "--out", str(out)]) == 0
    assert (out / "trace.csv").exists()
    doc = json.loads((out / "metrics.json").read_text())
    assert doc["metrics"]["qp_count"] == 20
    assert doc["scenario"] == "scn"


def test_malformed_json_exits_1(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{"plant": ')
    assert cli.main(["run", str(p)]) == 1
    assert "invalid JSON" in capsys.readouterr().err


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(extra=1),
    lambda d: d["controller"].update(gamma=2.0),
    lambda d: d["controller"]["terminal"].update(mode="x"),
    lambda d: d["disturbance"].update(width=3),
    lambda d: d["outputs"].update(plot="x.png"),
    lambda d: d.update(discretization={"dt": 0.5, "method": "euler"}),
])
def test_unknown_keys_are_rejected_at_every_level(tmp_path, mutate, capsys):
    doc = _minimal_doc()
    mutate(doc)
    assert cli.main(["run", _write(tmp_path, doc)]) == 1
    assert "unknown keys" in capsys.readouterr().err


@pytest.mark.parametrize("mutate", [
    lambda d: d.pop("seed"),
    lambda d: d["controller"].pop("q"),
    lambda d: d.update(plant="warp_drive"),
    lambda d: d["controller"].update(mode="fuzzy"),
    lambda d: d["controller"].update(N_u=0),
    lambda d: d.update(discretization={"dt": -1.0}),
    lambda d: d.update(duration=10.3),
    lambda d: d["controller"].update(q=[1.0] * 5),
    lambda d: d.update(disturbance={"kind": "pulse", "start_s": 1.0}),
    lambda d: d.update(seed="zero"),
])
def test_bad_values_exit_1(tmp_path, mutate, capsys):
    doc = _minimal_doc()
    mutate(doc)
    assert cli.main(["run", _write(tmp_path, doc)]) == 1
    assert capsys.readouterr().err.startswith(("error:", "design error:"))


def test_infeasible_start_exits_2(tmp_path, capsys):
    # constrained nominal run whose folded-in input step breaks the limits
    doc = _minimal_doc()
    doc["controller"]["N_u"] = 4
    doc["controller"]["terminal"] = {"weight": "zero", "set": "origin"}
    doc["controller"]["sets"] = {"output_abs_limit": 0.05}
    doc["disturbance"] = {"kind": "input_step", "magnitude": [2.0, 2.0]}
    assert cli.main(["run", _write(tmp_path, doc)]) == 2
    assert "infeasible" in capsys.readouterr().err


def test_usage_errors_exit_1_not_2(capsys):
    assert cli.main(["frobnicate"]) == 1
    assert cli.main([]) == 1
    capsys.readouterr()


def test_seed_override_changes_random_runs(tmp_path):
    doc = _minimal_doc()
    doc["plant"] = {
        "A_c": [[0.0, 1.0], [-1.0, -0.4]],
        "B_c": [[0.0], [1.0]],
        "C": [[1.0, 0.0]],
        "E_c": [[0.0], [0.5]],
    }
    doc["controller"].update(
        mode="robust-mmpc",
        N_u=4,
        q=[1.0, 1.0, 0.1],
        terminal={"weight": "zero", "set": "origin"},
        sets={
            "output_abs_limit": 5.0,
            "w_box": {"lo": [-0.01], "hi": [0.01]},
            "tightening": {"window": 3},
        },
    )
    doc["disturbance"] = {"kind": "random"}
    path = _write(tmp_path, doc)
    outs = []
    for seed, name in ((None, "a"), (None, "b"), (11, "c")):
        args = ["run", path, "--out", str(tmp_path / name)]
        if seed is not None:
            args = ["--seed", str(seed)] + args
        assert cli.main(args) == 0
        rows = list(csv.reader(open(tmp_path / name / "trace.csv")))
        outs.append(rows)
    head = outs[0][0]
    w_cols = [i for i, c in enumerate(head) if c.startswith("w")]
    w = [[tuple(r[i] for i in w_cols) for r in rows[1:]] for rows in outs]
    assert w[0] == w[1]          # same seed, same draw
    assert w[0] != w[2]          # override changes the draw


def test_trace_is_reproducible_except_wall_time(tmp_path):
    path = _write(tmp_path, _minimal_doc())
    for name in ("r1", "r2"):
        assert cli.main(["run", path, "--out", str(tmp_path / name)]) == 0
    a = list(csv.reader(open(tmp_path / "r1" / "trace.csv")))
    b = list(csv.reader(open(tmp_path / "r2" / "trace.csv")))
    assert a[0] == b[0]
    t_col = a[0].index("qp_time")
    for ra, rb in zip(a[1:], b[1:]):
        ra[t_col] = rb[t_col] = "-"
        assert ra == rb


def test_check_passes_on_every_bundled_scenario(capsys):
    for name in ("tito_table", "spring_mass_mmpc", "spring_mass_smpc",
                 "aircraft_mmpc", "aircraft_smpc"):
        code = cli.main(["check", sim.bundled_scenario(name)])
        out = capsys.readouterr().out
        assert code == 0, f"{name} failed:\n{out}"
        assert "FAIL" not in out
        assert "pass" in out


def test_check_names_the_stabilizability_failure(tmp_path, capsys):
    doc = _minimal_doc()
    doc["plant"] = {
        "A_c": [[1.0, 0.0], [0.0, 2.0]],   # unstable, unreachable mode
        "B_c": [[1.0], [0.0]],
        "C": [[1.0, 0.0]],
    }
    doc["controller"]["q"] = [1.0, 1.0, 1.0]
    assert cli.main(["check", _write(tmp_path, doc)]) == 1
    out = capsys.readouterr().out
    assert "FAIL  stabilizability" in out


def test_analyze_cost_zero_rows_for_identical_phases(tmp_path, capsys):
    path = _write(tmp_path, _minimal_doc())
    assert cli.main(["analyze-cost", path, "--nu", "1,2", "--phases", "1,1"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("N_u,lam1")
    for line in out[1:]:
        vals = [float(v) for v in line.split(",")[1:]]
        assert np.allclose(vals, 0.0, atol=1e-12)


def test_analyze_cost_needs_positive_definite_weight(tmp_path, capsys):
    doc = _minimal_doc()
    doc["controller"]["q"] = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0]
    assert cli.main(["analyze-cost", _write(tmp_path, doc)]) == 1
    assert "positive definite" in capsys.readouterr().err


def test_compare_identical_scenarios_report_identical_metrics(tmp_path, capsys):
    path = _write(tmp_path, _minimal_doc())
    other = _write(tmp_path, _minimal_doc(), name="scn2.json")
    assert cli.main(["compare", path, other]) == 0
    table = capsys.readouterr().out.splitlines()
    for line in table[1:]:
        key = line.split()[0]
        cells = line.split()[1:]
        if "time" in key:
            continue
        assert cells[0] == cells[1], line


def test_compare_sweep_emits_one_row_per_horizon(tmp_path):
    path = _write(tmp_path, _minimal_doc())
    other = _write(tmp_path, _minimal_doc(), name="scn2.json")
    out = tmp_path / "sweep.csv"
    assert cli.main(["compare", path, other, "--sweep-nu", "2,3",
                     "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert len(rows) == 3
    assert rows[0].startswith("N_u,")
    assert rows[1].split(",")[0] == "2"
    assert rows[2].split(",")[0] == "3"


def test_custom_continuous_plant_roundtrip(tmp_path):
    doc = _minimal_doc()
    doc["plant"] = {
        "A_c": [[0.0, 1.0], [-1.0, -0.4]],
        "B_c": [[0.0], [1.0]],
        "C": [[1.0, 0.0]],
        "E_c": [[0.0], [0.5]],
    }
    doc["controller"]["q"] = [1.0, 1.0, 0.1]   # 2 states + 1 level
    doc["controller"]["N_u"] = 4
    doc["disturbance"] = {"kind": "input_step", "magnitude": [1.0]}
    doc["duration"] = 5.0
    path = _write(tmp_path, doc)
    out = tmp_path / "o"
    assert cli.main(["run", path, "--out", str(out)]) == 0
    doc2 = json.loads((out / "metrics.json").read_text())
    assert doc2["metrics"]["qp_count"] == 10
