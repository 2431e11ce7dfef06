"""Command-line behavior: exit codes, report determinism, sweeps, oracles.

Most tests invoke ``main`` in-process for speed; one subprocess check
confirms the installed entry point carries the exit code through.
"""
from __future__ import annotations

import hashlib
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from noc.cli import main
from noc.problemfile import parse_problem_file

DISC_OP = """\
noc 1
kind op
dim 2
domain {
  ball 0.0 0.0 1.0
}
point -1.0 0.0
cost x1 + 1
direction {
  y 0.0 1.0
}
"""

PARABOLA_OP = """\
noc 1
kind op
dim 2
domain {
  box -1.0 -1.0 1.0 1.0
}
point 0.0 0.0
cost x2
equality x2 + x1^2
direction {
  y 1.0 0.0
}
"""

TILTED_OP = """\
noc 1
kind op
dim 2
domain {
  ball 0.0 0.0 1.0
}
point -1.0 0.0
cost x1 + 0.1*x2
"""


def _write(tmp_path, name: str, text: str) -> str:
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _check(args):
    return main(["check"] + args)


# ----------------------------------------------------------------------------
# exit codes and verdicts
# ----------------------------------------------------------------------------

def test_refuted_preset_exits_3(capsys):
    code = _check(["preset:ccs126", "--grid", "200"])
    out = capsys.readouterr().out
    assert code == 3
    assert "verdict: refuted" in out
    assert "ray 0: -4/11 -1 4/11" in out
    # the certified value of the quadratic form at the defaults
    lhs = [ln for ln in out.splitlines() if ln.startswith("second-order")]
    assert abs(float(lhs[0].split(": ")[1]) - 13.0 / 12.0) < 1e-3


def test_consistent_preset_exits_0(capsys):
    code = _check(["preset:linear-lq-euclid"])
    out = capsys.readouterr().out
    assert code == 0
    assert "verdict: consistent" in out
    assert "ray 0: -1 -1 1 1" in out


def test_margin_override_downgrades_to_inconclusive(capsys):
    code = _check(["preset:ccs126", "--grid", "200", "--tol", "margin=0.5"])
    assert code == 4
    assert "verdict: inconclusive" in capsys.readouterr().out


def test_missing_direction_runs_first_order_only(tmp_path, capsys):
    from noc.presets import preset_text
    text = preset_text("ccs126")
    text = text[:text.index("direction {")]
    path = _write(tmp_path, "nodir.noc", text)
    code = _check([path, "--grid", "100"])
    out = capsys.readouterr().out
    assert code == 0
    assert "first-order check only" in out


def test_hypothesis_boundary_still_evaluated(capsys):
    code = _check(["preset:ccs126", "--grid", "200", "--set", "theta=2",
                   "--set", "T=0.3"])
    out = capsys.readouterr().out
    assert code == 3
    assert "hypothesis violation theta>2" in out
    # at theta = 2 the formula reduces to T(-T^2/3 + 5T/2), still positive
    lhs = [ln for ln in out.splitlines()
           if ln.startswith("second-order value")]
    expected = 0.3 * (-0.09 / 3 + 2.5 * 0.3)
    assert abs(float(lhs[0].split(": ")[1]) - expected) < 1e-3


def test_op_consistent_and_refuted(tmp_path, capsys):
    assert _check([_write(tmp_path, "disc.noc", DISC_OP)]) == 0
    assert "worst values: -0.5" in capsys.readouterr().out
    assert _check([_write(tmp_path, "par.noc", PARABOLA_OP)]) == 3
    assert "verdict: refuted" in capsys.readouterr().out
    assert _check([_write(tmp_path, "tilt.noc", TILTED_OP)]) == 3
    assert "multiplier rays: 0" in capsys.readouterr().out


def test_op_grid_search_agreement_and_coarse_note(tmp_path, capsys):
    path = _write(tmp_path, "disc.noc", DISC_OP + "resolution 0.01\n")
    assert _check([path]) == 0
    assert "grid search: confirmed" in capsys.readouterr().out
    # a grid too coarse to certify the improvement it sees says so:
    # the candidate sits off-grid and the nearest sample wins by exactly
    # the Lipschitz slack
    coarse = ("noc 1\nkind op\ndim 1\ndomain {\n  box -1.0 1.0\n}\n"
              "point -0.75\ncost x1\nresolution 0.5\n")
    path = _write(tmp_path, "coarse.noc", coarse)
    assert _check([path]) == 3  # first-order cone is empty at an interior point
    assert "grid search inconclusive" in capsys.readouterr().out


def test_input_errors_exit_2(tmp_path, capsys):
    bad = DISC_OP.replace("ball 0.0 0.0 1.0", "ball 0.0 0.0")
    assert _check([_write(tmp_path, "bad.noc", bad)]) == 2
    assert "domain: ball radius" in capsys.readouterr().err
    assert _check([str(tmp_path / "missing.noc")]) == 2
    assert "cannot read" in capsys.readouterr().err
    assert _check(["preset:nope"]) == 2
    assert "unknown preset" in capsys.readouterr().err
    assert _check(["preset:ccs126", "--set", "bogus=1"]) == 2
    assert "unknown parameter" in capsys.readouterr().err
    assert _check(["preset:ccs126", "--set", "theta=abc"]) == 2
    assert "must be a number" in capsys.readouterr().err


def test_inadmissible_direction_is_an_input_error(tmp_path, capsys):
    from noc.presets import preset_text
    text = preset_text("ccs126").replace("v 1 ; 0", "v 0 ; 1")
    assert _check([_write(tmp_path, "up.noc", text), "--grid", "100"]) == 2
    assert "increases along the direction" in capsys.readouterr().err


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------

def test_report_is_byte_identical_and_self_describing(tmp_path, capsys):
    r1, r2 = str(tmp_path / "a.json"), str(tmp_path / "b.json")
    assert _check(["preset:ccs126", "--grid", "150", "--report", r1]) == 3
    assert _check(["preset:ccs126", "--grid", "150", "--report", r2]) == 3
    capsys.readouterr()
    b1, b2 = open(r1, "rb").read(), open(r2, "rb").read()
    assert b1 == b2

    report = json.loads(b1)
    assert report["verdict"] == "refuted"
    assert report["exit_code"] == 3
    # the echoed problem text re-parses to the problem that actually ran
    pf = parse_problem_file(report["problem"])
    assert pf.cells == 150 and pf.horizon == 0.5
    assert pf.param_dict() == {"theta": 3.0}
    digest = hashlib.sha256(report["problem"].encode()).hexdigest()
    assert report["digest"] == digest

    ray = report["multipliers"][0]
    np.testing.assert_allclose(ray["weights"], [-4 / 11, -1.0, 4 / 11],
                               atol=1e-9)
    assert ray["display"] == ["-4/11", "-1", "4/11"]
    terms = report["second_order"]["terms"]
    assert set(terms) == {"sigma_integral", "state_state", "state_control",
                          "control_control", "curvature", "start_start",
                          "start_end", "end_end"}
    assert abs(sum(terms.values()) - report["second_order"]["chosen_lhs"]) \
        < 1e-9

    # timing lives in a sibling file so the report itself stays stable
    timing = json.load(open(r1 + ".timing.json"))
    assert timing["elapsed_seconds"] > 0.0


def test_index_sets_reported_with_critical_rows(tmp_path, capsys):
    path = str(tmp_path / "r.json")
    assert _check(["preset:ccs126", "--grid", "100", "--report", path]) == 3
    capsys.readouterr()
    report = json.load(open(path))
    sets = report["index_sets"]
    assert sets["active"] == [0] and sets["inactive"] == []
    assert sets["critical"] == [0] and sets["relaxed"] == []
    np.testing.assert_allclose(
        report["direction"]["endpoint_rates"], [0.0], atol=1e-8)
    np.testing.assert_allclose(
        report["direction"]["equality_residuals"], [0.0, 0.0], atol=1e-8)


# ----------------------------------------------------------------------------
# sweeps
# ----------------------------------------------------------------------------

def test_sweep_csv_matches_closed_form(tmp_path, capsys):
    out = str(tmp_path / "table.csv")
    code = main(["sweep", "preset:ccs126", "--grid", "200",
                 "--param", "T=0.1:0.7:4", "--param", "theta=2.5,3",
                 "--out", out])
    capsys.readouterr()
    assert code == 0
    lines = open(out).read().splitlines()
    assert lines[0] == "T,theta,verdict,lhs,notes"
    assert len(lines) == 9
    for line in lines[1:]:
        t_str, theta_str, verdict, lhs_str, note = line.split(",")
        t, theta, lhs = float(t_str), float(theta_str), float(lhs_str)
        assert verdict == "refuted"
        closed_form = t * (-t * t / 3 + 2.5 * t + theta - 2)
        assert abs(lhs - closed_form) < 1e-3
        assert note == ""


def test_sweep_single_point_emits_one_row(capsys):
    code = main(["sweep", "preset:ccs126", "--grid", "100",
                 "--param", "T=0.5"])
    out = capsys.readouterr().out
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "T,verdict,lhs,notes"
    assert len(lines) == 2 and lines[1].startswith("0.5,refuted,")


def test_sweep_flags_hypothesis_rows(capsys):
    code = main(["sweep", "preset:ccs126", "--grid", "100",
                 "--param", "theta=2,3"])
    out = capsys.readouterr().out
    assert code == 0
    lines = out.splitlines()
    assert "hypothesis violation theta>2" in lines[1]
    assert lines[2].endswith(",")  # theta=3 row carries no note


def test_sweep_rejects_bad_specs(capsys):
    assert main(["sweep", "preset:ccs126", "--param", "T=1:2"]) == 2
    assert main(["sweep", "preset:ccs126", "--param", "T"]) == 2
    assert main(["sweep", "preset:ccs126", "--param", "T=a,b"]) == 2
    capsys.readouterr()


# ----------------------------------------------------------------------------
# oracle
# ----------------------------------------------------------------------------

def test_oracle_cone_memberships(capsys):
    assert main(["oracle", "cone", "ball 0 0 1", "0 -1", "1 0"]) == 0
    assert "verdict: member" in capsys.readouterr().out
    assert main(["oracle", "cone", "box -1 -1 1 1", "1 0", "1 0"]) == 3
    assert "verdict: non-member" in capsys.readouterr().out
    # second-order query: the curvature-compensating term is admissible
    assert main(["oracle", "cone", "ball 0 0 1", "0 -1", "1 0", "0 0.5"]) == 0
    out = capsys.readouterr().out
    assert "order: 2" in out
    assert main(["oracle", "cone", "ball 0 0 1", "5 0", "1 0"]) == 2
    assert "outside the set" in capsys.readouterr().err
    assert main(["oracle", "cone", "polyhedron ; row -1 0 0 ; row 0 -1 0",
                 "0 0", "1 1"]) == 0
    capsys.readouterr()


# ----------------------------------------------------------------------------
# installed entry point
# ----------------------------------------------------------------------------

def test_subprocess_carries_exit_code_and_threads_env(tmp_path):
    env = dict(os.environ, NOC_THREADS="1")
    proc = subprocess.run(
        [sys.executable, "-m", "noc", "check", "preset:ccs126",
         "--grid", "120"],
        capture_output=True, text=True, env=env)
    assert proc.returncode == 3
    assert "verdict: refuted" in proc.stdout
    assert "Traceback" not in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "noc", "check",
                           str(tmp_path / "missing.noc")],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 2
    assert "Traceback" not in proc.stderr
