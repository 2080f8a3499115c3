import csv
import json
import os
import subprocess
import sys
import textwrap

import pytest

from seesmp.cli import format_cell, load_config, main, run

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(textwrap.dedent(text))
    return str(p)


def report(out, name):
    with open(os.path.join(out, f"{name}.json")) as fh:
        return json.load(fh)


def rows(out, name):
    with open(os.path.join(out, f"{name}.csv")) as fh:
        return list(csv.reader(fh))


SMALL_SMP = """
[run]
experiment = smp-verdict
seed = 11
n_paths = 300
n_steps = 24
[system]
kind = spde
[family]
kind = control
gamma = [1.0, -1.0, 1.0]
U = [-1.0, 1.0]
h1 = [0.2, 0.1]
kappa_y = 0.1
kappa_z = 0.2
[smp-verdict]
candidate = brute-force
n_sub = 64
"""


@pytest.mark.exact
def test_see_orders_zero_system(tmp_path):
    out = str(tmp_path / "o")
    assert run(os.path.join(CONFIGS, "see-orders-zero.ini"), out=out) == 0
    rep = report(out, "see-orders")
    assert set(rep) >= {"experiment", "config-echo", "seed", "measurements", "verdicts",
                        "runtime_seconds"}
    assert [v["verdict"] for v in rep["verdicts"]] == ["exact-zero", "exact-zero"]
    body = rows(out, "see-orders")
    assert body[0] == ["quantity", "rho", "estimate", "stderr"]
    assert all(r[2] == "0" and r[3] == "0" for r in body[1:])


def test_json_and_ini_configs_agree(tmp_path):
    ini = write(tmp_path, "a.ini", """
        [run]
        experiment = shift-orders
        seed = 2
        n_paths = 300
        n_steps = 64
        [system]
        kind = scalar
        a = -0.5
        b = 0.5
        [shift-orders]
        t0 = 0.25
        rho_max = 0.5
        n_rho = 4
        """)
    js = write(tmp_path, "b.json", json.dumps({
        "run": {"experiment": "shift-orders", "seed": 2, "n_paths": 300, "n_steps": 64},
        "system": {"kind": "scalar", "a": -0.5, "b": 0.5},
        "shift-orders": {"t0": 0.25, "rho_max": 0.5, "n_rho": 4}}))
    assert load_config(ini) == load_config(js)
    run(ini, out=str(tmp_path / "i"))
    run(js, out=str(tmp_path / "j"))
    a = (tmp_path / "i" / "shift-orders.csv").read_bytes()
    assert a == (tmp_path / "j" / "shift-orders.csv").read_bytes()
    assert rows(str(tmp_path / "i"), "shift-orders")[0] == ["rho", "estimate", "stderr"]


@pytest.mark.parametrize("body", [
    "[run]\nexperiment = nope\n",
    "[run]\nseed = 1\n",
    "[run]\nexperiment = shift-orders\n[shift-orders]\nbogus = 1\n",
    "[run]\nexperiment = shift-orders\n[extra]\nx = 1\n",
    "[run]\nexperiment = shift-orders\nn_paths = many\n",
    "[run]\nexperiment = shift-orders\n[shift-orders]\nrho_list = [0.1, 0.2, 0.05]\n",
    "[run]\nexperiment = shift-orders\nn_steps = 8\n[shift-orders]\nt0 = 0.25\nrho_list = [0.5, 0.3, 0.125]\n",
    "[run]\nexperiment = see-orders\n[see-orders]\nscheme = rk4\n",
    "not an ini file",
    "{ broken json",
])
def test_config_errors_exit_2(tmp_path, body):
    assert run(write(tmp_path, "c.ini", body), out=str(tmp_path / "o")) == 2


def test_missing_config_exit_2(tmp_path):
    assert run(str(tmp_path / "absent.ini"), out=str(tmp_path)) == 2


def test_numerical_error_exit_3(tmp_path):
    cfg = write(tmp_path, "c.ini", """
        [run]
        experiment = see-orders
        n_paths = 20
        [system]
        kind = scalar
        a = -1.0
        b = 1e200
        """)
    out = str(tmp_path / "o")
    assert run(cfg, out=out) == 3
    rep = report(out, "see-orders")
    assert rep["status"] == 3 and rep["error"]["type"] == "BlowupError"


def test_negative_control_exit_1(tmp_path):
    cfg = write(tmp_path, "c.ini", SMALL_SMP.replace("candidate = brute-force",
                                                     "candidate = brute-force-flipped"))
    out = str(tmp_path / "o")
    assert run(cfg, out=out) == 1
    body = rows(out, "smp-verdict")
    assert body[0] == ["t_index", "path_index", "control_index", "expression_value"]
    assert len(body) == 1 + 24 * 64


def test_strict_turns_warnings_into_failure(tmp_path):
    cfg = write(tmp_path, "c.ini", SMALL_SMP)
    assert run(cfg, out=str(tmp_path / "a")) == 0
    rep = report(str(tmp_path / "a"), "smp-verdict")
    assert rep["warnings"], "instance is expected to emit rank-deficiency warnings"
    assert run(cfg, out=str(tmp_path / "b"), strict=True) == 1
    names = [v["name"] for v in report(str(tmp_path / "b"), "smp-verdict")["verdicts"]]
    assert any(n.startswith("strict") for n in names)


def test_single_thread_byte_reproducible(tmp_path):
    cfg = write(tmp_path, "c.ini", SMALL_SMP)
    run(cfg, out=str(tmp_path / "a"), threads=1)
    run(cfg, out=str(tmp_path / "b"), threads=1)
    a = (tmp_path / "a" / "smp-verdict.csv").read_bytes()
    assert a == (tmp_path / "b" / "smp-verdict.csv").read_bytes()


def test_parallel_reproduces_statistics(tmp_path):
    cfg = os.path.join(CONFIGS, "see-orders.ini")
    run(cfg, out=str(tmp_path / "a"), threads=1, paths=500)
    run(cfg, out=str(tmp_path / "b"), threads=3, paths=500)
    assert rows(str(tmp_path / "a"), "see-orders") == rows(str(tmp_path / "b"), "see-orders")


def test_overrides_reach_report(tmp_path):
    out = str(tmp_path / "o")
    run(os.path.join(CONFIGS, "see-orders-zero.ini"), seed=42, paths=10, out=out)
    rep = report(out, "see-orders")
    assert rep["seed"] == 42 and rep["threads"] == 1


def test_seventeen_digit_floats_round_trip():
    for x in (0.1, 1 / 3, 2.0 ** -40, 123456.789e10):
        s = format_cell(x)
        digits = s.lstrip("-").split("e")[0].replace(".", "").lstrip("0")
        assert float(s) == x and len(digits) <= 17
    assert format_cell(7) == "7"


def test_argparse_errors_exit_2():
    assert main(["run"]) == 2
    assert main(["frobnicate", "x"]) == 2
    assert main(["run", "x.ini", "--threads", "0"]) == 2


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "seesmp.cli", "run",
                           os.path.join(CONFIGS, "shift-orders-zero.ini"), "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "EXACT-ZERO" in proc.stderr
