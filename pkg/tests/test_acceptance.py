"""Acceptance checks 1-10, one printed PASS/FAIL line each.

Runs the shipped configs end to end; takes several minutes.  Also runnable
directly: ``python3 tests/test_acceptance.py``.
"""
import csv
import functools
import json
import os
import sys
import tempfile

import pytest

from seesmp.cli import run

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")
EXPERIMENT = {
    "bsie": "bsie-equivalence", "see": "see-orders", "ito": "ito-orders",
    "shift": "shift-orders", "variation": "variation-orders", "hat": "hat-orders",
    "smp": "smp-verdict",
}


@functools.lru_cache(maxsize=None)
def execute(config, threads=1):
    out = tempfile.mkdtemp(prefix="accept-")
    status = run(os.path.join(CONFIGS, config), out=out, threads=threads,
                 stream=open(os.devnull, "w"))
    name = EXPERIMENT[config.split("-")[0]]
    with open(os.path.join(out, f"{name}.json")) as fh:
        report = json.load(fh)
    with open(os.path.join(out, f"{name}.csv"), "rb") as fh:
        raw = fh.read()
    return status, report, raw


def verdict(report, name=None, kind=None):
    for v in report["verdicts"]:
        if (name is None or v["name"] == name) and (kind is None or v.get("kind") == kind):
            return v
    raise KeyError(name or kind)


def slope_in(v, lo, hi=float("inf")):
    return v["passed"] and lo <= v["slope"] <= hi and v["r_squared"] >= 0.95


def slope_at_least(v, lo):
    return v["passed"] and v["slope"] >= lo


def criterion_1():
    detail = []
    ok = True
    for cfg in ("bsie-equivalence-scalar.ini", "bsie-equivalence-n2.ini",
                "bsie-equivalence-n2-linear.ini"):
        status, rep, raw = execute(cfg)
        errs = [float(r["frobenius_rel_error"])
                for r in csv.DictReader(raw.decode().splitlines())]
        ok &= status == 0 and max(errs) <= 1e-2
        detail.append(f"{cfg.split('.')[0]} max {max(errs):.2e}")
    return ok, "; ".join(detail)


def criterion_2():
    status, rep, _ = execute("bsie-equivalence-scalar.ini")
    v = verdict(rep, "closed-form adjoint")
    return status == 0 and v["passed"], "closed form within 3 SE + 2 dt |2a+b^2| P"


def criterion_3():
    _, rep, _ = execute("see-orders.ini")
    v = verdict(rep, kind="o")
    _, rep0, _ = execute("see-orders-zero.ini")
    v0 = verdict(rep0, kind="o")
    ok = slope_at_least(v, 0.75) and v0["verdict"] == "exact-zero"
    return ok, f"slope {v['slope']:.3f}; zero drift: {v0['verdict']}"


def criterion_4():
    detail = []
    ok = True
    for cfg in ("ito-orders-scalar.ini", "ito-orders-scalar-beta.ini", "ito-orders-spde.ini"):
        status, rep, _ = execute(cfg)
        sig, z = rep["verdicts"][0], rep["verdicts"][1]
        ok &= (status == 0 and slope_at_least(sig, 1.25) and sig["r_squared"] >= 0.95
               and slope_in(z, 0.75, 1.25))
        detail.append(f"{cfg.split('.')[0]} sigma {sig['slope']:.2f} Z {z['slope']:.2f}")
    return ok, "; ".join(detail)


def criterion_5():
    _, rep, _ = execute("shift-orders.json")
    v = rep["verdicts"][0]
    _, rep0, _ = execute("shift-orders-zero.ini")
    ok = slope_in(v, 1.75, 2.25) and rep0["verdicts"][0]["verdict"] == "exact-zero"
    return ok, f"slope {v['slope']:.3f}; zero operators: {rep0['verdicts'][0]['verdict']}"


def criterion_6():
    status, rep, _ = execute("variation-orders.ini")
    x1, x2, xr, rem = rep["verdicts"][:4]
    ok = (status == 0 and slope_in(x1, 0.75, 1.25) and slope_in(x2, 1.75, 2.25)
          and slope_in(xr, 0.75, 1.25) and slope_at_least(rem, 2.25))
    slopes = ", ".join(f"{v['slope']:.2f}" for v in (x1, x2, xr, rem))
    return ok, f"slopes {slopes}"


def criterion_7():
    status, rep, _ = execute("hat-orders.ini")
    y = verdict(rep, "sup_t E|yhat|")
    d = verdict(rep, "sup_t E|yhat^rho - yhat|")
    g = verdict(rep, "duality = yhat(0)")
    ok = status == 0 and slope_in(y, 0.75, 1.25) and slope_at_least(d, 1.25) and g["passed"]
    return ok, f"yhat slope {y['slope']:.3f}, difference slope {d['slope']:.3f}, duality ok"


def criterion_8():
    s_ok, rep_ok, _ = execute("smp-verdict-bangbang.ini")
    s_flip, _, _ = execute("smp-verdict-flipped.ini")
    s_lq, rep_lq, _ = execute("smp-verdict-lq.ini")
    ok = s_ok == 0 and s_flip == 1 and s_lq == 0
    frac = verdict(rep_lq, "maximum principle")["fraction_ok"]
    return ok, f"oracle exit {s_ok}, flipped exit {s_flip}, LQ exit {s_lq} (fraction {frac:.4f})"


def criterion_9():
    import _pytest.config
    modules = [os.path.join(ROOT, "tests", f) for f in sorted(os.listdir(os.path.join(ROOT, "tests")))
               if f.startswith("test_") and f != "test_acceptance.py"]

    class Count:
        passed = failed = 0

        def pytest_runtest_logreport(self, report):
            if report.when == "call":
                if report.passed:
                    Count.passed += 1
                elif report.failed:
                    Count.failed += 1

    code = pytest.main(["-q", "-m", "exact", "-p", "no:cacheprovider", *modules],
                       plugins=[Count()])
    ok = code == _pytest.config.ExitCode.OK and Count.failed == 0 and Count.passed > 0
    return ok, f"{Count.passed} exact examples passed, {Count.failed} failed"


def criterion_10():
    a = execute("smp-verdict-bangbang.ini", threads=1)[2]
    execute.cache_clear()
    b = execute("smp-verdict-bangbang.ini", threads=1)[2]
    return a == b, f"{len(a)} CSV bytes, identical={a == b}"


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
            criterion_6, criterion_7, criterion_8, criterion_9, criterion_10]


def report_line(k, ok, detail):
    return f"criterion {k}: {'PASS' if ok else 'FAIL'} ({detail})"


@pytest.mark.slow
@pytest.mark.parametrize("k", range(1, 11))
def test_criterion(k, capsys):
    ok, detail = CRITERIA[k - 1]()
    with capsys.disabled():
        print("\n" + report_line(k, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    results = [(k, *fn()) for k, fn in enumerate(CRITERIA, 1)]
    for k, ok, detail in results:
        print(report_line(k, ok, detail))
    sys.exit(0 if all(ok for _, ok, _ in results) else 1)
