import numpy as np
import pytest


def central_difference(f, x, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def fd():
    return central_difference


@pytest.fixture
def rel_err():
    return max_rel_err


# ---------------------------------------------------------------- acceptance

ACCEPTANCE_RESULTS = {}


@pytest.fixture
def acceptance():
    """``acceptance(n, passed, detail, **data)`` records one criterion outcome."""

    def record(n, passed, detail, **data):
        ACCEPTANCE_RESULTS[n] = {"passed": bool(passed), "detail": detail, **data}
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS, key=lambda k: (int(str(k).rstrip("*")), str(k))):
        res = ACCEPTANCE_RESULTS[n]
        status = res.get("status") or ("PASS" if res["passed"] else "FAIL")
        terminalreporter.write_line(f"criterion {n}: {status} - {res['detail']}")
    import json
    import os

    path = os.environ.get("ANGIOMIM_ACCEPTANCE_REPORT", os.path.join(os.path.dirname(__file__), "..", "acceptance_report.json"))
    with open(path, "w") as fh:
        json.dump({str(k): v for k, v in sorted(ACCEPTANCE_RESULTS.items(), key=lambda kv: str(kv[0]))}, fh, indent=2)
        fh.write("\n")
