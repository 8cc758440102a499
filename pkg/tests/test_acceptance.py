"""The fifteen acceptance criteria, each run from its bundled config at full size.

Every case runs the same path as ``bnnshift run <name>`` and records a one-line
verdict that conftest prints in the terminal summary.
"""

import time

import pytest

import helpers
from bnnshift import cli

CRITERIA = cli.registry()


def _verdict(report):
    parts = [f"{c['name']}={c['value']:.4g} ({c['bound']})" for c in report["checks"]]
    return "; ".join(parts)


@pytest.mark.slow
@pytest.mark.parametrize("crit, name", [(c, n) for c, n, _ in CRITERIA], ids=[n for _, n, _ in CRITERIA])
def test_criterion(tmp_path, crit, name):
    cfg = cli.load_config(name)
    start = time.perf_counter()
    try:
        report = cli.execute(cfg, tmp_path / name)
    except Exception as exc:
        helpers.ACCEPTANCE[crit] = f"FAIL criterion {crit:2d} {name}: {type(exc).__name__}: {exc}"
        raise
    took = time.perf_counter() - start
    status = "PASS" if report["passed"] else "FAIL"
    line = f"{status} criterion {crit:2d} {name} [{took:.0f} s]: {_verdict(report)}"
    helpers.ACCEPTANCE[crit] = line
    print(line)
    assert report["checks"], "protocol produced no checks"
    failed = [c["name"] for c in report["checks"] if not c["passed"]]
    assert report["passed"], f"failed checks: {failed}"
