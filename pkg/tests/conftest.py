import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

# BLAS thread pools are sized at import; keep every test run single-threaded
os.environ.setdefault("OPENBLAS_NUM_THREADS", os.environ.get("LPKD_THREADS", "1"))
os.environ.setdefault("OMP_NUM_THREADS", os.environ.get("LPKD_THREADS", "1"))

ACCEPTANCE = []  # (criterion, passed, detail) recorded by test_acceptance.py


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        status = "PASS" if passed is True else ("SKIP" if passed is None else "FAIL")
        terminalreporter.write_line(f"{status}  {name}: {detail}")
