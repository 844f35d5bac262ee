import sys

import numpy as np
import pytest

from semar import tensor as T


@pytest.fixture(autouse=True)
def _reset_engine():
    T.set_default_dtype(np.float32)
    T.tape().clear()
    yield
    T.set_default_dtype(np.float32)
    T.tape().clear()


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is None or not getattr(acc, "RESULTS", None):
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for n in sorted(acc.CRITERIA):
        if n in acc.RESULTS:
            ok, detail = acc.RESULTS[n]
            verdict = "PASS" if ok else "FAIL"
        else:
            verdict, detail = "NOT RUN", acc.CRITERIA[n]
        terminalreporter.write_line(f"[criterion {n}] {verdict} - {detail}")
