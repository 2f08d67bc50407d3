import numpy as np
import pytest


def numerical_grad(f, x, eps=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_err(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------------ acceptance report

_ACCEPTANCE_LINES: list[str] = []


class _Criterion:
    def __init__(self, name):
        self.name = name
        self.details: list[str] = []

    def note(self, text):
        self.details.append(str(text))

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.details)
        if exc_type is not None and not self.details:
            detail = f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        _ACCEPTANCE_LINES.append(f"{status}  {self.name}" + (f"  [{detail}]" if detail else ""))
        return False


@pytest.fixture(scope="session")
def criterion():
    """Context-manager factory: ``with criterion("name") as c:`` logs one PASS/FAIL line."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
