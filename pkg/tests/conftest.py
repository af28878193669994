import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, n, cond=50.0, scale=1.0):
    """Random SPD matrix with eigenvalues log-spread over [scale/cond, scale]."""
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    lam = scale * np.exp(rng.uniform(-np.log(cond), 0.0, size=n))
    lam[0], lam[-1] = scale / cond if n > 1 else lam[0], scale
    return q @ np.diag(lam) @ q.T


# acceptance criteria register one line each; the terminal summary prints them
_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    def record(number: int, title: str, ok: bool, detail: str):
        _ACCEPTANCE[number] = (title, bool(ok), detail)
        print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
