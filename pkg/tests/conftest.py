import numpy as np
import pytest

from cbalab.buffer import Batch
from cbalab.nn import ModelSpec, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_batch(rng, n, dim, classes, logits=False):
    x = rng.normal(size=(n, dim))
    y = rng.integers(0, classes, size=n)
    z = rng.normal(size=(n, classes)) if logits else None
    return Batch(x, y, z, np.arange(n))


def small_params(seed=0, dim=5, classes=4, widths=(6,), hidden=7, perturb_omega=True):
    params = init_params(ModelSpec(dim, classes, widths, hidden, seed=seed))
    if perturb_omega:
        r = np.random.default_rng(seed + 100)
        params = params.replace({k: r.normal(scale=0.3, size=params[k].shape) for k in ("cba.W2", "cba.b2")})
    return params


ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(criterion: str, passed: bool, detail: str) -> None:
    ACCEPTANCE.append((criterion, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in sorted(ACCEPTANCE, key=lambda r: (int(r[0].split()[0]), r[0])):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
