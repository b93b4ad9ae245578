import numpy as np
import pytest

from hrg.tensor import Tensor

ACCEPTANCE_LINES = []


def numeric_grad(f, arrays, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. each array (mutated in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f()
            a[i] = old - h
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def check_grad(build, shapes, rng, h=1e-5, scale=1.0):
    """Compare analytic and central-difference gradients of ``build(*tensors)``.

    Returns the relative error over all inputs.
    """
    arrays = [rng.standard_normal(s) * scale for s in shapes]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    build(*tensors).backward()
    analytic = [t.grad for t in tensors]

    def f():
        return float(build(*[Tensor(a) for a in arrays]).data)

    numeric = numeric_grad(f, arrays, h)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
