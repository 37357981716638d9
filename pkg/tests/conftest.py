import numpy as np
import pytest

from tspf.autodiff import Tensor


def central_difference(fn, arrays, step=1e-5):
    """Numerical gradient of scalar ``fn()`` w.r.t. each array, perturbing in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = arr[i]
            arr[i] = orig + step
            up = fn()
            arr[i] = orig - step
            down = fn()
            arr[i] = orig
            g[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def assert_grad_matches(loss_fn, tensors, rtol=1e-4, step=1e-5):
    """Autodiff gradient of ``loss_fn()`` vs central differences, per-entry relative error."""
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    auto = [t.grad.copy() for t in tensors]
    numeric = central_difference(lambda: loss_fn().item(), [t.data for t in tensors], step)
    for a, n in zip(auto, numeric):
        rel = np.abs(a - n) / (np.abs(n) + 1e-8)
        assert rel.max() <= rtol, f"max rel err {rel.max():.3e}"
    for t in tensors:
        t.grad = None


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def leaf(rng):
    def make(*shape, scale=1.0):
        return Tensor(rng.normal(size=shape) * scale, requires_grad=True)

    return make


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL/SKIP line per acceptance criterion; returns the verdict."""

    def record(number: int, title: str, verdict, detail: str):
        status = verdict if isinstance(verdict, str) else ("PASS" if verdict else "FAIL")
        line = f"criterion {number:>2} {status:<4} {title}: {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return verdict

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
