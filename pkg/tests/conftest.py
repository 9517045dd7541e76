import numpy as np
import pytest

from synthrad import autodiff as ad
from synthrad.autodiff import Tape, Tensor


def projected_loss(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(out * weights); reduces any output to a scalar for checking."""
    if out.size == 1:
        return ad.reshape(ad.scale(out, float(weights.reshape(-1)[0])), ())
    return ad.sum_all(ad.mul(out, Tensor(weights.reshape(out.shape), dtype=out.data.dtype)))


def analytic_grads(fn, arrays, weights, dtype=np.float32):
    ts = [Tensor(a.astype(dtype), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = projected_loss(fn(*ts), weights)
    tape.backward(loss, wrt=ts)
    return [t.grad.astype(np.float64) for t in ts]


def numeric_grads(fn, arrays, weights, h=1e-3):
    """Central differences in float64 (the oracle side)."""
    base = [a.astype(np.float64) for a in arrays]

    def f(vals):
        out = fn(*[Tensor(v, dtype=np.float64) for v in vals])
        return float(np.sum(out.data.astype(np.float64) * weights.reshape(out.shape)))

    grads = []
    for k, a in enumerate(base):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f(base)
            flat[i] = old - h
            down = f(base)
            flat[i] = old
            g.reshape(-1)[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    scale = max(np.max(np.abs(n)), np.max(np.abs(a)), 1e-6)
    return float(np.max(np.abs(a - n)) / scale)


def max_grad_error(fn, arrays, rng: np.random.Generator, h=1e-3) -> float:
    out = fn(*[Tensor(a.astype(np.float64), dtype=np.float64) for a in arrays])
    weights = rng.standard_normal(out.shape if out.shape else (1,))
    a = analytic_grads(fn, arrays, weights)
    n = numeric_grads(fn, arrays, weights, h)
    return max(relative_error(x, y) for x, y in zip(a, n))


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)


ACCEPTANCE_RESULTS: dict[int, tuple[str, str]] = {}


def record_acceptance(number: int, title: str, passed: bool) -> None:
    line = f"ACCEPTANCE {number:2d} {'PASS' if passed else 'FAIL'}: {title}"
    ACCEPTANCE_RESULTS[number] = ("PASS" if passed else "FAIL", line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[number][1])
