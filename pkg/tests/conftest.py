import numpy as np
import pytest

from mixcaps import tensor as T


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def check_op_gradients(build, inputs, h=1e-5, seed=0):
    """Compare taped gradients of ``sum(w * build(*inputs))`` with finite differences."""
    rng = np.random.default_rng(seed)
    params = [T.Tensor(x.copy(), requires_grad=True) for x in inputs]
    with T.GradientTape() as tape:
        out = build(*params)
    w = rng.normal(size=out.shape)

    def scalar():
        return float(np.sum(w * build(*params).data))

    with T.GradientTape() as tape:
        out = build(*params)
        loss = T.sum_(T.mul(out, w))
    grads = tape.backward(loss, params)
    return [rel_err(grads[p], numeric_grad(scalar, p.data, h)) for p in params]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def record_criterion(request):
    """Record a one-line verdict for an acceptance criterion (printed in the summary)."""
    lines = request.config.__dict__.setdefault("_mixcaps_acceptance", {})

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        lines[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} | {detail}"
        print(lines[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_mixcaps_acceptance")
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
