import numpy as np
import pytest


def central_difference(f, x, step=1e-5):
    """Central finite-difference gradient of scalar ``f`` at flat vector ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + step
        hi = f(x)
        x[i] = old - step
        lo = f(x)
        x[i] = old
        grad[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / scale


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")
    config._criterion_lines = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criterion_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one PASS/FAIL line for the summary."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config._criterion_lines[number] = line
        print(line)
        return ok

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def reference_mlp(params, dims, x, tanh=False):
    """Loop-level MLP evaluation, independent of the package.

    ``dims`` lists layer widths from input to output; ``params`` stores each
    layer as a row-major (fan_in, fan_out) weight block followed by its bias.
    """
    params = [float(p) for p in params]
    out = []
    for row in np.atleast_2d(x):
        h = [float(v) for v in row]
        pos = 0
        for layer, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
            w = params[pos:pos + fi * fo]
            b = params[pos + fi * fo:pos + fi * fo + fo]
            pos += fi * fo + fo
            h = [sum(h[i] * w[i * fo + j] for i in range(fi)) + b[j] for j in range(fo)]
            if layer < len(dims) - 2:
                h = [max(v, 0.0) for v in h]
        if tanh:
            h = [float(np.tanh(v)) for v in h]
        out.append(h)
    return np.array(out)
