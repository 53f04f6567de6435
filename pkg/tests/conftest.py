import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_psd(rng, n, rank=None):
    g = rng.standard_normal((rank or n, n))
    return g.T @ g


def projector(q):
    return q @ q.T


def numeric_grads(model, x, targets, step=1e-5):
    """Central finite differences of the loss for every trainable tensor."""
    from tailspace.model import forward, loss

    out = {}
    for name, p in model.parameters().items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            keep = p[idx]
            p[idx] = keep + step
            up = loss(forward(model, x)[0], targets)
            p[idx] = keep - step
            down = loss(forward(model, x)[0], targets)
            p[idx] = keep
            g[idx] = (up - down) / (2 * step)
        out[name] = g
    return out


def grad_rel_error(analytic, numeric):
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        scale = max(np.max(np.abs(n)), np.max(np.abs(a)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n)) / scale))
    return worst


# acceptance verdicts, printed as one line per criterion at the end of the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
