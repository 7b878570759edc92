import numpy as np
import pytest
from hypothesis import settings

from phimodule.molgraph import AtomicSystem
from phimodule.tensor import Tape, Tensor

settings.register_profile("repo", max_examples=40, deadline=None, derandomize=True)
settings.load_profile("repo")


def fd_gradient(f, x, step=1e-5):
    """Central differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        x0 = flat[i]
        flat[i] = x0 + step
        fp = f(x)
        flat[i] = x0 - step
        fm = f(x)
        flat[i] = x0
        gf[i] = (fp - fm) / (2 * step)
    return g


def tape_gradient(build, x):
    """Gradient of the scalar ``build(Tensor)`` through the tape."""
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        out = build(t)
    return tape.backward(out)[t]


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def random_molecule(rng, n, box=4.0, dmin=0.9, z_choices=(1, 6, 7, 8)):
    pos = []
    while len(pos) < n:
        c = rng.uniform(0, box, 3)
        if all(np.linalg.norm(c - p) >= dmin for p in pos):
            pos.append(c)
    return AtomicSystem(np.array(pos), rng.choice(z_choices, n))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
