import numpy as np
import pytest

from mtvsr.volume import GridSpec


def dense_matrix(fn, in_shape, out_shape):
    """Materialise a linear map by applying it to every basis vector."""
    n_in = int(np.prod(in_shape))
    cols = []
    for j in range(n_in):
        e = np.zeros(n_in, np.float32)
        e[j] = 1.0
        cols.append(np.asarray(fn(e.reshape(in_shape)), np.float64).ravel())
    return np.stack(cols, axis=1).reshape(int(np.prod(out_shape)), n_in)


def lr_grid(dims, voxel, origin=(0.0, 0.0, 0.0)):
    a = np.diag(list(voxel) + [1.0])
    a[:3, 3] = origin
    return GridSpec(dims, a)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
