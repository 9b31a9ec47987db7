import numpy as np
import pytest

from simplicits import mlp, occupancy as oc


def constant_net(n=1, extra='none', center=(0.0, 0.0, 0.0), scale=1.0):
    """
    Hand-built width-1 net.  Handle 0 is the constant 1.  With ``extra='elu'``
    handle 1 is ELU(x) (x in normalized coordinates); with ``extra='linear'``
    it is exactly x.
    """
    net = mlp.init_network(n, 1, 1, 0, input_center=center, input_scale=scale)
    p = np.zeros_like(net.params)
    (W0, b0), (W1, b1) = net.layers(p)
    b1[0] = 1.0
    if n > 1 and extra != 'none':
        W0[0, 0] = 1.0
        W1[0, 1] = 1.0
        if extra == 'linear':
            # keep the hidden unit on the linear branch of the ELU
            b0[0] = 10.0
            b1[1] = -10.0
    return mlp.SkinningField(n, 1, 1, p, center, scale)


@pytest.fixture
def unit_cube():
    return oc.build_occupancy(
        {'type': 'box', 'min': (0, 0, 0), 'max': (1, 1, 1), 'bbox': ((0, 0, 0), (1, 1, 1))},
        [oc.MaterialRegion(density=1000.0, youngs=2.0, poisson=0.25)],
    )


@pytest.fixture
def bar():
    return oc.build_occupancy(
        {'type': 'beam', 'size': (2.0, 0.5, 0.5)},
        [oc.MaterialRegion(youngs=1e5, poisson=0.45)],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion(request):
    """Record ``(number, passed, detail)`` for the end-of-run summary."""

    def record(number, passed, detail):
        line = f'criterion {number:>2}: {"PASS" if passed else "FAIL"}  {detail}'
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section('acceptance criteria')
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
