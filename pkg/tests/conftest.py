import numpy as np
import pytest

from mgcp_cox.kernels import KernelParams


def random_kernel_params(rng, N, K, span=10.0):
    return KernelParams(
        lengthscales=rng.uniform(0.1, 0.4, size=K) * span,
        widths=rng.uniform(0.05, 0.3, size=(N, K)) * span,
        scales=rng.normal(0.0, 1.0, size=(N, K)),
        noise_sd=rng.uniform(0.1, 0.5),
    )


def random_inputs(rng, sizes, span=10.0):
    return [np.sort(rng.uniform(0.0, span, size=n)) for n in sizes]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
