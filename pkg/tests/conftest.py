import numpy as np
import pytest

from houghcnn.net import init_msra, parse_arch


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_net(name, rank=2, in_channels=1, num_classes=3, width=8, seed=0, dtype=np.float32, input_size=31):
    arch = parse_arch(name, rank=rank, in_channels=in_channels, num_classes=num_classes,
                      width=width, hidden=width, input_size=input_size)
    return init_msra(arch, seed=seed, dtype=dtype)


def randomize(net, rng, scale=0.1):
    """Give biases and PReLU slopes non-default values so every parameter matters."""
    for p in net.params:
        if "b" in p:
            p["b"] = (scale * rng.standard_normal(p["b"].shape)).astype(p["b"].dtype)
        if "alpha" in p:
            p["alpha"] = rng.uniform(0.05, 0.5, p["alpha"].shape).astype(p["alpha"].dtype)
    return net


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
