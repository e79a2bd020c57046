import numpy as np
import pytest


def randomize(module, rng, scale=0.4):
    """Replace every parameter with O(1) random values so no gradient is trivially small."""
    for name, p in module.named_parameters():
        base = 1.0 if name.endswith("gain") else 0.0
        p.data = base + scale * rng.standard_normal(p.shape)
    return module


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results):
            terminalreporter.write_line(results[key])
