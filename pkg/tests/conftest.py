import numpy as np
import pytest

from hgpe.gradcheck import jitter
from hgpe.nn import BatchNorm, Module


def randomize(module: Module, seed: int) -> Module:
    """Seeded init, noise on every parameter, random running statistics."""
    rng = np.random.default_rng(seed)
    jitter(module, rng)
    for _, m in module.modules():
        if isinstance(m, BatchNorm):
            m.running_mean.data = rng.standard_normal(m.channels)
            m.running_var.data = rng.uniform(0.5, 2.0, m.channels)
    return module


def param_dict(module: Module) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in module.named_tensors()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, str] = {}


def record_criterion(n: int, passed: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}"
    _CRITERIA[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
