import pytest
import torch

from pivot_vcil.core import Dims, ExperimentConfig
from pivot_vcil.encoders import SyntheticEncoderSuite


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_suite():
    """8-wide, 4-token, 2-frame instance used by gradient and shape tests."""
    return SyntheticEncoderSuite(3, L=4, D_in=8, D_m=8, T=2, seed=3)


@pytest.fixture
def clean_suite():
    return SyntheticEncoderSuite(6, L=5, D_in=16, D_m=16, T=4, sigma=0.0, seed=1)


@pytest.fixture
def small_cfg():
    """A quick 3-task stream for behavioural tests."""
    return ExperimentConfig(
        variant="pivot", n_classes=6, n_tasks=3, dims=Dims(T=4, L=5, D_in=16, D_m=16),
        memory_budget=30, epochs=3, train_per_class=10, eval_per_class=4, seed=0,
    )


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
