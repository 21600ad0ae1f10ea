import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from protomlc.datamodel import SynthConfig, synthesize

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def weighted_sum(t, rng):
    """Scalar probe with random weights so that no gradient entry vanishes by symmetry."""
    from protomlc import diffcore as dc

    w = rng.uniform(0.5, 1.5, size=t.shape) * rng.choice([-1.0, 1.0], size=t.shape)
    return dc.tsum(t * w)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    cfg = SynthConfig(num_classes=4, d_v=6, d_t=5, tokens_v=4, tokens_t=3, n_train=48, n_val=8, n_test=16,
                      fine_grained_pairs=[[0, 1]], num_superclasses=2, seed=3)
    return synthesize(cfg)[0]


ACCEPTANCE_LINES: list[str] = []


def acceptance_line(number: int, passed: bool, text: str) -> None:
    line = f"[criterion {number}] {'PASS' if passed else 'FAIL'}: {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
