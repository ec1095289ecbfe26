import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tsar.data import synthetic_glyphs
from tsar.model import ClassifierConfig, RegulatorConfig, build, init_regulation_bias

settings.register_profile("tsar", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("tsar")

SMALL_SHAPE = (3, 22, 22)


def small_model(mode="grow", num_classes=4, seed=0, variant="tsar"):
    """A fast gated model: 22x22 input keeps every stage above one pixel."""
    clf = ClassifierConfig(in_shape=SMALL_SHAPE, conv_channels=4, num_classes=num_classes, pool_last=False)
    model = build(clf, RegulatorConfig(conv_channels=4), seed=seed, variant=variant)
    if variant == "tsar":
        init_regulation_bias(model, mode)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def meta_glyphs():
    return synthetic_glyphs(4, 20, in_shape=SMALL_SHAPE, seed=3, split=(15, 5))


@pytest.fixture(scope="session")
def transfer_glyphs():
    return synthetic_glyphs(8, 24, in_shape=SMALL_SHAPE, seed=4, domain=1)


# ---------------------------------------------------------------------------
# acceptance report
# ---------------------------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def record(number: int, title: str, passed: bool, detail: str) -> None:
    """Store (and print) one acceptance line; the summary hook lists them in order."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d} {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
