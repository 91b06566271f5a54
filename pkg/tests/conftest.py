import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kdlab.data import gen_gaussian_mixture, gen_patterned_images
from kdlab.train import ScheduleSpec, Splits

settings.register_profile("kdlab", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("kdlab")


@pytest.fixture(scope="session")
def blobs() -> Splits:
    """Small 4-class vector task."""
    kw = dict(K=4, dims=6, spread=1.0, seed=3)
    return Splits(gen_gaussian_mixture(per_class=25, split="train", **kw),
                  gen_gaussian_mixture(per_class=25, split="test", **kw))


@pytest.fixture(scope="session")
def images() -> Splits:
    kw = dict(K=3, H=8, W=8, noise=0.5, seed=2)
    return Splits(gen_patterned_images(per_class=12, split="train", **kw),
                  gen_patterned_images(per_class=12, split="test", **kw))


@pytest.fixture
def short_schedule() -> ScheduleSpec:
    return ScheduleSpec(4, "step", 0.1, 0.2, 2, batch_size=16)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record ``(passed, detail)`` for an acceptance criterion; printed in the terminal summary."""
    store = request.config.stash.setdefault(CRITERIA, {})

    def record(name: str, passed: bool, detail: str) -> bool:
        store[name] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(CRITERIA, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(store, key=lambda n: int(n.split()[1].rstrip(":"))):
        passed, detail = store[name]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
