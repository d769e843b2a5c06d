import numpy as np
import pytest

from scanirl import dataio
from scanirl.beliefs import GRID_H, GRID_W, BeliefStack
from scanirl.nets import ArchConfig
from scanirl.searchenv import SearchTrial

TINY = ArchConfig((6, 5, 4), (4, 6), 8)


def make_trial(bbox=(200.0, 100.0, 40.0, 40.0), task="knife", seed=0, c=4, image="img0"):
    rng = np.random.default_rng(seed)
    names = (task,) + tuple(f"ctx{i}" for i in range(c - 1))
    low = BeliefStack(rng.random((c, GRID_H, GRID_W)) * 0.5, names, "low", c)
    high = BeliefStack(rng.random((c, GRID_H, GRID_W)), names, "high", c)
    return SearchTrial(image, task, bbox, low, high)


@pytest.fixture(scope="session")
def small_corpus():
    return dataio.generate_synthetic_corpus(dataio.SyntheticSceneConfig(scenes_per_task=12, seed=3))


@pytest.fixture(scope="session")
def small_dataset(small_corpus):
    return small_corpus.dataset()


@pytest.fixture
def trial():
    return make_trial()


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def record_criterion(label: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
