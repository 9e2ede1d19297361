import os
from pathlib import Path

import pytest
import torch

from poisonlab.data import Dataset
from poisonlab.encoder import build_prompts, toy_encoder


def pytest_addoption(parser):
    parser.addoption("--paper-profile", action="store_true", default=False,
                     help="run the long paper-profile reproduction (hours, needs real datasets)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--paper-profile"):
        return
    skip = pytest.mark.skip(reason="paper profile is opt-in: pass --paper-profile")
    for item in items:
        if "paper_profile" in item.keywords:
            item.add_marker(skip)


CRITERIA: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    """Remember one acceptance verdict; all of them are echoed at the end of the run."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
    CRITERIA[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])


def make_dataset(n=40, c=4, shape=(3, 8, 8), seed=0, split="train", prefix="s"):
    gen = torch.Generator().manual_seed(seed)
    images = torch.rand((n, *shape), generator=gen)
    labels = torch.arange(n) % c
    ids = tuple(f"{prefix}/{i:04d}" for i in range(n))
    names = tuple(f"class{i}" for i in range(c))
    return Dataset(images, labels, ids, names, split)


@pytest.fixture
def small_train():
    return make_dataset()


@pytest.fixture
def small_external():
    return make_dataset(n=30, shape=(3, 16, 16), seed=1, split="external_pool", prefix="x")


@pytest.fixture(scope="session")
def toy():
    return toy_encoder(seed=7)


@pytest.fixture(scope="session")
def toy_prompts(toy):
    return build_prompts(["cat", "dog", "ship"], toy)


@pytest.fixture(scope="session")
def run_cache(tmp_path_factory) -> Path:
    """Output root shared by the slow end-to-end tests.

    Set ``POISONLAB_TEST_CACHE`` to keep trained victims across pytest sessions.
    """
    env = os.environ.get("POISONLAB_TEST_CACHE")
    if env:
        Path(env).mkdir(parents=True, exist_ok=True)
        return Path(env)
    return tmp_path_factory.mktemp("runs")
