import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from entailtree import synth  # noqa: E402
from entailtree.data import load_dataset, write_jsonl  # noqa: E402


@pytest.fixture(scope="session")
def world():
    return synth.make_world(0)


@pytest.fixture(scope="session")
def toy_splits(tmp_path_factory, world):
    """Small synthetic benchmark: task-1 style (no distractors) and task-2 style splits."""
    root = tmp_path_factory.mktemp("toybench")
    for task, nd in ((1, 0), (2, 8)):
        d = root / f"task_{task}"
        d.mkdir()
        for split, n, seed in (("train", 150, 1), ("dev", 30, 2)):
            write_jsonl(synth.synth_benchmark(n, seed=seed, n_distractors=nd, world=world), d / f"{split}.jsonl")
    return root


@pytest.fixture(scope="session")
def toy_dev(toy_splits):
    return load_dataset(toy_splits / "task_1" / "dev.jsonl")


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
