import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from watchdial.programs import DIALOGUE, VIDEO, ModuleKind, Program, ProgramStep


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


WORDS = ["a", "boy", "backpack", "carrying", "dog", "old", "how", "red", "it", "near"]


def random_program(rng, kind=None):
    """A random grammar-valid program over a small word pool."""
    if kind is None:
        kind = DIALOGUE if rng.random() < 0.5 else VIDEO

    def params():
        n = int(rng.integers(1, 4))
        return tuple(WORDS[i] for i in rng.integers(0, len(WORDS), size=n))

    steps = []
    if kind == DIALOGUE:
        for _ in range(int(rng.integers(0, 4))):
            steps.append(ProgramStep(params(), ModuleKind.FIND))
        steps.append(ProgramStep((), ModuleKind.SUMMARIZE))
    else:
        for _ in range(int(rng.integers(1, 4))):
            steps.append(ProgramStep(params(), ModuleKind.WHERE))
        for _ in range(int(rng.integers(0, 3))):
            steps.append(ProgramStep(params(), ModuleKind.WHEN))
        if rng.random() < 0.5:
            steps.append(ProgramStep(params(), ModuleKind.DESCRIBE))
        else:
            steps.append(ProgramStep((), ModuleKind.EXIST))
    return Program(kind, tuple(steps))
