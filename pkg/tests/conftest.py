import gzip
import struct

import numpy as np
import pytest

from ditherprop.data import synthetic_gaussian_task


def write_idx(path, array, magic, gz=False):
    array = np.asarray(array, dtype=np.uint8)
    raw = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    raw += array.tobytes()
    opener = gzip.open if gz else open
    with opener(path, "wb") as f:
        f.write(raw)
    return path


@pytest.fixture
def small_task():
    train = synthetic_gaussian_task(256, 12, 3, seed=3, separation=8.0, noise=0.2)
    test = synthetic_gaussian_task(128, 12, 3, seed=3, separation=8.0, noise=0.2, split="test")
    return train, test


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
