import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def random_blob_mask(rng, h, w, min_fg=1):
    """Random mask (0 = object) whose object is a union of a few rectangles."""
    while True:
        m = np.ones((h, w), dtype=np.uint8)
        for _ in range(rng.integers(1, 4)):
            r0, c0 = rng.integers(0, h), rng.integers(0, w)
            r1, c1 = r0 + rng.integers(1, max(2, h // 2)), c0 + rng.integers(1, max(2, w // 2))
            m[r0:r1, c0:c1] = 0
        if min_fg <= (m == 0).sum() < h * w:
            return m


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
