import time

import numpy as np
import pytest

from maskexplain.blackbox import RegionMeanModel, generate_shape_corpus, train_tiny_cnn

ACCEPTANCE_LINES = []
TIMINGS = {}


def central_differences(f, x, h=1e-6):
    """Central-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_l2(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def region_instance(seed, size=16, side=4, background=0.1):
    """RegionMeanModel with a bright square region on a faint textured background."""
    rng = np.random.default_rng(seed)
    y, x = (int(v) for v in rng.integers(0, size - side + 1, size=2))
    model = RegionMeanModel.from_boxes(size, size, [(x, y, x + side, y + side)])
    img = background * rng.random((size, size, 1))
    img[y : y + side, x : x + side] = 1.0
    return model, img, (x, y, x + side, y + side)


@pytest.fixture(scope="session")
def shape_split():
    corpus = generate_shape_corpus(2500, seed=0)
    return corpus.subset(0, 2000), corpus.subset(2000, 2500)


@pytest.fixture(scope="session")
def trained_cnn(shape_split):
    train, test = shape_split
    start = time.perf_counter()
    model, report = train_tiny_cnn(train, epochs=10, lr=0.05, seed=0, test_corpus=test)
    TIMINGS["train"] = time.perf_counter() - start
    return model, report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
