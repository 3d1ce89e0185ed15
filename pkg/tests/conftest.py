from __future__ import annotations

import numpy as np
import pytest

from focus.fixtures import generate_corpus
from focus.geometry import RasterImage


@pytest.fixture
def tiny_image():
    # 2x2: rows are [(10,10,10),(20,20,20)] and [(30,30,30),(40,40,40)]
    arr = np.array(
        [[[10, 10, 10], [20, 20, 20]], [[30, 30, 30], [40, 40, 40]]],
        dtype=np.uint8,
    )
    return RasterImage(arr)


@pytest.fixture
def gradient_image():
    # 4x4 with pixel(x, y) = (x, y, 0)
    arr = np.zeros((4, 4, 3), dtype=np.uint8)
    for y in range(4):
        for x in range(4):
            arr[y, x] = (x, y, 0)
    return RasterImage(arr)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus") / "seed42"
    info = generate_corpus(42, out)
    return info
