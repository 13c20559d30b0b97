import numpy as np
import pytest

from gpmm.synthetic import head_template


def brute_force_nearest(src, tgt):
    """Quadratic nearest-neighbor oracle, independent of any tree structure."""
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    out = np.empty(len(src))
    for i, p in enumerate(src):
        out[i] = np.sqrt(np.min(np.sum((tgt - p) ** 2, axis=1)))
    return out


@pytest.fixture(scope="session")
def head():
    mesh, landmarks = head_template()
    return mesh, landmarks


@pytest.fixture(scope="session")
def small_head():
    mesh, landmarks = head_template(rings=10, segments=10)
    return mesh, landmarks
