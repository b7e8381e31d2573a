import numpy as np
import pytest

from varproreg import problems


def central_diff(f, x, h=1e-6):
    """Column-wise central differences of a vector or scalar map."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e), dtype=float) - np.asarray(f(x - e), dtype=float)) / (2 * h))
    return np.stack(cols, axis=-1)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture(scope="session")
def small_pair():
    return problems.rotated_pair(16, angle_deg=20.0, lam=0.1)


@pytest.fixture(scope="session")
def sr_problem():
    return problems.superres_problem(0)


@pytest.fixture(scope="session")
def tiny_sr():
    """8x8 fine image, 4x4 templates, two free transforms."""
    return problems.superres_problem(0, n=8, q=2)
