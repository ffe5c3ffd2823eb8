import numpy as np
import pytest


def brute_b(positions, moments, pts):
    """Plain numpy dipole superposition, one dipole at a time."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    out = np.zeros_like(pts)
    for p, m in zip(np.asarray(positions), np.asarray(moments)):
        r = pts - p
        rn = np.linalg.norm(r, axis=1, keepdims=True)
        rhat = r / rn
        out += 1e-7 * (3 * (rhat @ m)[:, None] * rhat - m) / rn ** 3
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sphere_dirs(n, seed=0):
    v = np.random.default_rng(seed).normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)
