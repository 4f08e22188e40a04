import numpy as np
import pytest

from attrgau.graph import AttributeRecords


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


@pytest.fixture
def three_triples() -> AttributeRecords:
    # (v1,p1,q1), (v2,p1,q1), (v2,p1,q2) with order v1 v2 p1 q1 q2
    return AttributeRecords(np.array([[0, 0, 0], [1, 0, 0], [1, 0, 1]]), 2, 1, 2)


def random_records(rng: np.random.Generator, max_items=10, max_parents=4, max_leaves=8) -> AttributeRecords:
    nv = int(rng.integers(1, max_items + 1))
    np_ = int(rng.integers(1, max_parents + 1))
    nq = int(rng.integers(1, max_leaves + 1))
    k = int(rng.integers(0, 3 * nv + 1))
    triples = np.stack([rng.integers(0, nv, k), rng.integers(0, np_, k), rng.integers(0, nq, k)], axis=1)
    return AttributeRecords(triples.reshape(-1, 3), nv, np_, nq)
