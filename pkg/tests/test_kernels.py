import itertools

import numpy as np
import pytest

from graphtrack import _pykernels, kernels

native = pytest.mark.skipif(not kernels.native_available(), reason="compiled kernels not built")


def random_boxes(rng, n):
    c = rng.uniform(0.1, 0.9, size=(n, 2))
    s = rng.uniform(0.02, 0.3, size=(n, 2))
    return np.hstack([c, s])


def brute_assignment(cost):
    """Minimum total finite cost over all partial matchings, maximizing match count first."""
    n, m = cost.shape
    best = (0, 0.0)
    for k in range(min(n, m), 0, -1):
        found = False
        for rows in itertools.combinations(range(n), k):
            for cols in itertools.permutations(range(m), k):
                c = [cost[r, q] for r, q in zip(rows, cols)]
                if all(np.isfinite(c)):
                    total = sum(c)
                    if not found or total < best[1]:
                        best = (k, total)
                        found = True
        if found:
            return best
    return best


@native
@pytest.mark.parametrize("seed", range(20))
def test_native_matches_python(seed):
    from graphtrack import _ckernels

    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, 12))
    a, b = random_boxes(rng, n), random_boxes(rng, int(rng.integers(0, 9)))
    np.testing.assert_array_equal(_ckernels.iou_matrix(a, b), _pykernels.iou_matrix(a, b))

    scores = np.round(rng.uniform(size=n), 1)  # force ties
    classes = rng.integers(0, 2, size=n)
    np.testing.assert_array_equal(_ckernels.nms_keep(a, scores, classes, 0.3),
                                  _pykernels.nms_keep(a, scores, classes, 0.3))

    centers, motions = a[:, :2].copy(), rng.normal(0, 0.03, size=(n, 2))
    emb = rng.normal(size=(n, 4))
    for gate_or in (True, False):
        got = _ckernels.pair_edges(centers, motions, emb, 0.1, 0.05, True, True, False, 0.2, 0.05, gate_or)
        ref = _pykernels.pair_edges(centers, motions, emb, 0.1, 0.05, True, True, False, 0.2, 0.05, gate_or)
        for x, y in zip(got, ref):
            np.testing.assert_allclose(x, y, rtol=0, atol=1e-15)

    cost = rng.uniform(size=(n, int(rng.integers(0, 9))))
    cost[rng.uniform(size=cost.shape) < 0.3] = np.inf
    r1, c1 = _ckernels.linear_assignment(cost)
    r2, c2 = _pykernels.linear_assignment(cost)
    np.testing.assert_array_equal(r1, r2)
    np.testing.assert_array_equal(c1, c2)


@pytest.mark.parametrize("seed", range(40))
def test_assignment_is_optimal(backend, seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 6, size=2)
    cost = rng.uniform(0, 3, size=(n, m))
    cost[rng.uniform(size=cost.shape) < 0.25] = np.inf
    rows, cols = kernels.linear_assignment(cost)
    k, total = brute_assignment(cost)
    assert len(rows) == k
    assert np.isclose(cost[rows, cols].sum() if k else 0.0, total, atol=1e-12)
    assert len(set(rows.tolist())) == len(rows) and len(set(cols.tolist())) == len(cols)


def test_assignment_examples(backend):
    r, c = kernels.linear_assignment(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert list(zip(r, c)) == [(0, 0), (1, 1)]
    r, c = kernels.linear_assignment(np.array([[1.0, 2.0], [2.0, 100.0]]))
    assert list(zip(r, c)) == [(0, 1), (1, 0)]
    r, c = kernels.linear_assignment(np.full((3, 2), np.inf))
    assert len(r) == 0 and len(c) == 0
    r, c = kernels.linear_assignment(np.zeros((0, 4)))
    assert len(r) == 0


def test_use_backend_rejects_unknown():
    with pytest.raises(ValueError):
        kernels.use_backend("gpu")
