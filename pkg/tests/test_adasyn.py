import numpy as np
import pytest

from olconvnet.adasyn import BalanceConfig, balance, knn_indices, synthetic_budget
from olconvnet.errors import ArgumentError


def clusters(n_major, n_minor, seed=0, dim=2, gap=6.0):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(0, 1, (n_major, dim)), rng.normal(gap, 1, (n_minor, dim))])
    y = np.array([1] * n_major + [2] * n_minor)
    return X, y


def brute_knn(X, i, k):
    d = [(float(np.sqrt(np.sum((X[i] - X[j]) ** 2))), j) for j in range(len(X)) if j != i]
    return [j for _, j in sorted(d)[:k]]


def seg_distance(p, a, b):
    ab = b - a
    den = float(ab @ ab)
    t = 0.0 if den == 0 else min(1.0, max(0.0, float((p - a) @ ab) / den))
    return float(np.linalg.norm(p - (a + t * ab)))


def test_balanced_passthrough():
    X, y = clusters(100, 100)
    res = balance(X, y, BalanceConfig(seed=1))
    assert not res.synthetic.any()
    np.testing.assert_array_equal(res.X, X)
    np.testing.assert_array_equal(res.y, y)


def test_budget_matches_hand_count():
    X, y = clusters(100, 40, seed=2, gap=1.5)
    res = balance(X, y, BalanceConfig(beta=1.0, seed=3))
    n_syn = int(res.synthetic.sum())
    # G = 60; per-seed rounding moves the total by at most one per seed
    assert abs(n_syn - 60) <= 40
    assert np.all(res.y[res.synthetic] == 2)
    assert len(res.y) == 140 + n_syn


def test_synthetic_on_seed_neighbor_segments():
    k = 5
    X, y = clusters(100, 40, seed=4, gap=2.0)
    res = balance(X, y, BalanceConfig(k_neighbors=k, seed=5))
    minority = np.flatnonzero(y == 2)
    pairs = []
    for i in minority:
        nbrs = [j for j in brute_knn(X, i, k) if y[j] == 2]
        pairs += [(i, j) for j in nbrs] + [(i, i)]
    assert res.synthetic.sum() > 0
    for p in res.X[res.synthetic]:
        assert min(seg_distance(p, X[a], X[b]) for a, b in pairs) < 1e-6


def test_originals_unchanged_and_first():
    X, y = clusters(100, 30, seed=6, gap=1.0)
    res = balance(X, y, BalanceConfig(seed=7))
    np.testing.assert_array_equal(res.X[: len(X)], X)
    np.testing.assert_array_equal(res.y[: len(y)], y)
    assert not res.synthetic[: len(y)].any() and res.synthetic[len(y):].all()


def test_ratio_above_threshold_untouched():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(100 + 90 + 50, 3))
    y = np.array([1] * 100 + [2] * 90 + [3] * 50)
    res = balance(X, y, BalanceConfig(d_th=0.75, seed=9))
    syn = res.y[res.synthetic]
    assert not np.any(syn == 2)
    assert np.any(syn == 3)


def test_budget_on_reported_class_counts():
    counts = {1: 7722, 2: 5712, 3: 6970, 4: 2039}
    g = synthetic_budget(counts, BalanceConfig())
    assert g[1] == 0 and g[3] == 0
    assert g[2] == 7722 - 5712 and g[4] == 7722 - 2039


def test_deterministic():
    X, y = clusters(100, 40, seed=10, gap=2.0)
    a = balance(X, y, BalanceConfig(seed=11))
    b = balance(X, y, BalanceConfig(seed=11))
    np.testing.assert_array_equal(a.X, b.X)
    c = balance(X, y, BalanceConfig(seed=12))
    assert not np.array_equal(a.X, c.X)


def test_small_class_skipped_with_warning():
    X, y = clusters(50, 4, seed=13)
    with pytest.warns(UserWarning):
        res = balance(X, y, BalanceConfig(k_neighbors=5))
    assert not res.synthetic.any()


def test_single_class_rejected():
    with pytest.raises(ArgumentError):
        balance(np.zeros((5, 2)), np.ones(5, int))


def test_config_validation():
    with pytest.raises(ArgumentError):
        BalanceConfig(beta=0)
    with pytest.raises(ArgumentError):
        BalanceConfig(d_th=1.5)


def test_knn_matches_brute_force():
    rng = np.random.default_rng(14)
    X = rng.normal(size=(60, 4))
    idx = np.arange(0, 60, 3)
    got = knn_indices(X[idx], X, 5, exclude=idx)
    for row, i in zip(got, idx):
        assert row.tolist() == brute_knn(X, i, 5)


def test_knn_ties_lower_index():
    X = np.array([[0.0], [1.0], [-1.0], [1.0], [2.0]])
    assert knn_indices(X[:1], X, 2, exclude=np.array([0])).tolist() == [[1, 2]]
