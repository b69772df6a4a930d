import math

import numpy as np
import pytest

from deepknn.dataset import FeatureDataset, Space
from deepknn.defenses import class_centroids, l2_outlier_filter, ocsvm_filter, random_eviction_filter
from deepknn.ocsvm import ConvergenceError, median_gamma, ocsvm_fit, rbf_kernel


def fds(points, labels, ids=None):
    points = np.asarray(points, dtype=float)
    return FeatureDataset(points, labels, np.arange(len(points)) if ids is None else ids, Space.FEATURE)


# -- dense reference QP ----------------------------------------------------


def project_capped_simplex(v, upper):
    """Euclidean projection onto {0 <= a <= upper, sum a = 1} by bisection."""
    lo, hi = v.min() - upper - 1.0, v.max() + 1.0
    for _ in range(64):
        tau = 0.5 * (lo + hi)
        s = np.clip(v - tau, 0.0, upper).sum()
        if s > 1.0:
            lo = tau
        else:
            hi = tau
    return np.clip(v - 0.5 * (lo + hi), 0.0, upper)


def reference_qp(K, upper, iters=100_000):
    """Accelerated projected gradient with adaptive restart."""
    n = len(K)
    L = np.linalg.eigvalsh(K).max()
    a = y = np.full(n, 1.0 / n)
    t = 1.0
    for _ in range(iters):
        nxt = project_capped_simplex(y - (K @ y) / L, upper)
        if np.max(np.abs(nxt - a)) < 1e-14:
            a = nxt
            break
        if (nxt - a) @ (K @ nxt) > 0:  # objective went up along the momentum
            t = 1.0
        t_next = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        y = nxt + ((t - 1) / t_next) * (nxt - a)
        a, t = nxt, t_next
    g = K @ a
    free = (a > 1e-9) & (a < upper - 1e-9)
    rho = g[free].mean() if free.any() else 0.5 * (g[a >= upper - 1e-9].max() + g[a <= 1e-9].min())
    return a, rho


def full_alpha(model, n):
    out = np.zeros(n)
    out[model.support_positions] = model.alpha
    return out


class TestOcsvm:
    @pytest.mark.parametrize("seed", range(30))
    def test_matches_reference_qp(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 11))
        X = rng.normal(size=(n, 2)) * rng.uniform(0.5, 2.0)
        X[0] += 4.0  # one clear outlier
        nu = float(rng.choice([0.2, 0.3, 0.5]))
        gamma = median_gamma(X)
        model = ocsvm_fit(X, nu=nu, gamma=gamma, tol=1e-8)
        K = rbf_kernel(X, X, gamma)
        a_ref, rho_ref = reference_qp(K, 1.0 / (nu * n))
        assert np.max(np.abs(full_alpha(model, n) - a_ref)) < 1e-4
        assert model.rho == pytest.approx(rho_ref, abs=1e-4)
        dec_ref = K @ a_ref - rho_ref
        assert set(np.flatnonzero(model.is_outlier(X))) == set(np.flatnonzero(dec_ref < -model.tol))

    @pytest.mark.parametrize("seed", range(10))
    def test_default_tolerance_objective_and_outliers(self, seed):
        # a 1e-4 KKT gap pins the objective and the verdicts, not every alpha
        rng = np.random.default_rng(100 + seed)
        X = rng.normal(size=(6, 2))
        X[0] += 3.0
        model = ocsvm_fit(X, nu=0.5, gamma=1.0)
        K = rbf_kernel(X, X, 1.0)
        a_ref, rho_ref = reference_qp(K, 1.0 / 3.0)
        a = full_alpha(model, 6)
        assert 0.5 * a @ K @ a - 0.5 * a_ref @ K @ a_ref < 1e-6
        dec_ref = K @ a_ref - rho_ref
        assert set(np.flatnonzero(model.is_outlier(X))) == set(np.flatnonzero(dec_ref < -model.tol))

    def test_box_and_sum(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(80, 3))
        model = ocsvm_fit(X, nu=0.1)
        upper = 1.0 / (0.1 * 80)
        assert np.all(model.alpha >= 0) and np.all(model.alpha <= upper + 1e-12)
        assert model.alpha.sum() == pytest.approx(1.0, abs=1e-6)

    def test_kkt_at_termination(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(60, 4))
        model = ocsvm_fit(X, nu=0.05)
        a = full_alpha(model, 60)
        g = rbf_kernel(X, X, model.gamma) @ a
        upper = 1.0 / (0.05 * 60)
        gap = g[a > 1e-12].max() - g[a < upper - 1e-12].min()
        assert gap <= 1e-4

    def test_objective_monotone(self):
        rng = np.random.default_rng(7)
        model = ocsvm_fit(rng.normal(size=(50, 2)), nu=0.2, track_objective=True)
        tr = np.asarray(model.objective_trace)
        assert len(tr) > 2 and np.all(np.diff(tr) <= 1e-12)

    def test_identical_points(self):
        X = np.ones((20, 3))
        model = ocsvm_fit(X, nu=0.1)
        assert np.all(model.decision_function(X) >= -1e-4)
        assert not model.is_outlier(X).any()

    @pytest.mark.parametrize("seed", range(100))
    def test_nu_property(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(20, 120))
        nu = float(rng.uniform(0.02, 0.5))
        X = rng.normal(size=(n, int(rng.integers(1, 6)))) * rng.uniform(0.2, 3.0)
        model = ocsvm_fit(X, nu=nu)
        assert model.is_outlier(X).mean() <= nu + 2.0 / n
        # lower bound side of the property: at least nu*n support vectors
        assert len(model.alpha) >= math.floor(nu * n)

    def test_iteration_cap(self):
        rng = np.random.default_rng(8)
        with pytest.raises(ConvergenceError):
            ocsvm_fit(rng.normal(size=(40, 2)), nu=0.3, max_iter=2)

    @pytest.mark.parametrize("nu", [0.0, 1.5])
    def test_bad_nu(self, nu):
        with pytest.raises(ValueError):
            ocsvm_fit(np.zeros((3, 1)), nu=nu)

    def test_median_gamma(self):
        X = np.array([[0.0, 0.0], [2.0, 4.0]])
        # per-feature variances 1 and 4, median 2.5
        assert median_gamma(X) == pytest.approx(1.0 / (2 * 2.5))


class TestOcsvmFilter:
    def test_tight_clusters(self):
        rng = np.random.default_rng(9)
        pts = np.vstack([rng.normal(size=(100, 4)) * 0.3 + 10 * c for c in range(3)])
        ds = fds(pts, np.repeat(np.arange(3), 100))
        rep = ocsvm_filter(ds, nu=0.01)
        for c in range(3):
            assert len([i for i in rep.removed_ids if i // 100 == c]) <= 3

    @pytest.mark.parametrize("n,nu", [(9, 0.3), (300, 0.01)])
    def test_far_point_removed(self, n, nu):
        # an isolated point takes alpha = 1/2 at the unconstrained optimum, so it
        # is a bounded outlier exactly when the box 1/(nu*n) is below 1/2
        rng = np.random.default_rng(10)
        pts = np.vstack([rng.normal(size=(n, 2)) * 0.1, [[10.0, 10.0]]])
        rep = ocsvm_filter(fds(pts, [0] * (n + 1)), nu=nu)
        assert n in rep.removed_ids
        if n < 10:
            g = median_gamma(pts)
            K = rbf_kernel(pts, pts, g)
            # nearly rank-one kernel; the sign of one decision value needs few iterations
            a_ref, rho_ref = reference_qp(K, 1.0 / (nu * (n + 1)), iters=5000)
            assert (K @ a_ref - rho_ref)[n] < -1e-4

    def test_large_nu_partitions(self):
        ds = fds([[0.0], [1.0], [5.0], [6.0]], [0, 0, 1, 1])
        rep = ocsvm_filter(ds, nu=1.0)
        assert rep.partitions(ds)

    def test_singleton_class_rejected(self):
        with pytest.raises(ValueError, match="class 1"):
            ocsvm_filter(fds([[0.0], [1.0], [5.0]], [0, 0, 1]))


class TestL2:
    def test_zero_epsilon(self):
        ds = fds([[0.0], [1.0], [9.0]], [0, 0, 0])
        assert l2_outlier_filter(ds, 0.0).removed_ids == frozenset()

    def test_hand_centroid(self):
        ds = fds([[0, 0], [0, 1], [0, 4]], [0, 0, 0])
        cents = class_centroids(ds).centroids
        assert cents[0] == pytest.approx([0.0, 5.0 / 3.0])
        assert l2_outlier_filter(ds, 1 / 3).removed_ids == {2}

    def test_one_per_class(self):
        rng = np.random.default_rng(11)
        ds = fds(rng.normal(size=(1000, 3)), np.repeat(np.arange(10), 100))
        rep = l2_outlier_filter(ds, 0.01)
        assert len(rep.removed_ids) == 10
        assert sorted(i // 100 for i in rep.removed_ids) == list(range(10))

    def test_ties_by_id(self):
        ds = fds([[1.0], [-1.0], [0.0], [0.0]], [0, 0, 0, 0], [8, 3, 5, 6])
        # centroid 0, ids 8 and 3 tie at distance 1
        assert l2_outlier_filter(ds, 0.25).removed_ids == {3}

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_sort_reference(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 300))
        C = int(rng.integers(1, 5))
        pts = rng.integers(-2, 3, size=(n, 2)).astype(float)
        labels = rng.integers(0, C, n)
        ids = rng.permutation(3 * n)[:n]
        eps = float(rng.uniform(0, 0.5))
        expected = set()
        for c in range(C):
            idx = [i for i in range(n) if labels[i] == c]
            if not idx:
                continue
            cen = [math.fsum(pts[i, j] for i in idx) / len(idx) for j in range(2)]
            # squared distance; sqrt can merge distinct values into false ties
            key = sorted(idx, key=lambda i: (-sum((pts[i, j] - cen[j]) ** 2 for j in range(2)), ids[i]))
            expected |= {int(ids[i]) for i in key[: math.floor(eps * len(idx))]}
        assert l2_outlier_filter(fds(pts, labels, ids), eps).removed_ids == expected

    def test_centroid_permutation_invariant(self):
        rng = np.random.default_rng(12)
        pts = rng.normal(size=(500, 4)) * 1e6
        labels = rng.integers(0, 3, 500)
        a = class_centroids(fds(pts, labels)).centroids
        perm = rng.permutation(500)
        b = class_centroids(fds(pts[perm], labels[perm])).centroids
        assert np.max(np.abs(a - b)) <= 1e-9 * np.max(np.abs(a))


class TestRandomEviction:
    def test_zero(self):
        ds = fds(np.zeros((10, 1)), [0] * 10)
        assert random_eviction_filter(ds, 0.0, 1).removed_ids == frozenset()

    def test_fraction_and_seed(self):
        ds = fds(np.zeros((500, 1)), [0] * 500)
        a = random_eviction_filter(ds, 0.1, 42)
        b = random_eviction_filter(ds, 0.1, 42)
        c = random_eviction_filter(ds, 0.1, 43)
        assert len(a.removed_ids) == 50 and a == b and a != c

    def test_all(self):
        ds = fds(np.zeros((7, 1)), [0] * 7)
        rep = random_eviction_filter(ds, 1.0, 0)
        assert rep.kept_ids == frozenset() and rep.partitions(ds)

    def test_rounding(self):
        ds = fds(np.zeros((25, 1)), [0] * 25)
        # 0.1 * 25 = 2.5 rounds up
        assert len(random_eviction_filter(ds, 0.1, 0).removed_ids) == 3
