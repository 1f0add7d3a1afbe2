import numpy as np
import pytest

from fpl.errors import EmptyClass, ShapeMismatch
from fpl.projection import (
    FeatureMap,
    _reconstruct_dual,
    _reconstruct_primal,
    build_pool,
    feature_map,
    reconstruct,
    reconstruct_all,
)


def random_map(rng, h, w, c):
    return feature_map(rng.standard_normal((h * w, c)), h, w)


def brute_force_reconstruction(m, pool_rows, delta):
    """Independent oracle: assemble and solve the normal equations for the
    combination weights directly, then form the reconstruction."""
    k = pool_rows @ pool_rows.T
    theta = np.linalg.solve(k + delta * np.eye(k.shape[0]), pool_rows @ m.T).T
    return theta @ pool_rows, theta


class TestFeatureMap:
    def test_shape_validation(self):
        with pytest.raises(ShapeMismatch):
            FeatureMap(2, 2, 3, np.zeros((3, 3)))

    def test_dims_must_be_positive(self):
        with pytest.raises(ShapeMismatch):
            FeatureMap(0, 1, 1, np.zeros((0, 1)))

    def test_locations(self):
        m = feature_map(np.zeros((6, 4)), 2, 3)
        assert m.locations == 6 and m.channels == 4


class TestBuildPool:
    def test_shape_two_shots(self):
        rng = np.random.default_rng(0)
        maps = [random_map(rng, 1, 1, 3) for _ in range(2)]
        pool = build_pool(maps)
        assert pool.pool.shape == (2, 3)
        assert pool.shots == 2

    def test_shape_single_shot(self):
        rng = np.random.default_rng(1)
        pool = build_pool([random_map(rng, 2, 2, 4)])
        assert pool.pool.shape == (4, 4)

    def test_gram_of_identical_maps(self):
        m = feature_map(np.array([[1.0, 0.0]]), 1, 1)
        pool = build_pool([m, m])
        assert np.allclose(pool.gram, [[2.0, 0.0], [0.0, 0.0]], atol=1e-15)

    def test_row_order_support_then_location(self):
        a = feature_map(np.array([[1.0, 0.0], [2.0, 0.0]]), 2, 1)
        b = feature_map(np.array([[3.0, 0.0], [4.0, 0.0]]), 2, 1)
        pool = build_pool([a, b])
        assert np.array_equal(pool.pool[:, 0], [1.0, 2.0, 3.0, 4.0])

    def test_empty_class(self):
        with pytest.raises(EmptyClass):
            build_pool([])

    def test_dim_mismatch(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ShapeMismatch):
            build_pool([random_map(rng, 1, 1, 3), random_map(rng, 1, 1, 4)])

    def test_gram_symmetric_psd(self):
        rng = np.random.default_rng(3)
        pool = build_pool([random_map(rng, 2, 3, 5) for _ in range(3)])
        assert np.abs(pool.gram - pool.gram.T).max() <= 1e-10
        assert np.linalg.eigvalsh(pool.gram).min() >= -1e-10


class TestReconstruct:
    def test_query_in_row_space_tiny_delta(self):
        m = feature_map(np.array([[1.0, 2.0]]), 1, 1)
        pool = build_pool([m])
        rec = reconstruct(m, pool, 1e-12)
        assert np.allclose(rec.reconstructed, [[1.0, 2.0]], atol=1e-6)
        assert rec.distance < 1e-8

    def test_scalar_hand_oracle(self):
        # Single unit row, pool equal to the query, ridge 1: the optimal
        # weight is 1/(1+1) = 0.5.
        m = feature_map(np.array([[1.0, 0.0]]), 1, 1)
        pool = build_pool([m])
        rec = reconstruct(m, pool, 1.0)
        assert np.allclose(rec.reconstructed, [[0.5, 0.0]], atol=1e-12)
        assert rec.distance == pytest.approx(0.25, abs=1e-12)

    def test_infinite_regularization_limit(self):
        rng = np.random.default_rng(4)
        q = random_map(rng, 2, 2, 3)
        pool = build_pool([random_map(rng, 2, 2, 3)])
        rec = reconstruct(q, pool, 1e12)
        assert np.linalg.norm(rec.reconstructed) < 1e-6 * np.linalg.norm(q.values)
        assert rec.distance == pytest.approx(
            float(np.sum(q.values**2)) / q.locations, rel=1e-6
        )

    def test_distance_definition_exact(self):
        rng = np.random.default_rng(5)
        q = random_map(rng, 2, 3, 4)
        pool = build_pool([random_map(rng, 2, 3, 4) for _ in range(2)])
        rec = reconstruct(q, pool, 0.7)
        resid = q.values - rec.reconstructed
        assert rec.distance == pytest.approx(
            float(np.sum(resid * resid)) / q.locations, rel=1e-14
        )

    def test_matches_brute_force_normal_equations(self):
        rng = np.random.default_rng(6)
        for _ in range(40):
            c = int(rng.integers(1, 5))
            h, w = 1, int(rng.integers(1, 5))
            n = 1
            q = random_map(rng, h, w, c)
            pool = build_pool([random_map(rng, h, w, c) for _ in range(n)])
            for delta in (1e-3, 1.0, 1e3):
                rec = reconstruct(q, pool, delta)
                want, theta = brute_force_reconstruction(q.values, pool.pool, delta)
                scale = max(np.linalg.norm(want), 1e-12)
                assert np.linalg.norm(rec.reconstructed - want) <= 1e-8 * scale
                # Stationarity of the optimal weights.
                k = pool.pool @ pool.pool.T
                station = theta @ (k + delta * np.eye(k.shape[0])) - q.values @ pool.pool.T
                assert np.abs(station).max() <= 1e-8 * max(1.0, np.abs(theta).max())

    def test_gram_duality(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            c = int(rng.integers(2, 17))
            nhw = int(rng.integers(1, 33))
            values = rng.standard_normal((3, c))
            pool_rows = rng.standard_normal((nhw, c))
            gram = pool_rows.T @ pool_rows
            for delta in (1e-3, 1.0, 1e3):
                r1 = _reconstruct_primal(values, gram, delta, 3)
                r2 = _reconstruct_dual(values, pool_rows, delta, 3)
                scale = max(np.linalg.norm(r2[0]), 1e-12)
                assert np.linalg.norm(r1[0] - r2[0]) <= 1e-8 * scale
                assert r1[1] == pytest.approx(r2[1], rel=1e-7, abs=1e-12)

    def test_monotone_shrinkage_in_row_space(self):
        rng = np.random.default_rng(8)
        pool = build_pool([random_map(rng, 2, 2, 3)])
        coeff = rng.standard_normal((4, 4))
        q = feature_map(coeff @ pool.pool, 2, 2)
        last = -1.0
        for delta in [1e-6, 1e-3, 1e-1, 1.0, 10.0, 1e3]:
            d = reconstruct(q, pool, delta).distance
            assert d >= last - 1e-12
            last = d

    def test_mu_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            c = int(rng.integers(2, 8))
            nhw_shots = int(rng.integers(1, 4))
            q = random_map(rng, 2, 2, c)
            pool = build_pool([random_map(rng, 2, 2, c) for _ in range(nhw_shots)])
            mu = float(rng.normal(0.0, 1.5))
            h = 1e-5
            rec = reconstruct(q, pool, float(np.exp(mu)))
            d_plus = reconstruct(q, pool, float(np.exp(mu + h))).distance
            d_minus = reconstruct(q, pool, float(np.exp(mu - h))).distance
            fd = (d_plus - d_minus) / (2 * h)
            assert rec.ddistance_dmu == pytest.approx(
                fd, rel=1e-4, abs=1e-9
            )

    def test_reconstructed_map_gradient_matches_fd(self):
        rng = np.random.default_rng(10)
        q = random_map(rng, 2, 2, 4)
        pool = build_pool([random_map(rng, 2, 2, 4) for _ in range(2)])
        mu, h = 0.3, 1e-6
        rec = reconstruct(q, pool, float(np.exp(mu)))
        fd = (
            reconstruct(q, pool, float(np.exp(mu + h))).reconstructed
            - reconstruct(q, pool, float(np.exp(mu - h))).reconstructed
        ) / (2 * h)
        assert np.allclose(rec.dreconstructed_dmu, fd, rtol=1e-4, atol=1e-8)

    def test_channel_mismatch(self):
        rng = np.random.default_rng(11)
        q = random_map(rng, 1, 1, 3)
        pool = build_pool([random_map(rng, 1, 1, 4)])
        with pytest.raises(ShapeMismatch):
            reconstruct(q, pool, 1.0)


class TestReconstructAll:
    def test_single_class(self):
        rng = np.random.default_rng(12)
        q = random_map(rng, 1, 2, 3)
        pool = build_pool([random_map(rng, 1, 2, 3)])
        all_recs = reconstruct_all(q, [pool], 1.0)
        single = reconstruct(q, pool, 1.0)
        assert len(all_recs) == 1
        assert np.array_equal(all_recs[0].reconstructed, single.reconstructed)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(13)
        q = random_map(rng, 1, 2, 3)
        pools = [build_pool([random_map(rng, 1, 2, 3)], ci) for ci in range(2)]
        fwd = reconstruct_all(q, pools, 0.5)
        rev = reconstruct_all(q, pools[::-1], 0.5)
        assert np.array_equal(fwd[0].reconstructed, rev[1].reconstructed)
        assert np.array_equal(fwd[1].reconstructed, rev[0].reconstructed)

    def test_matches_independent_calls_bitwise(self):
        rng = np.random.default_rng(14)
        q = random_map(rng, 2, 2, 4)
        pools = [build_pool([random_map(rng, 2, 2, 4) for _ in range(2)], ci)
                 for ci in range(3)]
        combined = reconstruct_all(q, pools, 0.8)
        for ci, pool in enumerate(pools):
            alone = reconstruct(q, pool, 0.8)
            assert np.array_equal(combined[ci].reconstructed, alone.reconstructed)
            assert combined[ci].distance == alone.distance
            assert combined[ci].ddistance_dmu == alone.ddistance_dmu
