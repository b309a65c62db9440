import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epep.bkm import BlockPartition, LowRankPrompt, bkm_gradients, bkm_multiply, materialize
from epep.errors import ConfigError, ShapeError
from epep.numerics import finite_diff_grad, make_rng, max_rel_error


def naive_bkm(a, b, m):
    """Independent oracle: explicit double loop over blocks."""
    d, l = b.shape
    br, bc = d // m, l // m
    out = np.empty_like(b)
    for i in range(m):
        for j in range(m):
            out[i * br : (i + 1) * br, j * bc : (j + 1) * bc] = a[i][j] * b[i * br : (i + 1) * br, j * bc : (j + 1) * bc]
    return out


def naive_materialize(u, v, m):
    blocks = [[u[i, j] @ v[i, j].T for j in range(m)] for i in range(m)]
    return np.block(blocks)


def random_prompt(rng, m, d, l, r):
    return LowRankPrompt.random(BlockPartition(m, d, l), r, rng)


class TestMultiply:
    def test_all_ones_is_identity(self):
        b = make_rng(0).normal(size=(4, 6))
        assert np.array_equal(bkm_multiply(np.ones((2, 2)), b), b)

    def test_single_block_is_scalar_scaling(self):
        b = make_rng(1).normal(size=(3, 5))
        assert np.array_equal(bkm_multiply([[2.5]], b), 2.5 * b)

    def test_hand_example(self):
        out = bkm_multiply([[1, 2], [3, 4]], [[5, 6], [7, 8]])
        assert out.tolist() == [[5, 12], [21, 32]]

    def test_oracle_equivalence_random(self):
        rng = make_rng(2)
        for _ in range(100):
            m = int(rng.integers(1, 5))
            d = m * int(rng.integers(1, 6))
            l = m * int(rng.integers(1, 6))
            a = rng.normal(size=(m, m))
            b = rng.normal(size=(d, l))
            assert np.array_equal(bkm_multiply(a, b), naive_bkm(a, b, m))

    def test_batched_weights(self):
        rng = make_rng(3)
        a = rng.normal(size=(5, 2, 2))
        b = rng.normal(size=(4, 6))
        out = bkm_multiply(a, b)
        assert out.shape == (5, 4, 6)
        for n in range(5):
            assert np.array_equal(out[n], naive_bkm(a[n], b, 2))

    @pytest.mark.parametrize(
        "a_shape,b_shape",
        [((2, 2), (5, 4)), ((2, 2), (4, 5)), ((2, 3), (4, 4)), ((3, 3), (4, 6))],
    )
    def test_shape_errors(self, a_shape, b_shape):
        with pytest.raises(ShapeError):
            bkm_multiply(np.ones(a_shape), np.ones(b_shape))

    def test_partition_mismatch(self):
        with pytest.raises(ShapeError):
            bkm_multiply(np.ones((2, 2)), np.ones((4, 4)), BlockPartition(2, 4, 6))


@st.composite
def bkm_case(draw):
    m = draw(st.integers(1, 4))
    d = m * draw(st.integers(1, 4))
    l = m * draw(st.integers(1, 4))
    seed = draw(st.integers(0, 2**32 - 1))
    return m, d, l, make_rng(seed)


@settings(max_examples=60, deadline=None)
@given(bkm_case())
def test_shape_preserved_and_linear(case):
    m, d, l, rng = case
    a1, a2 = rng.normal(size=(2, m, m))
    b1, b2 = rng.normal(size=(2, d, l))
    assert bkm_multiply(a1, b1).shape == (d, l)
    assert np.max(np.abs(bkm_multiply(a1 + a2, b1) - bkm_multiply(a1, b1) - bkm_multiply(a2, b1))) <= 1e-12
    assert np.max(np.abs(bkm_multiply(a1, b1 + b2) - bkm_multiply(a1, b1) - bkm_multiply(a1, b2))) <= 1e-12


class TestLowRankPrompt:
    def test_scalar_blocks(self):
        p = LowRankPrompt(BlockPartition(2, 2, 2), np.full((2, 2, 1, 1), 2.0), np.full((2, 2, 1, 1), 3.0))
        assert np.array_equal(materialize(p), np.full((2, 2), 6.0))

    def test_zero_factors(self):
        p = LowRankPrompt(BlockPartition(2, 4, 6), np.zeros((2, 2, 2, 1)), np.zeros((2, 2, 3, 1)))
        assert np.array_equal(materialize(p), np.zeros((4, 6)))

    def test_matches_per_block_oracle(self):
        p = random_prompt(make_rng(4), 2, 4, 4, 2)
        assert np.allclose(materialize(p), naive_materialize(p.u, p.v, 2), rtol=0, atol=1e-14)

    def test_block_rank_bounded(self):
        p = random_prompt(make_rng(5), 3, 12, 9, 2)
        dense = p.partition.blocks(materialize(p))
        for i in range(3):
            for j in range(3):
                assert np.linalg.matrix_rank(dense[i, :, j, :]) <= 2

    def test_param_count(self):
        p = random_prompt(make_rng(6), 2, 8, 4, 2)
        # m^2 blocks of r * (d/m + l/m) = (d + l) * r * m
        assert p.num_params == (8 + 4) * 2 * 2

    def test_init_scale(self):
        p = random_prompt(make_rng(7), 2, 400, 400, 4)
        assert np.std(p.u) == pytest.approx(0.5, rel=0.05)

    def test_invalid(self):
        with pytest.raises(ShapeError):
            BlockPartition(3, 10, 9)
        with pytest.raises(ConfigError):
            LowRankPrompt(BlockPartition(2, 4, 4), np.zeros((2, 2, 2, 3)), np.zeros((2, 2, 2, 3)))
        with pytest.raises(ShapeError):
            LowRankPrompt(BlockPartition(2, 4, 4), np.zeros((2, 2, 2, 1)), np.zeros((2, 2, 3, 1)))


class TestGradients:
    def test_zero_upstream(self):
        p = random_prompt(make_rng(8), 2, 4, 6, 1)
        ga, gu, gv = bkm_gradients(np.ones((2, 2)), p, np.zeros((4, 6)))
        assert not ga.any() and not gu.any() and not gv.any()

    def test_scalar_case_by_hand(self):
        # m = 1, r = 1, d = l = 1: L = g * a * u * v
        p = LowRankPrompt(BlockPartition(1, 1, 1), np.full((1, 1, 1, 1), 2.0), np.full((1, 1, 1, 1), 3.0))
        ga, gu, gv = bkm_gradients(np.array([[5.0]]), p, np.array([[7.0]]))
        assert ga.item() == 7 * 2 * 3
        assert gu.item() == 7 * 5 * 3
        assert gv.item() == 7 * 5 * 2

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_difference(self, seed):
        rng = make_rng(100 + seed)
        m = int(rng.integers(1, 4))
        d, l, r = m * int(rng.integers(1, 4)), m * int(rng.integers(1, 4)), 1
        r = int(rng.integers(1, min(d, l) // m + 1))
        part = BlockPartition(m, d, l)
        p = LowRankPrompt.random(part, r, rng)
        a = rng.normal(size=(m, m))
        g = rng.normal(size=(d, l))

        def loss(a_, u_, v_):
            return float(np.sum(g * bkm_multiply(a_, materialize(LowRankPrompt(part, u_, v_)))))

        ga, gu, gv = bkm_gradients(a, p, g)
        assert max_rel_error(ga, finite_diff_grad(lambda x: loss(x, p.u, p.v), a)) < 1e-5
        assert max_rel_error(gu, finite_diff_grad(lambda x: loss(a, x, p.v), p.u)) < 1e-5
        assert max_rel_error(gv, finite_diff_grad(lambda x: loss(a, p.u, x), p.v)) < 1e-5

    def test_batched_sums_factor_gradients(self):
        rng = make_rng(9)
        p = random_prompt(rng, 2, 4, 4, 2)
        a = rng.normal(size=(3, 2, 2))
        g = rng.normal(size=(3, 4, 4))
        ga, gu, gv = bkm_gradients(a, p, g)
        parts = [bkm_gradients(a[n], p, g[n]) for n in range(3)]
        assert np.allclose(ga, np.stack([q[0] for q in parts]), atol=1e-13)
        assert np.allclose(gu, sum(q[1] for q in parts), atol=1e-13)
        assert np.allclose(gv, sum(q[2] for q in parts), atol=1e-13)

    def test_shape_error(self):
        p = random_prompt(make_rng(10), 2, 4, 4, 1)
        with pytest.raises(ShapeError):
            bkm_gradients(np.ones((2, 2)), p, np.zeros((4, 5)))
