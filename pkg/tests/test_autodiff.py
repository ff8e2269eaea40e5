import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emcnet import autodiff as ad
from emcnet.autodiff import Tape, Tensor
from emcnet.errors import DimensionError, EmptyInputError, NumericError, TapeError
from emcnet.gradcheck import check_gradients, max_rel_err


def rnd(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])

    def test_hand_product(self):
        out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_grad_of_sum_is_column_sums_of_b(self):
        # independent analytic oracle: d sum(AB) / dA = rowvector(colsums of B)
        rng = np.random.default_rng(0)
        a, b = rnd(rng, 3, 4), rnd(rng, 4, 2)
        with Tape() as tape:
            loss = ad.reduce_sum(ad.matmul(a, b))
        grads = tape.backward(loss)
        expected = np.broadcast_to(b.data.sum(axis=1), (3, 4))
        assert max_rel_err(grads[a], expected) <= 1e-12

    def test_grad_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        a, b = rnd(rng, 3, 4), rnd(rng, 4, 2)
        errs = check_gradients(lambda: ad.reduce_sum(ad.matmul(a, b)), {"a": a, "b": b})
        assert max(errs.values()) <= 1e-6


class TestElementwise:
    def test_relu_values(self):
        np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(Tensor([0.0])).data[0] == pytest.approx(0.5, abs=1e-15)

    def test_tanh_grad_finite_differences(self):
        rng = np.random.default_rng(2)
        x = rnd(rng, 5)
        errs = check_gradients(lambda: ad.reduce_sum(ad.tanh(x)), {"x": x})
        assert errs["x"] <= 1e-6

    def test_add_requires_compatible_shapes(self):
        with pytest.raises(DimensionError):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))

    def test_row_broadcast_add(self):
        m = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        v = Tensor([10.0, 20.0, 30.0], requires_grad=True)
        with Tape() as tape:
            loss = ad.reduce_sum(ad.add(m, v))
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads[m], np.ones((2, 3)))
        np.testing.assert_array_equal(grads[v], [2.0, 2.0, 2.0])

    def test_relu_subgradient_at_zero_is_zero(self):
        x = Tensor([0.0, 1.0], requires_grad=True)
        with Tape() as tape:
            loss = ad.reduce_sum(ad.relu(x))
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads[x], [0.0, 1.0])


class TestReduce:
    def test_mean_over_rows(self):
        out = ad.reduce_mean(Tensor([[2.0, 4.0], [6.0, 8.0]]), axis=0)
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_empty_tensor_rejected(self):
        with pytest.raises(EmptyInputError):
            ad.reduce_sum(Tensor([]))

    def test_axis_out_of_range(self):
        with pytest.raises(DimensionError):
            ad.reduce_sum(Tensor([[1.0]]), axis=2)

    def test_mean_grad_is_uniform(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        with Tape() as tape:
            loss = ad.reduce_mean(x)
        grads = tape.backward(loss)
        np.testing.assert_allclose(grads[x], np.full(4, 0.25), rtol=0, atol=0)

    def test_mean_grad_finite_differences(self):
        rng = np.random.default_rng(3)
        x = rnd(rng, 4, 3)
        errs = check_gradients(lambda: ad.reduce_sum(ad.mul(ad.reduce_mean(x, axis=0), ad.reduce_mean(x, axis=0))), {"x": x})
        assert errs["x"] <= 1e-6


class TestSoftmax:
    def test_uniform(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, np.full(3, 1.0 / 3.0), atol=1e-15)

    def test_large_logits_stable(self):
        out = ad.softmax(Tensor([1000.0, 0.0]), axis=0)
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == pytest.approx(1.0, abs=1e-12)
        assert out.data[1] == pytest.approx(0.0, abs=1e-12)

    def test_nan_input_rejected(self):
        with pytest.raises(NumericError):
            ad.softmax(Tensor([np.nan, 0.0]), axis=0)

    def test_jacobian_finite_differences(self):
        rng = np.random.default_rng(4)
        x = rnd(rng, 4)
        w = Tensor(rng.standard_normal(4))  # fixed probe so loss sees the full Jacobian
        errs = check_gradients(lambda: ad.reduce_sum(ad.mul(ad.softmax(x, axis=0), w)), {"x": x})
        assert errs["x"] <= 1e-6

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_output_is_probability_vector(self, logits):
        out = ad.softmax(Tensor(logits), axis=0).data
        assert np.all(out >= 0.0)
        assert abs(out.sum() - 1.0) <= 1e-12


class TestConcat:
    def test_column_concat(self):
        out = ad.concat([Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]])], axis=1)
        np.testing.assert_array_equal(out.data, [[1.0, 2.0, 3.0, 4.0]])

    def test_single_tensor_is_identity(self):
        t = Tensor([[1.0, 2.0]])
        assert ad.concat([t], axis=0) is t

    def test_rank_mismatch(self):
        with pytest.raises(DimensionError):
            ad.concat([Tensor([[1.0]]), Tensor([1.0])], axis=0)

    def test_gradient_routing_finite_differences(self):
        rng = np.random.default_rng(5)
        a, b = rnd(rng, 2, 3), rnd(rng, 2, 3)
        errs = check_gradients(
            lambda: ad.reduce_sum(ad.mul(ad.concat([a, b], axis=0), ad.concat([b, a], axis=0))),
            {"a": a, "b": b},
        )
        assert max(errs.values()) <= 1e-6


class TestGatherRows:
    def test_selects_rows_in_order(self):
        out = ad.gather_rows(Tensor([[1.0], [2.0], [3.0]]), [2, 0])
        np.testing.assert_array_equal(out.data, [[3.0], [1.0]])

    def test_identity_permutation(self):
        x = Tensor(np.arange(6.0).reshape(3, 2))
        np.testing.assert_array_equal(ad.gather_rows(x, [0, 1, 2]).data, x.data)

    def test_out_of_range_index(self):
        with pytest.raises(DimensionError, match="3"):
            ad.gather_rows(Tensor(np.ones((3, 2))), [0, 3])

    def test_duplicate_index_doubles_gradient(self):
        x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        with Tape() as tape:
            loss = ad.reduce_sum(ad.gather_rows(x, [1, 1]))
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads[x], [[0.0, 0.0], [2.0, 2.0], [0.0, 0.0]])
        errs = check_gradients(lambda: ad.reduce_sum(ad.mul(ad.gather_rows(x, [1, 1]), ad.gather_rows(x, [1, 2]))), {"x": x})
        assert errs["x"] <= 1e-6


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.arange(3.0), requires_grad=True)
        with Tape() as tape:
            loss = ad.reduce_sum(w)
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads[w], np.ones(3))

    def test_detached_leaf_gets_zeros(self):
        w = Tensor(np.arange(3.0), requires_grad=True)
        u = Tensor(np.arange(2.0), requires_grad=True)
        with Tape() as tape:
            tape.watch(w)
            loss = ad.reduce_sum(u)
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads[w], np.zeros(3))
        np.testing.assert_array_equal(grads[u], np.ones(2))

    def test_non_scalar_loss_rejected(self):
        w = Tensor(np.arange(3.0), requires_grad=True)
        with Tape() as tape:
            out = ad.scale(w, 2.0)
        with pytest.raises(TapeError):
            tape.backward(out)

    def test_tape_is_single_use(self):
        w = Tensor(np.arange(3.0), requires_grad=True)
        with Tape() as tape:
            loss = ad.reduce_sum(w)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_foreign_loss_rejected(self):
        w = Tensor(np.arange(3.0), requires_grad=True)
        with Tape() as tape_a:
            loss_a = ad.reduce_sum(w)
        tape_b = Tape()
        with pytest.raises(TapeError):
            tape_b.backward(loss_a)

    def test_fanout_accumulates_by_sum(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            y = ad.mul(x, x)  # x used twice
            loss = ad.reduce_sum(y)
        grads = tape.backward(loss)
        np.testing.assert_allclose(grads[x], [4.0])

    def test_nested_tensor_on_two_live_tapes_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape():
            ad.scale(x, 2.0)
            with Tape():
                with pytest.raises(TapeError):
                    ad.scale(x, 3.0)


class TestTensorBasics:
    def test_zero_extent_rejected(self):
        with pytest.raises(EmptyInputError):
            Tensor(np.zeros((0, 3)))

    def test_operator_sugar_matches_functions(self):
        rng = np.random.default_rng(6)
        a = Tensor(rng.standard_normal((2, 2)))
        b = Tensor(rng.standard_normal((2, 2)))
        np.testing.assert_array_equal((a + b).data, ad.add(a, b).data)
        np.testing.assert_array_equal((a - b).data, ad.sub(a, b).data)
        np.testing.assert_array_equal((a * 2.0).data, ad.scale(a, 2.0).data)
        np.testing.assert_array_equal((a @ b).data, ad.matmul(a, b).data)
        np.testing.assert_array_equal((-a).data, -a.data)

    def test_detach_breaks_tracking(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = ad.reduce_sum(ad.mul(x.detach(), x))  # only one branch tracked
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads[x], [1.0, 2.0])


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=15, deadline=None)
def test_random_small_programs_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rnd(rng, 3, 4)
    w = rnd(rng, 4, 2)

    def f():
        h = ad.sigmoid(ad.matmul(x, w))
        s = ad.softmax(h, axis=1)
        return ad.reduce_sum(ad.mul(s, ad.tanh(h)))

    errs = check_gradients(f, {"x": x, "w": w})
    assert max(errs.values()) <= 1e-4
