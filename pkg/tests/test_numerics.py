import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bdpl.numerics import (
    OPS,
    Adam,
    AdamState,
    F,
    GradCheckError,
    ShapeError,
    SparseMatrix,
    Tape,
    Tensor,
    adam_step,
    apply_primitive,
    grad_check,
    kernels,
    layer_norm_rows,
    sparse_matmul,
)


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestForward:
    def test_softmax_symmetric(self):
        out = apply_primitive("softmax_rows", [Tensor([[0.0, 0.0]])])
        np.testing.assert_allclose(out.value, [[0.5, 0.5]])

    def test_softmax_hand_values(self):
        out = apply_primitive("softmax_rows", [Tensor([[1.0, 2.0]])])
        np.testing.assert_allclose(out.value, [[0.26894, 0.73106]], atol=1e-5)

    def test_layer_norm_constant_row_is_zero(self):
        x = Tensor([[3.5, 3.5, 3.5]])
        out = layer_norm_rows(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.value, [[0.0, 0.0, 0.0]])

    def test_matmul_identity(self, rng):
        a = rng.normal(size=(3, 4))
        out = apply_primitive("matmul", [Tensor(np.eye(3)), Tensor(a)])
        np.testing.assert_array_equal(out.value, a)

    def test_masked_softmax_zero_weight(self):
        x = Tensor([[1.0, 5.0, 2.0], [0.0, 0.0, 0.0]])
        mask = np.array([[True, False, True], [False, False, False]])
        y = F.softmax_rows(x, mask=mask).value
        assert y[0, 1] == 0.0
        assert y[0].sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_array_equal(y[1], 0.0)

    def test_gelu_known_values(self):
        y = F.gelu(Tensor([0.0, 1.0, -1.0])).value
        np.testing.assert_allclose(y, [0.0, 0.8413447460685429, -0.15865525393145707], rtol=1e-12)

    def test_embedding_gather_shape(self, rng):
        table = Tensor(rng.normal(size=(5, 3)))
        out = F.embedding_gather(table, np.array([[0, 4], [2, 2]]))
        assert out.shape == (2, 2, 3)
        np.testing.assert_array_equal(out.value[1, 0], table.value[2])

    def test_sparse_matmul_matches_dense(self, rng):
        dense = rng.normal(size=(4, 3))
        sp = SparseMatrix.from_coo([0, 0, 2, 3], [1, 2, 0, 3], [0.5, 0.5, 1.0, 2.0], (4, 4))
        out = sparse_matmul(sp, Tensor(dense))
        np.testing.assert_allclose(out.value, sp.toarray() @ dense, atol=1e-14)


class TestErrors:
    def test_matmul_shape_error_names_op_and_shapes(self):
        with pytest.raises(ShapeError) as err:
            apply_primitive("matmul", [Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5)))])
        assert err.value.op == "matmul"
        assert err.value.shapes == ((2, 3), (4, 5))
        assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)

    def test_add_shape_error(self):
        with pytest.raises(ShapeError):
            apply_primitive("add", [Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))])

    def test_unknown_op(self):
        with pytest.raises(ValueError, match="unknown op"):
            apply_primitive("conv2d", [Tensor([1.0])])

    def test_log_non_positive(self):
        with pytest.raises(ValueError, match="non-positive"):
            apply_primitive("log", [Tensor([1.0, 0.0])])

    def test_gradcheck_rejects_nonfinite(self):
        x = Tensor([1e-6], requires_grad=True)
        with pytest.raises((GradCheckError, ValueError)):
            grad_check(lambda t: F.sum(F.log(t)), [x], h=1e-3)

    def test_op_catalog_complete(self):
        required = {
            "matmul", "add", "scale", "elementwise_mul", "transpose", "concat_rows",
            "concat_cols", "mean_rows", "sum", "row_slice", "softmax_rows",
            "layer_norm_rows", "relu", "gelu", "sigmoid", "exp", "log", "dropout",
            "embedding_gather",
        }
        assert required <= set(OPS)


class TestGradCheck:
    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        err = grad_check(lambda t: F.sum(t * t), [x], h=1e-5)
        assert err <= 1e-9
        np.testing.assert_allclose(x.grad, [6.0])

    def test_cross_entropy_softmax(self, rng):
        w = param(rng, 4, 4)
        x = Tensor(rng.normal(size=(4, 1)))
        onehot = np.zeros((1, 4))
        onehot[0, 2] = 1.0

        def f(w, x):
            logits = F.transpose(F.matmul(w, x))
            return -F.sum(F.log_softmax_rows(logits) * onehot)

        assert grad_check(f, [w, x]) <= 1e-6

    def test_cross_entropy_through_softmax_and_log(self, rng):
        w = param(rng, 4, 4)
        x = Tensor(rng.normal(size=(4, 1)))

        def f(w, x):
            p = F.softmax_rows(F.transpose(F.matmul(w, x)))
            return -F.sum(F.log(F.row_slice(F.transpose(p), slice(1, 2))))

        assert grad_check(f, [w, x]) <= 1e-6

    def test_layer_norm_sum(self, rng):
        x = param(rng, 3, 5)
        assert grad_check(lambda t: F.sum(layer_norm_rows(t)), [x]) <= 1e-6

    unary = ["relu", "gelu", "sigmoid", "exp"]

    @pytest.mark.parametrize("name", unary)
    def test_unary(self, rng, name):
        x = param(rng, 3, 4)
        x.value[np.abs(x.value) < 1e-3] += 0.1  # keep relu away from its kink
        w = rng.normal(size=(3, 4))
        assert grad_check(lambda t: F.sum(OPS[name](t) * w), [x]) <= 1e-4

    def test_log(self, rng):
        x = Tensor(rng.uniform(0.5, 2.0, size=(3, 2)), requires_grad=True)
        assert grad_check(lambda t: F.sum(F.log(t)), [x]) <= 1e-4

    def test_binary_broadcast(self, rng):
        a, b = param(rng, 2, 3, 4), param(rng, 1, 4)
        w = rng.normal(size=(2, 3, 4))

        def f(a, b):
            return F.sum((F.add(a, b) * F.elementwise_mul(a, b) - F.sub(b, a)) * w)

        assert grad_check(f, [a, b]) <= 1e-4

    def test_batched_matmul_transpose_reshape(self, rng):
        a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
        w = rng.normal(size=(2, 5, 3))

        def f(a, b):
            y = F.transpose(F.matmul(a, b))
            y = F.reshape(F.transpose(F.reshape(y, (2, 5, 3, 1)), (0, 2, 1, 3)), (2, 3, 5))
            return F.sum(F.transpose(y) * w)

        assert grad_check(f, [a, b]) <= 1e-4

    def test_concat_mean_slice_scale(self, rng):
        a, b = param(rng, 3, 2), param(rng, 3, 4)
        c = param(rng, 2, 2)
        w = rng.normal(size=(2, 6))

        def f(a, b, c):
            cols = F.concat_cols(a, b)
            rows = F.concat_rows(c, F.row_slice(a, np.array([0, 2, 2])))
            m = F.mean_rows(rows)
            return F.sum(F.row_slice(cols, slice(1, 3)) * w) + F.scale(F.sum(m), 2.5)

        assert grad_check(f, [a, b, c]) <= 1e-4

    def test_masked_softmax_and_log_softmax(self, rng):
        x = param(rng, 2, 4)
        mask = np.array([[True, False, True, True], [True, True, False, False]])
        w = rng.normal(size=(2, 4))

        def f(x):
            return F.sum(F.softmax_rows(x, mask=mask) * w) + F.sum(F.log_softmax_rows(x, mask=mask) * w)

        assert grad_check(f, [x]) <= 1e-4

    def test_layer_norm_with_affine(self, rng):
        x, g, b = param(rng, 2, 3, 5), param(rng, 5), param(rng, 5)
        w = rng.normal(size=(2, 3, 5))
        assert grad_check(lambda x, g, b: F.sum(layer_norm_rows(x, g, b) * w), [x, g, b]) <= 1e-4

    def test_embedding_and_sparse(self, rng):
        table = param(rng, 6, 3)
        idx = np.array([[1, 1, 5], [0, 2, 1]])
        sp = SparseMatrix.from_coo([0, 1, 1, 3], [2, 0, 3, 3], [1.0, 0.5, 0.5, 1.0], (4, 6))
        w = rng.normal(size=(2, 3, 3))
        w2 = rng.normal(size=(4, 3))

        def f(table):
            return F.sum(F.embedding_gather(table, idx) * w) + F.sum(sparse_matmul(sp, table) * w2)

        assert grad_check(f, [table]) <= 1e-4

    def test_dropout_checked_in_eval_mode(self, rng):
        x = param(rng, 3, 3)
        gen = np.random.default_rng(0)
        assert grad_check(lambda t: F.sum(F.dropout(t, 0.5, True, gen) * t), [x]) <= 1e-4


class TestBackwardSemantics:
    def test_unused_input_gets_zero_grad(self, rng):
        a, b = param(rng, 2, 2), param(rng, 2, 2)
        with Tape() as tape:
            loss = F.sum(a * a)
        tape.backward(loss, wrt=[a, b])
        np.testing.assert_array_equal(b.grad, np.zeros((2, 2)))
        np.testing.assert_allclose(a.grad, 2 * a.value)

    def test_no_tape_records_nothing(self, rng):
        a = param(rng, 2, 2)
        out = F.sum(a * a)
        assert not out.requires_grad

    def test_shared_input_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            loss = F.sum(x * x + x)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [5.0])


class TestDropout:
    def test_eval_is_identity(self, rng):
        x = rng.normal(size=(4, 4))
        np.testing.assert_array_equal(F.dropout(Tensor(x), 0.5, False).value, x)

    def test_keep_one_is_identity(self, rng):
        x = rng.normal(size=(4, 4))
        out = F.dropout(Tensor(x), 1.0, True, np.random.default_rng(1)).value
        np.testing.assert_array_equal(out, x)

    def test_train_mask_scales(self):
        x = np.ones((200, 50))
        out = F.dropout(Tensor(x), 0.5, True, np.random.default_rng(1)).value
        assert set(np.unique(out)) <= {0.0, 2.0}
        assert abs(out.mean() - 1.0) < 0.05


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_distribution(x):
    y = F.softmax_rows(Tensor(x)).value
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(y > 0) or np.ptp(x) > 30  # underflow only for extreme spreads


class TestAdam:
    def test_zero_grad_leaves_param(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        p.grad = np.zeros(2)
        state = AdamState.for_param(p)
        adam_step(p, state)
        np.testing.assert_array_equal(p.value, [1.0, -2.0])
        assert state.step_count == 1

    @pytest.mark.parametrize("g", [0.3, -7.0, 1e-2])
    def test_first_step_magnitude_is_lr(self, g):
        p = Tensor([0.5], requires_grad=True)
        p.grad = np.array([g])
        state = AdamState.for_param(p)
        adam_step(p, state)
        delta = 0.5 - p.value[0]
        assert abs(abs(delta) - 1e-3) <= 1e-6
        assert np.sign(delta) == np.sign(g)

    def test_constant_grad_steps_do_not_grow(self):
        p = Tensor([0.0], requires_grad=True)
        state = AdamState.for_param(p)
        deltas = []
        for _ in range(2):
            before = p.value.copy()
            p.grad = np.array([0.8])
            adam_step(p, state)
            deltas.append(abs(p.value[0] - before[0]))
        assert deltas[1] <= deltas[0] * (1 + 1e-6)

    def test_missing_grad(self):
        p = Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError, match="no gradient"):
            adam_step(p, AdamState.for_param(p))

    def test_optimizer_steps_every_param(self):
        a, b = Tensor([1.0], requires_grad=True), Tensor([1.0], requires_grad=True)
        opt = Adam({"a": a, "b": b})
        a.grad = np.array([1.0])
        opt.step()
        assert opt.states["a"].step_count == opt.states["b"].step_count == 1
        assert b.value[0] == 1.0


class TestKernels:
    def test_csr_paths_agree(self, rng):
        sp = SparseMatrix.from_coo(rng.integers(0, 30, 80), rng.integers(0, 30, 80),
                                   rng.random(80), (30, 30))
        dense = rng.normal(size=(30, 7))
        a = kernels.csr_matmul_numba(sp.indptr, sp.indices, sp.data, dense)
        b = kernels.csr_matmul_numpy(sp.indptr, sp.indices, sp.data, dense)
        np.testing.assert_allclose(a, b, atol=1e-12)
        np.testing.assert_allclose(a, sp.toarray() @ dense, atol=1e-12)

    def test_scatter_paths_agree(self, rng):
        idx = rng.integers(0, 10, 50)
        rows = rng.normal(size=(50, 4))
        a, b = np.zeros((10, 4)), np.zeros((10, 4))
        kernels.scatter_add_rows_numba(a, idx, rows)
        kernels.scatter_add_rows_numpy(b, idx, rows)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_rank_paths_agree(self, rng):
        scores = rng.integers(0, 5, size=(40, 12)).astype(float)
        targets = rng.integers(0, 12, 40)
        np.testing.assert_array_equal(kernels.rank_rows_numba(scores, targets),
                                      kernels.rank_rows_numpy(scores, targets))
