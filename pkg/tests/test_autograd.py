import math

import numpy as np
import pytest
from conftest import assert_grads_close, numeric_grad

from trex import autograd as ag
from trex.autograd import (
    Matrix,
    MaskError,
    ShapeError,
    Tape,
    TapeError,
    backward,
)


class TestMatrix:
    def test_vector_promoted_to_row(self):
        m = Matrix([1.0, 2.0, 3.0])
        assert m.shape == (1, 3)

    def test_rejects_3d(self):
        with pytest.raises(ShapeError):
            Matrix(np.zeros((2, 2, 2)))

    def test_data_length_matches_dims(self):
        m = Matrix(np.arange(6.0).reshape(2, 3))
        assert m.data.size == m.rows * m.cols


class TestMatmul:
    def test_identity(self):
        a = Matrix(np.eye(2))
        b = Matrix([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ag.matmul(a, b).data, b.data)

    def test_hand_multiplication(self):
        a = Matrix([[1.0, 2.0], [3.0, 4.0]])
        b = Matrix([[0.0], [1.0]])
        np.testing.assert_array_equal(ag.matmul(a, b).data, [[2.0], [4.0]])

    def test_zero_case(self):
        a = Matrix(np.zeros((2, 3)))
        b = Matrix(np.arange(6.0).reshape(3, 2))
        np.testing.assert_array_equal(ag.matmul(a, b).data, np.zeros((2, 2)))

    def test_shape_error_names_both_shapes(self):
        a = Matrix(np.zeros((2, 3)))
        b = Matrix(np.zeros((2, 3)))
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ag.matmul(a, b)

    def test_associativity(self):
        rng = np.random.default_rng(7)
        a = Matrix(rng.uniform(-1, 1, (4, 5)))
        b = Matrix(rng.uniform(-1, 1, (5, 3)))
        c = Matrix(rng.uniform(-1, 1, (3, 6)))
        left = ag.matmul(ag.matmul(a, b), c).data
        right = ag.matmul(a, ag.matmul(b, c)).data
        np.testing.assert_allclose(left, right, atol=1e-9)


class TestMaskedSoftmax:
    def test_uniform_logits(self):
        x = Matrix([[2.5, 2.5, 2.5]])
        out = ag.masked_softmax_rows(x, np.ones((1, 3), dtype=bool))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-12)

    def test_single_unmasked_entry(self):
        x = Matrix([[5.0, 0.0, 0.0]])
        mask = np.array([[True, False, False]])
        np.testing.assert_array_equal(
            ag.masked_softmax_rows(x, mask).data, [[1.0, 0.0, 0.0]]
        )

    def test_closed_form(self):
        x = Matrix([[0.0, math.log(3.0)]])
        out = ag.masked_softmax_rows(x, np.ones((1, 2), dtype=bool))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    def test_fully_masked_row_raises(self):
        x = Matrix(np.zeros((2, 3)))
        mask = np.array([[True, True, True], [False, False, False]])
        with pytest.raises(MaskError, match="row 1"):
            ag.masked_softmax_rows(x, mask)

    def test_rows_sum_to_one_and_masked_exactly_zero(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            x = Matrix(rng.uniform(-50, 50, (6, 8)))
            mask = rng.random((6, 8)) < 0.6
            mask[:, 0] = True
            out = ag.masked_softmax_rows(x, mask).data
            np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
            assert (out[~mask] == 0.0).all()
            assert np.isfinite(out).all()

    def test_extreme_logits_stay_finite(self):
        x = Matrix([[1e5, -1e5, 0.0]])
        out = ag.masked_softmax_rows(x, np.ones((1, 3), dtype=bool))
        assert np.isfinite(out.data).all()


class TestLayerNorm:
    def _ones_zeros(self, d):
        return Matrix(np.ones((1, d))), Matrix(np.zeros((1, d)))

    def test_constant_input_gives_zeros(self):
        gamma, beta = self._ones_zeros(4)
        out = ag.layer_norm(Matrix([[3.0, 3.0, 3.0, 3.0]]), gamma, beta, eps=1e-5)
        np.testing.assert_allclose(out.data, np.zeros((1, 4)), atol=1e-9)

    def test_already_normalized(self):
        gamma, beta = self._ones_zeros(2)
        out = ag.layer_norm(Matrix([[1.0, -1.0]]), gamma, beta, eps=1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_shift_only(self):
        gamma = Matrix(np.ones((1, 2)))
        beta = Matrix([[5.0, 5.0]])
        out = ag.layer_norm(Matrix([[7.0, 7.0]]), gamma, beta, eps=1e-5)
        np.testing.assert_allclose(out.data, [[5.0, 5.0]], atol=1e-9)

    def test_standardizes_rows(self):
        rng = np.random.default_rng(3)
        x = Matrix(rng.uniform(-5, 5, (4, 16)))
        gamma, beta = self._ones_zeros(16)
        out = ag.layer_norm(x, gamma, beta, eps=1e-10).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-6)

    def test_rejects_nonpositive_eps(self):
        gamma, beta = self._ones_zeros(2)
        with pytest.raises(ValueError):
            ag.layer_norm(Matrix([[1.0, 2.0]]), gamma, beta, eps=0.0)


class TestBackward:
    def test_linear_loss_gradient_is_input(self):
        x = np.array([[2.0], [3.0], [4.0]])
        tape = Tape()
        w = tape.watch(Matrix(np.ones((2, 3))))
        loss = ag.sum_all(ag.matmul(w, Matrix(x)))
        backward(tape, loss)
        np.testing.assert_allclose(w.grad, np.tile(x.T, (2, 1)))

    def test_constant_loss_gives_zero_grad(self):
        tape = Tape()
        w = tape.watch(Matrix(np.ones((2, 2))))
        loss = ag.sum_all(ag.scale(w, 0.0))
        backward(tape, loss)
        np.testing.assert_array_equal(w.grad, np.zeros((2, 2)))

    def test_off_tape_loss_rejected(self):
        tape = Tape()
        tape.watch(Matrix(np.ones((2, 2))))
        loss = ag.sum_all(Matrix([[1.0]]))
        with pytest.raises(TapeError):
            backward(tape, loss)

    def test_untouched_parameter_gets_zero_grad(self):
        tape = Tape()
        w = tape.watch(Matrix(np.ones((2, 2))))
        unused = tape.watch(Matrix(np.ones((3, 3))))
        loss = ag.sum_all(w)
        grads = backward(tape, loss)
        np.testing.assert_array_equal(grads[unused], np.zeros((3, 3)))
        np.testing.assert_array_equal(grads[w], np.ones((2, 2)))

    def test_each_record_fires_exactly_once_in_reverse(self):
        tape = Tape()
        w = tape.watch(Matrix(np.ones((2, 2))))
        loss = ag.sum_all(ag.scale(ag.add(w, w), 0.5))
        order = []
        original = list(tape._records)
        tape._records = [
            (lambda i=i, fn=fn: (order.append(i), fn())[-1]) for i, fn in enumerate(original)
        ]
        backward(tape, loss)
        assert order == list(reversed(range(len(original))))

    def test_loss_must_be_scalar(self):
        tape = Tape()
        w = tape.watch(Matrix(np.ones((2, 2))))
        out = ag.add(w, w)
        with pytest.raises(ShapeError):
            backward(tape, out)

    def test_random_graph_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        x = rng.uniform(-1, 1, (3, 4))
        mask = np.ones((3, 5), dtype=bool)
        mask[0, 3] = mask[2, 1] = False
        weights = rng.uniform(0.5, 1.5, (3, 5))
        arrays = {
            "w1": rng.uniform(-1, 1, (4, 5)),
            "b": rng.uniform(-1, 1, (1, 5)),
            "gamma": rng.uniform(0.5, 1.5, (1, 5)),
            "beta": rng.uniform(-0.5, 0.5, (1, 5)),
        }

        def build(tape=None):
            nodes = {name: Matrix.wrap(arr) for name, arr in arrays.items()}
            if tape is not None:
                tape.watch_all(nodes.values())
            h = ag.relu(ag.add_bias(ag.matmul(Matrix(x), nodes["w1"]), nodes["b"]))
            s = ag.masked_softmax_rows(h, mask)
            z = ag.layer_norm(s, nodes["gamma"], nodes["beta"], eps=1e-5)
            return ag.sum_all(ag.mul_const(z, weights)), nodes

        tape = Tape()
        loss, nodes = build(tape)
        backward(tape, loss)
        tape.release()
        for name, arr in arrays.items():
            numeric = numeric_grad(lambda: build()[0].item(), arr)
            assert_grads_close(nodes[name].grad, numeric, label=name)


class TestPrimitiveGradients:
    """Every differentiable primitive against central finite differences."""

    def _check(self, make_loss, arrays):
        tape = Tape()
        tracked = [tape.watch(Matrix.wrap(a)) for a in arrays]
        loss = make_loss(*tracked)
        backward(tape, loss)
        tape.release()
        for i, (m, a) in enumerate(zip(tracked, arrays)):
            numeric = numeric_grad(lambda: make_loss(*[Matrix(x) for x in arrays]).item(), a)
            assert_grads_close(m.grad, numeric, label=f"arg{i}")

    def test_matmul_both_operands(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(-1, 1, (2, 3))
        b = rng.uniform(-1, 1, (3, 4))
        mix = rng.uniform(0.5, 1.5, (2, 4))
        self._check(
            lambda x, y: ag.sum_all(ag.mul_const(ag.matmul(x, y), mix)),
            [a, b],
        )

    def test_transpose_and_slice_concat(self):
        rng = np.random.default_rng(1)
        w = rng.uniform(-1, 1, (3, 4))

        def loss(a):
            t = ag.transpose(a)
            left = ag.slice_cols(t, 0, 2)
            right = ag.slice_cols(t, 2, 3)
            return ag.sum_all(ag.concat_cols([right, left]))

        self._check(loss, [w])

    def test_add_and_bias_and_scale(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(-1, 1, (3, 4))
        b = rng.uniform(-1, 1, (3, 4))
        bias = rng.uniform(-1, 1, (1, 4))
        self._check(
            lambda x, y, z: ag.sum_all(ag.scale(ag.add_bias(ag.add(x, y), z), 1.7)),
            [a, b, bias],
        )

    def test_relu(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(-1, 1, (4, 4))
        # keep pre-activations away from the kink so the FD oracle is valid
        a[np.abs(a) < 1e-3] = 0.1
        self._check(lambda x: ag.sum_all(ag.relu(x)), [a])

    def test_gather_rows(self):
        rng = np.random.default_rng(4)
        table = rng.uniform(-1, 1, (6, 3))
        ids = np.array([0, 2, 2, 5])
        mix = rng.uniform(0.5, 1.5, (4, 3))
        self._check(lambda t: ag.sum_all(ag.mul_const(ag.gather_rows(t, ids), mix)), [table])

    def test_masked_softmax(self):
        rng = np.random.default_rng(5)
        logits = rng.uniform(-1, 1, (3, 5))
        mask = np.ones((3, 5), dtype=bool)
        mask[1, 2] = mask[2, 4] = False
        mix = rng.uniform(0.5, 1.5, (3, 5))
        self._check(
            lambda x: ag.sum_all(ag.mul_const(ag.masked_softmax_rows(x, mask), mix)),
            [logits],
        )

    def test_layer_norm(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(-1, 1, (3, 6))
        gamma = rng.uniform(0.5, 1.5, (1, 6))
        beta = rng.uniform(-0.5, 0.5, (1, 6))
        mix = rng.uniform(0.5, 1.5, (3, 6))
        self._check(
            lambda a, g, b: ag.sum_all(ag.mul_const(ag.layer_norm(a, g, b, eps=1e-5), mix)),
            [x, gamma, beta],
        )

    def test_masked_cross_entropy(self):
        rng = np.random.default_rng(7)
        logits = rng.uniform(-1, 1, (4, 6))
        targets = np.array([1, 0, 5, 3])
        mask = np.array([True, True, False, True])
        self._check(lambda x: ag.masked_cross_entropy(x, targets, mask), [logits])


class TestCrossEntropyValues:
    def test_uniform_logits_give_log_vocab(self):
        logits = Matrix(np.zeros((3, 7)))
        loss = ag.masked_cross_entropy(logits, np.array([0, 3, 6]), np.ones(3, dtype=bool))
        assert loss.item() == pytest.approx(math.log(7.0), abs=1e-12)

    def test_confident_correct_logits_drive_loss_to_zero(self):
        logits = np.full((1, 5), -30.0)
        logits[0, 2] = 30.0
        loss = ag.masked_cross_entropy(Matrix(logits), np.array([2]), np.ones(1, dtype=bool))
        assert loss.item() < 1e-8

    def test_padded_position_excluded(self):
        rng = np.random.default_rng(8)
        logits = rng.uniform(-2, 2, (2, 5))
        targets = np.array([1, 4])
        both = ag.masked_cross_entropy(
            Matrix(logits), targets, np.array([True, False])
        ).item()
        single = ag.masked_cross_entropy(
            Matrix(logits[:1]), targets[:1], np.array([True])
        ).item()
        assert both == pytest.approx(single, abs=1e-12)

    def test_all_masked_raises(self):
        with pytest.raises(MaskError):
            ag.masked_cross_entropy(
                Matrix(np.zeros((2, 3))), np.array([0, 1]), np.zeros(2, dtype=bool)
            )


class TestTapeDiscipline:
    def test_mixed_tapes_rejected(self):
        t1, t2 = Tape(), Tape()
        a = t1.watch(Matrix(np.ones((2, 2))))
        b = t2.watch(Matrix(np.ones((2, 2))))
        with pytest.raises(TapeError):
            ag.add(a, b)

    def test_release_stops_recording(self):
        tape = Tape()
        a = tape.watch(Matrix(np.ones((2, 2))))
        ag.add(a, a)
        n = len(tape)
        tape.release()
        out = ag.add(a, a)
        assert out.tape is None
        assert len(tape) == n
