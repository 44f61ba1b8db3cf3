"""Tests for the tensor primitives, gradient tape and gradient checker."""

import logging

import numpy as np
import pytest

from affordancelib import numerics as nx
from affordancelib.exceptions import (
    CheckpointError,
    EmptyMaskError,
    NonFiniteError,
    ShapeMismatchError,
)
from affordancelib.layers import LayerNorm, Linear, MultiHeadAttention, ParameterStore
from affordancelib.numerics import GradientTape, Precision, Tensor


class TestTensor:
    """Test tensor construction and dtype handling."""

    def test_integer_data_becomes_float64(self) -> None:
        """Integer input is promoted to a floating dtype."""
        t = Tensor([1, 2, 3])
        assert t.dtype == np.float64
        assert t.shape == (3,)

    def test_explicit_single_precision(self) -> None:
        """An explicit dtype is honoured."""
        t = Tensor([1.0, 2.0], dtype=Precision.SINGLE.dtype)
        assert t.dtype == np.float32

    def test_item_requires_single_element(self) -> None:
        """item() refuses tensors with more than one element."""
        with pytest.raises(ShapeMismatchError, match="single-element"):
            Tensor([1.0, 2.0]).item()

    def test_operators_delegate_to_primitives(self) -> None:
        """Arithmetic operators compute the expected values."""
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([10.0, 20.0])
        np.testing.assert_allclose((a + b).data, [[11.0, 22.0], [13.0, 24.0]])
        np.testing.assert_allclose((a - 1.0).data, [[0.0, 1.0], [2.0, 3.0]])
        np.testing.assert_allclose((2.0 * a).data, [[2.0, 4.0], [6.0, 8.0]])
        np.testing.assert_allclose((a / 2.0).data, [[0.5, 1.0], [1.5, 2.0]])
        np.testing.assert_allclose((a @ a).data, [[7.0, 10.0], [15.0, 22.0]])

    def test_incompatible_broadcast_rejected(self) -> None:
        """Shapes may only differ in leading batch axes."""
        with pytest.raises(ShapeMismatchError, match="add"):
            nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2,))))

    def test_non_finite_result_rejected(self) -> None:
        """A primitive producing inf or NaN raises instead of propagating it."""
        with pytest.raises(NonFiniteError, match="mul"):
            nx.mul(Tensor([np.inf]), 1.0)


class TestGradientTape:
    """Test reverse-mode accumulation."""

    def test_square_gradient(self) -> None:
        """d/dx sum(x*x) = 2x."""
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        with GradientTape() as tape:
            y = nx.total(x * x)
        (grad,) = tape.gradient(y, [x])
        np.testing.assert_allclose(grad, [2.0, -4.0, 6.0])

    def test_nothing_recorded_without_tape(self) -> None:
        """Outside a tape no output tracks gradients."""
        x = Tensor([1.0], requires_grad=True)
        assert not (x * 2.0).requires_grad

    def test_shared_input_accumulates(self) -> None:
        """A tensor used twice receives the sum of both contributions."""
        x = Tensor([2.0], requires_grad=True)
        with GradientTape() as tape:
            y = nx.total(x * 3.0 + x * x)
        (grad,) = tape.gradient(y, [x])
        np.testing.assert_allclose(grad, [3.0 + 4.0])

    def test_unrelated_source_gets_zeros(self) -> None:
        """Sources the target does not depend on get a zero gradient."""
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor([5.0], requires_grad=True)
        with GradientTape() as tape:
            y = nx.total(x)
        _, grad = tape.gradient(y, [x, unused])
        np.testing.assert_array_equal(grad, [0.0])

    def test_non_scalar_target_rejected(self) -> None:
        """Only scalar targets can be differentiated."""
        x = Tensor([1.0, 2.0], requires_grad=True)
        with GradientTape() as tape:
            y = x * 2.0
        with pytest.raises(ShapeMismatchError, match="scalar"):
            tape.gradient(y, [x])


class TestAttention:
    """Test masked scaled dot-product attention."""

    def test_identical_keys_average_values(self) -> None:
        """With identical keys every query attends uniformly."""
        q = Tensor(np.random.default_rng(0).standard_normal((1, 2, 4)))
        k = Tensor(np.ones((1, 3, 4)))
        v = Tensor(np.arange(12, dtype=np.float64).reshape(1, 3, 4))
        out = nx.attention(q, k, v)
        np.testing.assert_allclose(out.data[0, 0], v.data[0].mean(axis=0))

    def test_masked_keys_are_ignored(self) -> None:
        """Masked keys contribute nothing."""
        q = Tensor(np.zeros((1, 1, 2)))
        k = Tensor(np.zeros((1, 2, 2)))
        v = Tensor([[[1.0, 1.0], [9.0, 9.0]]])
        out = nx.attention(q, k, v, np.array([[True, False]]))
        np.testing.assert_allclose(out.data, [[[1.0, 1.0]]])

    def test_fully_masked_row_gives_zeros_and_warns(self, caplog: pytest.LogCaptureFixture) -> None:
        """A query with no visible key yields zeros plus a warning."""
        q = Tensor(np.ones((2, 1, 2)))
        k = Tensor(np.ones((2, 2, 2)))
        v = Tensor(np.ones((2, 2, 2)))
        mask = np.array([[True, True], [False, False]])
        with caplog.at_level(logging.WARNING, logger="affordancelib.numerics"):
            out = nx.attention(q, k, v, mask)
        np.testing.assert_allclose(out.data[1], 0.0)
        np.testing.assert_allclose(out.data[0], 1.0)
        assert "hides every key" in caplog.text

    def test_mask_width_must_match_keys(self) -> None:
        """A mask with the wrong key count is rejected."""
        t = Tensor(np.ones((1, 2, 2)))
        with pytest.raises(ShapeMismatchError, match="mask"):
            nx.attention(t, t, t, np.array([True, True, True]))


class TestMSE:
    """Test the masked mean squared error."""

    def test_unmasked_value(self) -> None:
        """Plain mean over every entry."""
        loss = nx.mse(Tensor([[1.0, 2.0]]), np.array([[0.0, 0.0]]))
        assert loss.item() == pytest.approx(2.5)

    def test_row_mask_selects_points(self) -> None:
        """A mask without the coordinate axis selects whole rows."""
        pred = Tensor([[[1.0, 1.0], [5.0, 5.0]]])
        loss = nx.mse(pred, np.zeros((1, 2, 2)), np.array([[True, False]]))
        assert loss.item() == pytest.approx(1.0)

    def test_empty_mask_rejected(self) -> None:
        """A mask selecting nothing raises EmptyMaskError."""
        with pytest.raises(EmptyMaskError):
            nx.mse(Tensor([[1.0, 2.0]]), np.zeros((1, 2)), np.array([False]))

    def test_target_shape_checked(self) -> None:
        """Prediction and target must have the same shape."""
        with pytest.raises(ShapeMismatchError, match="mse"):
            nx.mse(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))


class TestLayerNorm:
    """Test layer normalisation."""

    def test_rows_are_standardised(self) -> None:
        """With unit gain and zero bias each row has mean 0 and variance about 1."""
        x = Tensor(np.random.default_rng(1).standard_normal((4, 16)) * 3.0 + 2.0)
        out = nx.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-4)


class TestGradCheck:
    """Test the finite-difference gradient checker."""

    PRIMITIVES = {
        "matmul[a]",
        "matmul[b]",
        "layer_norm[x]",
        "layer_norm[gain]",
        "layer_norm[bias]",
        "attention[q]",
        "attention[k]",
        "attention[v]",
        "mse[pred]",
        "gelu",
        "embedding",
    }

    @pytest.mark.parametrize("precision", [Precision.DOUBLE, Precision.SINGLE])
    def test_every_primitive_is_checked(self, precision: Precision) -> None:
        """Both precisions check the same full set of primitives at their own tolerance."""
        reports = nx.primitive_checks(precision, seed=0)
        assert set(reports) == self.PRIMITIVES
        expected = 1e-6 if precision is Precision.DOUBLE else 1e-3
        assert all(r.tolerance == expected for r in reports.values())

    @pytest.mark.parametrize("precision", [Precision.DOUBLE, Precision.SINGLE])
    @pytest.mark.parametrize("seed", range(100))
    def test_primitives_pass(self, precision: Precision, seed: int) -> None:
        reports = nx.primitive_checks(precision, seed=seed)
        failed = {name: r.max_error for name, r in reports.items() if not r.passed}
        assert not failed

    def test_double_reference_is_used(self) -> None:
        """A single-precision tape is compared with differences of its float64 twin."""
        values = np.array([0.1, -0.4, 0.7])
        point = Tensor(values, dtype=Precision.SINGLE.dtype)
        twin = Tensor(values.astype(np.float32).astype(np.float64))
        calls: list[np.dtype] = []

        def cube(x: Tensor) -> Tensor:
            calls.append(x.dtype)
            return nx.total(x * x * x)

        report = nx.grad_check(cube, point, step=1e-3, tol=1e-3, floor=1e-2, reference=(cube, twin))
        assert report.passed
        assert calls[0] == np.float32
        assert set(calls[1:]) == {np.dtype(np.float64)}
        np.testing.assert_allclose(report.numeric, 3 * twin.data**2, rtol=1e-9)
        np.testing.assert_array_equal(twin.data, values.astype(np.float32))

    def test_reference_shape_must_match(self) -> None:
        point = Tensor(np.ones(3))
        with pytest.raises(ShapeMismatchError, match="reference point"):
            nx.grad_check(
                lambda x: nx.total(x * x), point, reference=(nx.total, Tensor(np.ones(2)))
            )

    def test_wrong_backward_is_caught(self) -> None:
        """A primitive with a broken vector-Jacobian product fails the check."""

        def broken_square(x: Tensor) -> Tensor:
            return nx.primitive("square", x.data**2, (x,), lambda g: (g * 0.5,))

        point = Tensor(np.array([1.0, 2.0, 3.0]))
        report = nx.grad_check(lambda x: nx.total(broken_square(x)), point, step=1e-5, tol=1e-6)
        assert not report.passed
        assert report.max_error > 0.1

    def test_point_is_restored(self) -> None:
        """Perturbations are undone after checking."""
        point = Tensor(np.array([0.3, -0.7]))
        before = point.data.copy()
        nx.grad_check(lambda x: nx.total(x * x), point)
        np.testing.assert_array_equal(point.data, before)
        assert not point.requires_grad

    def test_coordinate_subset(self) -> None:
        """max_coordinates limits how many entries are perturbed."""
        point = Tensor(np.random.default_rng(0).standard_normal((5, 5)))
        report = nx.grad_check(lambda x: nx.total(x * x), point, max_coordinates=4)
        assert len(report.coordinates) == 4
        assert report.passed


class TestParameterStore:
    """Test named parameter storage and its loading rules."""

    def test_same_seed_same_parameters(self) -> None:
        """Two stores built identically hold identical values."""
        stores = [ParameterStore(Precision.DOUBLE, seed=3) for _ in range(2)]
        for store in stores:
            Linear(store, "proj", 4, 6)
            LayerNorm(store, "norm", 6)
        for name in stores[0]:
            np.testing.assert_array_equal(stores[0][name].data, stores[1][name].data)
        assert stores[0].count() == 4 * 6 + 6 + 6 + 6

    def test_duplicate_name_rejected(self) -> None:
        """Parameter names are unique."""
        store = ParameterStore()
        store.zeros("w", (2,))
        with pytest.raises(ValueError, match="duplicate"):
            store.zeros("w", (2,))

    def test_load_names_missing_tensor(self) -> None:
        """Loading a state without a parameter names it."""
        store = ParameterStore()
        Linear(store, "proj", 2, 2)
        state = store.state()
        del state["proj.bias"]
        with pytest.raises(CheckpointError, match="proj.bias"):
            store.load(state)

    def test_load_names_shape_mismatch(self) -> None:
        """Loading a tensor of the wrong shape names it and changes nothing."""
        store = ParameterStore()
        Linear(store, "proj", 2, 2)
        before = store.state()
        state = store.state()
        state["proj.weight"] = np.zeros((3, 2))
        with pytest.raises(CheckpointError, match="proj.weight"):
            store.load(state)
        np.testing.assert_array_equal(store["proj.weight"].data, before["proj.weight"])

    def test_load_casts_to_store_precision(self) -> None:
        """Loaded values adopt the store's dtype."""
        store = ParameterStore(Precision.SINGLE)
        store.zeros("w", (2,))
        store.load({"w": np.array([1.0, 2.0], dtype=np.float64)})
        assert store["w"].dtype == np.float32


class TestMultiHeadAttention:
    """Test the attention layer shapes and masking."""

    def test_output_shape_with_context(self) -> None:
        """Cross-attention keeps the query sequence shape."""
        store = ParameterStore(Precision.DOUBLE)
        layer = MultiHeadAttention(store, "attn", 8, 2)
        x = Tensor(np.ones((2, 3, 8)))
        context = Tensor(np.ones((2, 5, 8)))
        mask = np.ones((2, 5), dtype=bool)
        assert layer(x, context, mask).shape == (2, 3, 8)

    def test_width_must_split_into_heads(self) -> None:
        """Width has to be divisible by the head count."""
        with pytest.raises(ShapeMismatchError, match="divisible"):
            MultiHeadAttention(ParameterStore(), "attn", 6, 4)

    def test_context_batch_checked(self) -> None:
        """Context and queries must share the batch axis."""
        layer = MultiHeadAttention(ParameterStore(Precision.DOUBLE), "attn", 4, 2)
        with pytest.raises(ShapeMismatchError, match="batch"):
            layer(Tensor(np.ones((2, 1, 4))), Tensor(np.ones((3, 1, 4))))
