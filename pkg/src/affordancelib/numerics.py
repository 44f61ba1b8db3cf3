"""
Dense tensors with tape-based reverse-mode differentiation.

Every primitive computes its forward value with numpy, rejects non-finite results, and (when a
``GradientTape`` is active on the current thread and any input requires a gradient) appends a
record holding a vector-Jacobian closure. ``GradientTape.gradient`` replays those records in
reverse. Broadcasting is limited to leading batch axes: an operand may only be broadcast when its
shape is a suffix of the other operand's shape.
"""

from __future__ import annotations

import enum
import logging
import math
import threading
from collections.abc import Callable, Iterator, Sequence
from typing import Any

import attrs
import numpy as np
from numpy.typing import NDArray

from .exceptions import EmptyMaskError, NonFiniteError, ShapeMismatchError

_LOGGER = logging.getLogger(__name__)

LAYER_NORM_EPSILON = 1e-5
_GELU_SCALE = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715
FD_STEP = 1e-3

Array = NDArray[Any]
Backward = Callable[[Array], Sequence[Array | None]]


class Precision(enum.StrEnum):
    SINGLE = "float32"
    DOUBLE = "float64"

    @property
    def dtype(self) -> np.dtype[Any]:
        return np.dtype(self.value)


class Tensor:
    """A dense array of real scalars that may participate in gradient recording."""

    __slots__ = ("data", "requires_grad")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: np.dtype[Any] | type | str | None = None,
    ) -> None:
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data: Array = array
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def dtype(self) -> np.dtype[Any]:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        return self.data.copy()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: Tensor | float) -> Tensor:
        return add(self, other)

    def __radd__(self, other: float) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Tensor | float) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: float) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Tensor | float) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: float) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: float) -> Tensor:
        return mul(self, 1.0 / other)

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, key: Any) -> Tensor:
        return getitem(self, key)


@attrs.frozen
class TapeRecord:
    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Backward


class GradientTape:
    """
    Ordered record of primitive applications on the current thread.

    Use as a context manager; primitives evaluated inside the block are recorded when at least one
    input requires a gradient. A tape must not be shared between threads.
    """

    def __init__(self) -> None:
        self._records: list[TapeRecord] = []

    def __enter__(self) -> GradientTape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *_exc: object) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[TapeRecord]:
        return iter(self._records)

    def record(self, record: TapeRecord) -> None:
        self._records.append(record)

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[Array]:
        """Reverse-mode accumulation of d(target)/d(source) for a scalar target."""
        if target.data.size != 1:
            raise ShapeMismatchError(f"gradient target must be scalar, got shape {target.shape}")

        grads: dict[int, Array] = {id(target): np.ones_like(target.data)}
        for record in reversed(self._records):
            upstream = grads.get(id(record.output))
            if upstream is None:
                continue
            for tensor, contribution in zip(record.inputs, record.backward(upstream), strict=True):
                if contribution is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                grads[key] = grads[key] + contribution if key in grads else contribution

        return [grads.get(id(source), np.zeros_like(source.data)) for source in sources]


_THREAD_STATE = threading.local()


def _tape_stack() -> list[GradientTape]:
    stack: list[GradientTape] | None = getattr(_THREAD_STATE, "tapes", None)
    if stack is None:
        stack = []
        _THREAD_STATE.tapes = stack
    return stack


def active_tape() -> GradientTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def primitive(op: str, data: Array, inputs: Sequence[Tensor], backward: Backward) -> Tensor:
    """
    Wrap a forward value as a tensor and record its vector-Jacobian product on the active tape.

    ``backward`` receives the upstream gradient (shaped like ``data``) and returns one gradient per
    input, or None for inputs that need none.
    """
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = active_tape()
    requires_grad = tape is not None and any(tensor.requires_grad for tensor in inputs)
    out = Tensor(data, requires_grad=requires_grad)
    if tape is not None and requires_grad:
        tape.record(TapeRecord(op=op, output=out, inputs=tuple(inputs), backward=backward))
    return out


def constant(value: Any, like: Tensor | None = None) -> Tensor:
    dtype = like.dtype if like is not None else None
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


def _broadcast_shape(op: str, a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if a == b:
        return a
    if len(b) <= len(a) and a[len(a) - len(b) :] == b:
        return a
    if len(a) < len(b) and b[len(b) - len(a) :] == a:
        return b
    raise ShapeMismatchError(f"{op}: shapes {a} and {b} differ beyond leading batch axes")


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    if grad.shape == shape:
        return grad
    if not shape:
        return np.asarray(grad.sum(), dtype=grad.dtype)
    return grad.reshape(-1, *shape).sum(axis=0)


def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    left = constant(a, b if isinstance(b, Tensor) else None)
    right = constant(b, left)
    _broadcast_shape("add", left.shape, right.shape)

    def backward(g: Array) -> tuple[Array, Array]:
        return _unbroadcast(g, left.shape), _unbroadcast(g, right.shape)

    return primitive("add", left.data + right.data, (left, right), backward)


def sub(a: Tensor | float, b: Tensor | float) -> Tensor:
    left = constant(a, b if isinstance(b, Tensor) else None)
    right = constant(b, left)
    _broadcast_shape("sub", left.shape, right.shape)

    def backward(g: Array) -> tuple[Array, Array]:
        return _unbroadcast(g, left.shape), -_unbroadcast(g, right.shape)

    return primitive("sub", left.data - right.data, (left, right), backward)


def mul(a: Tensor | float, b: Tensor | float) -> Tensor:
    left = constant(a, b if isinstance(b, Tensor) else None)
    right = constant(b, left)
    _broadcast_shape("mul", left.shape, right.shape)

    def backward(g: Array) -> tuple[Array, Array]:
        return _unbroadcast(g * right.data, left.shape), _unbroadcast(g * left.data, right.shape)

    return primitive("mul", left.data * right.data, (left, right), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes.

    ``a`` is ``(..., m, k)``; ``b`` is either a plain ``(k, n)`` matrix shared across the leading
    axes of ``a`` or ``(..., k, n)`` with the same leading axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatchError(f"matmul leading axes differ: {a.shape} x {b.shape}")

    def backward(g: Array) -> tuple[Array, Array]:
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        if shared:
            grad_b = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            grad_b = np.swapaxes(a.data, -1, -2) @ g
        return grad_a, grad_b

    return primitive("matmul", a.data @ b.data, (a, b), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    order = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(order))

    def backward(g: Array) -> tuple[Array]:
        return (np.transpose(g, inverse),)

    return primitive("transpose", np.transpose(x.data, order), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape

    def backward(g: Array) -> tuple[Array]:
        return (g.reshape(original),)

    return primitive("reshape", x.data.reshape(tuple(shape)), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeMismatchError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for tensor in tensors[1:]:
        other = tensor.shape[:axis] + tensor.shape[axis + 1 :]
        if tensor.ndim != ndim or other != tensors[0].shape[:axis] + tensors[0].shape[axis + 1 :]:
            raise ShapeMismatchError(
                f"concat: {tensor.shape} incompatible with {tensors[0].shape} on axis {axis}"
            )
    bounds = np.cumsum([tensor.shape[axis] for tensor in tensors])[:-1]

    def backward(g: Array) -> list[Array]:
        return list(np.split(g, bounds, axis=axis))

    data = np.concatenate([tensor.data for tensor in tensors], axis=axis)
    return primitive("concat", data, tuple(tensors), backward)


def getitem(x: Tensor, key: Any) -> Tensor:
    def backward(g: Array) -> tuple[Array]:
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return primitive("getitem", np.array(x.data[key]), (x,), backward)


def embedding(table: Tensor, ids: NDArray[np.integer[Any]]) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the looked-up rows."""
    index = np.asarray(ids)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeMismatchError(f"embedding ids outside [0, {table.shape[0]})")

    def backward(g: Array) -> tuple[Array]:
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return primitive("embedding", table.data[index], (table,), backward)


def gelu(x: Tensor) -> Tensor:
    inner = _GELU_SCALE * (x.data + _GELU_CUBIC * x.data**3)
    t = np.tanh(inner)

    def backward(g: Array) -> tuple[Array]:
        d_inner = _GELU_SCALE * (1.0 + 3.0 * _GELU_CUBIC * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * d_inner),)

    return primitive("gelu", 0.5 * x.data * (1.0 + t), (x,), backward)


def total(x: Tensor) -> Tensor:
    """Sum of every entry, as a scalar tensor."""

    def backward(g: Array) -> tuple[Array]:
        return (np.broadcast_to(g, x.shape).copy(),)

    return primitive("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


def mean(x: Tensor) -> Tensor:
    return total(x) * (1.0 / x.data.size)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """
    Normalise the last axis to zero mean and unit variance, then apply ``gain`` and ``bias``.

    The variance is stabilised with ``LAYER_NORM_EPSILON`` so constant rows map to ``bias``.
    """
    width = x.shape[-1]
    if width < 1 or gain.shape != (width,) or bias.shape != (width,):
        raise ShapeMismatchError(
            f"layer_norm: input {x.shape} with gain {gain.shape} and bias {bias.shape}"
        )
    centred = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centred**2).mean(axis=-1, keepdims=True) + LAYER_NORM_EPSILON)
    normed = centred * inv_std

    def backward(g: Array) -> tuple[Array, Array, Array]:
        d_normed = g * gain.data
        grad_x = inv_std * (
            d_normed
            - d_normed.mean(axis=-1, keepdims=True)
            - normed * (d_normed * normed).mean(axis=-1, keepdims=True)
        )
        grad_gain = (g * normed).reshape(-1, width).sum(axis=0)
        grad_bias = g.reshape(-1, width).sum(axis=0)
        return grad_x, grad_gain, grad_bias

    return primitive("layer_norm", normed * gain.data + bias.data, (x, gain, bias), backward)


def _expand_mask(mask: NDArray[np.bool_], scores_shape: tuple[int, ...]) -> NDArray[np.bool_]:
    keep = np.asarray(mask, dtype=bool)
    n_keys = scores_shape[-1]
    if keep.shape[-1] != n_keys:
        raise ShapeMismatchError(f"attention mask covers {keep.shape[-1]} keys, expected {n_keys}")
    if keep.ndim == 1:
        return keep
    if keep.ndim == 2 and keep.shape[0] == scores_shape[0]:
        return keep.reshape(keep.shape[0], *([1] * (len(scores_shape) - 2)), n_keys)
    raise ShapeMismatchError(f"attention mask {keep.shape} does not fit scores {scores_shape}")


def attention(q: Tensor, k: Tensor, v: Tensor, mask: NDArray[np.bool_] | None = None) -> Tensor:
    """
    Scaled dot-product attention ``softmax(q kᵀ / √d) v`` over the last two axes.

    ``mask`` marks the keys that may be attended (True) and is either ``(n_keys,)`` or
    ``(batch, n_keys)``. Query rows whose keys are all masked produce zeros and log a warning.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeMismatchError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    if not (q.shape[:-2] == k.shape[:-2] == v.shape[:-2]):
        raise ShapeMismatchError(f"attention leading axes differ: {q.shape}, {k.shape}, {v.shape}")

    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    if mask is not None:
        scores = np.where(_expand_mask(mask, scores.shape), scores, -np.inf)
    row_max = scores.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    weights = np.exp(scores - row_max)
    denom = weights.sum(axis=-1, keepdims=True)
    degenerate = denom == 0
    if degenerate.any():
        _LOGGER.warning(
            "Attention mask hides every key for %d query rows; emitting zeros",
            int(degenerate.sum()),
        )
    probs = np.divide(weights, denom, out=np.zeros_like(weights), where=~degenerate)

    def backward(g: Array) -> tuple[Array, Array, Array]:
        grad_v = np.swapaxes(probs, -1, -2) @ g
        d_probs = g @ np.swapaxes(v.data, -1, -2)
        d_scores = probs * (d_probs - (d_probs * probs).sum(axis=-1, keepdims=True))
        grad_q = (d_scores @ k.data) * scale
        grad_k = (np.swapaxes(d_scores, -1, -2) @ q.data) * scale
        return grad_q, grad_k, grad_v

    return primitive("attention", probs @ v.data, (q, k, v), backward)


def mse(
    pred: Tensor,
    target: Tensor | Array,
    mask: NDArray[np.bool_] | None = None,
) -> Tensor:
    """
    Mean squared difference over the supervised entries.

    ``mask`` is either shaped like ``pred`` or like ``pred`` without its last axis, in which case
    each selected row supervises all of its coordinates.
    """
    goal = target if isinstance(target, Tensor) else Tensor(target, dtype=pred.dtype)
    if goal.shape != pred.shape:
        raise ShapeMismatchError(f"mse: prediction {pred.shape} vs target {goal.shape}")
    if mask is None:
        selected = np.ones(pred.shape, dtype=bool)
    else:
        selected = np.asarray(mask, dtype=bool)
        if selected.shape == pred.shape[:-1]:
            selected = np.broadcast_to(selected[..., None], pred.shape)
        elif selected.shape != pred.shape:
            raise ShapeMismatchError(f"mse mask {selected.shape} does not fit {pred.shape}")
    count = int(selected.sum())
    if count == 0:
        raise EmptyMaskError("mse mask selects no supervised entries")

    diff = np.where(selected, pred.data - goal.data, 0.0).astype(pred.dtype)

    def backward(g: Array) -> tuple[Array, Array]:
        grad = g * 2.0 * diff / count
        return grad, -grad

    value = np.asarray((diff**2).sum() / count, dtype=pred.dtype)
    return primitive("mse", value, (pred, goal), backward)


@attrs.frozen
class GradCheckReport:
    coordinates: tuple[tuple[int, ...], ...]
    analytic: Array
    numeric: Array
    relative_error: Array
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.all(self.relative_error <= self.tolerance))

    @property
    def max_error(self) -> float:
        return float(self.relative_error.max()) if self.relative_error.size else 0.0


def _central_difference(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    coordinate: tuple[int, ...],
    original: Array,
    step: float,
) -> float:
    point.data[coordinate] = original + step
    upper = point.data[coordinate].astype(np.float64)
    f_plus = f(point).item()
    point.data[coordinate] = original - step
    lower = point.data[coordinate].astype(np.float64)
    f_minus = f(point).item()
    # divide by the perturbation actually stored, which differs from 2*step after rounding
    return (f_plus - f_minus) / float(upper - lower)


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    step: float = 1e-4,
    tol: float = 1e-3,
    *,
    max_coordinates: int | None = None,
    floor: float = 1e-3,
    seed: int = 0,
    reference: tuple[Callable[[Tensor], Tensor], Tensor] | None = None,
) -> GradCheckReport:
    """
    Compare tape gradients of the scalar ``f(point)`` against central finite differences.

    Differences at ``step`` and ``2 * step`` are combined by Richardson extrapolation, which cancels
    the leading truncation term.

    ``point`` is perturbed in place (and restored), so ``f`` may also ignore its argument and read
    ``point`` through a closure, as model-level checks do with parameter tensors. The relative
    error per coordinate is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    When ``max_coordinates`` is set, a seeded random subset of coordinates is checked.

    ``reference`` is an optional ``(f, point)`` twin evaluated at the same values in double
    precision. Finite differences are then taken on the twin, so a single-precision tape is judged
    against a numeric gradient that float32 rounding cannot swamp.
    """
    was_tracking = point.requires_grad
    point.requires_grad = True
    try:
        with GradientTape() as tape:
            value = f(point)
        (analytic_full,) = tape.gradient(value, [point])
    finally:
        point.requires_grad = was_tracking

    numeric_f, numeric_point = reference if reference is not None else (f, point)
    if numeric_point.shape != point.shape:
        raise ShapeMismatchError(f"reference point {numeric_point.shape} vs checked point {point.shape}")

    coordinates = [tuple(int(i) for i in c) for c in np.ndindex(*point.shape)]
    if max_coordinates is not None and len(coordinates) > max_coordinates:
        chosen = np.random.default_rng(seed).choice(
            len(coordinates), size=max_coordinates, replace=False
        )
        coordinates = [coordinates[int(i)] for i in np.sort(chosen)]

    numeric = np.empty(len(coordinates), dtype=np.float64)
    for slot, coordinate in enumerate(coordinates):
        original = numeric_point.data[coordinate].copy()
        try:
            near = _central_difference(numeric_f, numeric_point, coordinate, original, step)
            far = _central_difference(numeric_f, numeric_point, coordinate, original, 2.0 * step)
        finally:
            numeric_point.data[coordinate] = original
        numeric[slot] = (4.0 * near - far) / 3.0

    analytic = np.array([analytic_full[c] for c in coordinates], dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return GradCheckReport(
        coordinates=tuple(coordinates),
        analytic=analytic,
        numeric=numeric,
        relative_error=np.abs(analytic - numeric) / denom,
        tolerance=tol,
    )


def _weighted(x: Tensor, weights: Array) -> Tensor:
    return total(x * Tensor(weights, dtype=x.dtype))


def _primitive_cases(
    draws: dict[str, Any], dtype: np.dtype[Any]
) -> dict[str, tuple[Callable[[Tensor], Tensor], Tensor]]:
    def t(name: str) -> Tensor:
        return Tensor(np.array(draws[name], dtype=dtype))

    a, b, gain, bias = t("a"), t("b"), t("gain"), t("bias")
    q, k, v, table = t("q"), t("k"), t("v"), t("table")
    w, w3, w_ids = draws["w"], draws["w3"], draws["w_ids"]
    mask, target, ids = draws["mask"], draws["target"], draws["ids"]
    # every case gets its own copy of the point, since grad_check perturbs it in place
    return {
        "matmul[a]": (lambda x: _weighted(matmul(x, b), w), t("a")),
        "matmul[b]": (lambda x: _weighted(matmul(a, x), w), t("b")),
        "layer_norm[x]": (lambda x: _weighted(layer_norm(x, gain, bias), w), t("a")),
        "layer_norm[gain]": (lambda x: _weighted(layer_norm(a, x, bias), w), t("gain")),
        "layer_norm[bias]": (lambda x: _weighted(layer_norm(a, gain, x), w), t("bias")),
        "attention[q]": (lambda x: _weighted(attention(x, k, v, mask), w3), t("q")),
        "attention[k]": (lambda x: _weighted(attention(q, x, v, mask), w3), t("k")),
        "attention[v]": (lambda x: _weighted(attention(q, k, x, mask), w3), t("v")),
        "mse[pred]": (lambda x: mse(x, target), t("a")),
        "gelu": (lambda x: _weighted(gelu(x), w), t("a")),
        "embedding": (lambda x: _weighted(embedding(x, ids), w_ids), table),
    }


def primitive_checks(
    precision: Precision = Precision.DOUBLE,
    seed: int = 0,
    size: int = 8,
) -> dict[str, GradCheckReport]:
    """
    Gradient-check every differentiable primitive on random inputs of extent ``size``.

    Each check contracts the primitive's output with fixed random weights so that no gradient is
    trivially zero. All draws are rounded to ``precision`` first, so the double-precision twin used
    for single-precision finite differences sees exactly the same values.
    """
    rng = np.random.default_rng(seed)
    dtype = precision.dtype
    n = size

    def draw(*shape: int) -> Array:
        return rng.standard_normal(shape).astype(dtype).astype(np.float64)

    mask = np.ones((2, n), dtype=bool)
    mask[1, n // 2 :] = False
    draws: dict[str, Any] = {
        "a": draw(n, n),
        "b": draw(n, n),
        "w": draw(n, n),
        "gain": draw(n),
        "bias": draw(n),
        "q": draw(2, n, n),
        "k": draw(2, n, n),
        "v": draw(2, n, n),
        "w3": draw(2, n, n),
        "mask": mask,
        "target": draw(n, n),
        "table": draw(n, n),
        "ids": rng.integers(0, n, size=(3, n)),
        "w_ids": draw(3, n, n),
    }
    checks = _primitive_cases(draws, dtype)
    twins = None if precision is Precision.DOUBLE else _primitive_cases(draws, np.dtype(np.float64))
    tol, floor = (1e-6, 1e-3) if twins is None else (1e-3, 1e-2)
    return {
        name: grad_check(
            fn,
            point,
            step=FD_STEP,
            tol=tol,
            floor=floor,
            seed=seed,
            reference=None if twins is None else twins[name],
        )
        for name, (fn, point) in checks.items()
    }
