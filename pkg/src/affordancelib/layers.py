"""Parameter storage and transformer building blocks shared by the encoders and the denoiser."""

from __future__ import annotations

import math
from collections.abc import Iterator, Mapping

import numpy as np
from numpy.typing import NDArray

from . import numerics as nx
from .exceptions import CheckpointError, ShapeMismatchError
from .numerics import Array, Precision, Tensor


class ParameterStore:
    """
    Ordered, named collection of trainable tensors.

    Initialisation draws from one seeded generator in creation order, so two stores built by the
    same code with the same seed are identical.
    """

    def __init__(self, precision: Precision = Precision.SINGLE, seed: int = 0) -> None:
        self.precision = precision
        self._rng = np.random.default_rng(seed)
        self._tensors: dict[str, Tensor] = {}

    def _add(self, name: str, data: Array) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor = Tensor(data, requires_grad=True, dtype=self.precision.dtype)
        self._tensors[name] = tensor
        return tensor

    def normal(self, name: str, shape: tuple[int, ...], std: float) -> Tensor:
        return self._add(name, self._rng.standard_normal(shape) * std)

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self._add(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self._add(name, np.ones(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def count(self) -> int:
        return sum(tensor.data.size for tensor in self._tensors.values())

    def state(self) -> dict[str, Array]:
        return {name: tensor.data.copy() for name, tensor in self._tensors.items()}

    def load(self, state: Mapping[str, Array]) -> None:
        """Replace every parameter value; names and shapes must match exactly."""
        missing = [name for name in self._tensors if name not in state]
        if missing:
            raise CheckpointError(f"checkpoint is missing tensor {missing[0]!r}")
        for name, tensor in self._tensors.items():
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise CheckpointError(
                    f"tensor {name!r} has shape {value.shape}, model expects {tensor.shape}"
                )
        for name, tensor in self._tensors.items():
            tensor.data = np.array(state[name], dtype=self.precision.dtype)


class Linear:
    def __init__(
        self,
        store: ParameterStore,
        name: str,
        fan_in: int,
        fan_out: int,
        std: float | None = None,
    ) -> None:
        scale = 1.0 / math.sqrt(fan_in) if std is None else std
        self.weight = store.normal(f"{name}.weight", (fan_in, fan_out), scale)
        self.bias = store.zeros(f"{name}.bias", (fan_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.matmul(x, self.weight) + self.bias


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, width: int) -> None:
        self.gain = store.ones(f"{name}.gain", (width,))
        self.bias = store.zeros(f"{name}.bias", (width,))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias)


class FeedForward:
    """Two linear maps with a GELU between them."""

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        width: int,
        hidden: int,
        out: int | None = None,
        out_std: float | None = None,
    ) -> None:
        self.inner = Linear(store, f"{name}.inner", width, hidden)
        self.outer = Linear(store, f"{name}.outer", hidden, out or width, std=out_std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(nx.gelu(self.inner(x)))


class MultiHeadAttention:
    """
    Multi-head attention over batched token sequences ``(batch, tokens, width)``.

    Without ``context`` it is self-attention; with ``context`` the keys and values come from the
    context tokens, optionally restricted by a ``(batch, context_tokens)`` padding mask.
    """

    def __init__(self, store: ParameterStore, name: str, width: int, heads: int) -> None:
        if width % heads:
            raise ShapeMismatchError(f"width {width} is not divisible by {heads} heads")
        self.heads = heads
        self.query = Linear(store, f"{name}.query", width, width)
        self.key = Linear(store, f"{name}.key", width, width)
        self.value = Linear(store, f"{name}.value", width, width)
        self.output = Linear(store, f"{name}.output", width, width)

    def _split(self, x: Tensor) -> Tensor:
        batch, tokens, width = x.shape
        heads = nx.reshape(x, (batch, tokens, self.heads, width // self.heads))
        return nx.transpose(heads, (0, 2, 1, 3))

    def _merge(self, x: Tensor) -> Tensor:
        batch, heads, tokens, head_width = x.shape
        joined = nx.transpose(x, (0, 2, 1, 3))
        return nx.reshape(joined, (batch, tokens, heads * head_width))

    def __call__(
        self,
        x: Tensor,
        context: Tensor | None = None,
        mask: NDArray[np.bool_] | None = None,
    ) -> Tensor:
        source = x if context is None else context
        if source.shape[0] != x.shape[0]:
            raise ShapeMismatchError(f"context batch {source.shape[0]} != query batch {x.shape[0]}")
        attended = nx.attention(
            self._split(self.query(x)),
            self._split(self.key(source)),
            self._split(self.value(source)),
            mask,
        )
        return self.output(self._merge(attended))
