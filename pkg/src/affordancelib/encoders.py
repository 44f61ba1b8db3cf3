"""
Small trainable image and text encoders plus the sinusoidal positional embeddings.

Image frames are cut into non-overlapping square patches that are linearly projected to the model
width. Instructions are token ids over a closed vocabulary, embedded and passed through one
pre-norm self-attention layer.
"""

from __future__ import annotations

import enum
import json
from collections.abc import Iterable, Sequence
from pathlib import Path

import attrs
import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import numerics as nx
from .exceptions import ShapeMismatchError, VocabularyError
from .layers import LayerNorm, Linear, MultiHeadAttention, ParameterStore
from .numerics import Array, Tensor

PAD_TOKEN = "<pad>"
PAD_ID = 0
EMBEDDING_BASE = 10000.0

DEFAULT_WORDS: tuple[str, ...] = (
    PAD_TOKEN,
    "touch",
    "push",
    "slide",
    "the",
    "along",
    "arc",
    "red",
    "green",
    "blue",
    "yellow",
    "circle",
    "square",
    "triangle",
    "left",
    "right",
    "up",
    "down",
    "clockwise",
    "counterclockwise",
)


class TokenKind(enum.StrEnum):
    IMAGE = "image"
    TEXT = "text"
    WAYPOINT = "waypoint"
    TIMESTEP = "timestep"


@attrs.frozen(eq=False)
class TokenSequence:
    """
    A batch of token sequences ``(batch, n_tokens, d_model)``.

    ``mask`` is a ``(batch, n_tokens)`` boolean array marking real (non-padding) tokens; it is only
    present for text.
    """

    tokens: Tensor = attrs.field()
    kind: TokenKind
    mask: NDArray[np.bool_] | None = None

    @tokens.validator
    def _check_tokens(self, _attribute: attrs.Attribute[Tensor], value: Tensor) -> None:
        if value.ndim != 3 or value.shape[1] < 1:
            raise ShapeMismatchError(f"token sequences are (batch, n>=1, width), got {value.shape}")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]

    @property
    def width(self) -> int:
        return self.tokens.shape[2]


@attrs.frozen
class Vocabulary:
    """Closed word list; a word's id is its index. Id 0 is always the padding token."""

    words: tuple[str, ...] = attrs.field(converter=tuple)

    @words.validator
    def _check_words(self, _attribute: attrs.Attribute[tuple[str, ...]], value: tuple[str, ...]) -> None:
        if not value or value[0] != PAD_TOKEN:
            raise VocabularyError(f"vocabulary must start with {PAD_TOKEN!r}")
        if len(set(value)) != len(value):
            raise VocabularyError("vocabulary contains duplicate words")

    @classmethod
    def default(cls) -> Vocabulary:
        return cls(DEFAULT_WORDS)

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str | Iterable[str]) -> list[int]:
        words = text.split() if isinstance(text, str) else list(text)
        index = {word: i for i, word in enumerate(self.words)}
        ids = []
        for word in words:
            if word not in index or word == PAD_TOKEN:
                raise VocabularyError(f"word {word!r} is not in the vocabulary")
            ids.append(index[word])
        if not ids:
            raise VocabularyError("instruction is empty")
        return ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        self.check_ids(ids)
        return [self.words[i] for i in ids if i != PAD_ID]

    def check_ids(self, ids: Iterable[int]) -> None:
        for i in ids:
            if not 0 <= int(i) < len(self.words):
                raise VocabularyError(f"token id {i} outside vocabulary of size {len(self.words)}")

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(list(self.words), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> Vocabulary:
        try:
            words = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise VocabularyError(f"cannot read vocabulary {path}: {exc}") from exc
        if not isinstance(words, list) or not all(isinstance(w, str) for w in words):
            raise VocabularyError(f"vocabulary {path} must be a JSON list of strings")
        return cls(words)


def sinusoidal_embedding(positions: ArrayLike, dim: int) -> Array:
    """
    Interleaved ``[sin, cos]`` features for each position, shape ``(n, dim)``.

    Pair ``i`` uses frequency ``1 / 10000^(2i/dim)``, so position 0 maps to ``[0, 1, 0, 1, ...]``.
    """
    if dim < 2 or dim % 2:
        raise ShapeMismatchError(f"sinusoidal embedding width must be even, got {dim}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    freqs = EMBEDDING_BASE ** (-np.arange(dim // 2, dtype=np.float64) * 2.0 / dim)
    angles = pos[:, None] * freqs[None, :]
    out = np.empty((pos.size, dim), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def timestep_embedding(k: ArrayLike, d_model: int) -> Array:
    return sinusoidal_embedding(k, d_model)


def grid_embedding(frames: ArrayLike, tokens: ArrayLike, d_model: int) -> Array:
    """Concatenate a frame-axis and a token-axis embedding, half of ``d_model`` each."""
    if d_model % 4:
        raise ShapeMismatchError(f"grid embedding width must be divisible by 4, got {d_model}")
    frame_pos = np.asarray(frames).reshape(-1)
    token_pos = np.asarray(tokens).reshape(-1)
    if frame_pos.size != token_pos.size:
        raise ShapeMismatchError("frame and token coordinate counts differ")
    if (frame_pos < 0).any() or (token_pos < 0).any():
        raise ValueError("grid coordinates must be nonnegative")
    half = d_model // 2
    return np.concatenate(
        [sinusoidal_embedding(frame_pos, half), sinusoidal_embedding(token_pos, half)], axis=1
    )


def positional_embedding(frame: int, token: int, d_model: int) -> Array:
    """Embedding of one ``(frame index, token index)`` grid coordinate, shape ``(d_model,)``."""
    return grid_embedding([frame], [token], d_model)[0]


def frame_embedding(slot: int, n_tokens: int, d_model: int) -> Array:
    return grid_embedding(np.full(n_tokens, slot), np.arange(n_tokens), d_model)


def patchify(images: Array, patch_size: int) -> Array:
    """``(batch, H, W, C)`` → ``(batch, (H/P)·(W/P), P·P·C)`` in row-major patch order."""
    batch, height, width, channels = images.shape
    if height % patch_size or width % patch_size:
        raise ShapeMismatchError(
            f"image {width}x{height} is not divisible into {patch_size}px patches"
        )
    rows, cols = height // patch_size, width // patch_size
    grid = images.reshape(batch, rows, patch_size, cols, patch_size, channels)
    grid = grid.transpose(0, 1, 3, 2, 4, 5)
    return grid.reshape(batch, rows * cols, patch_size * patch_size * channels)


def _as_pixels(images: ArrayLike) -> Array:
    pixels = np.asarray(images)
    if pixels.ndim == 3:
        pixels = pixels[None]
    if pixels.ndim != 4:
        raise ShapeMismatchError(f"images must be (H, W, C) or (batch, H, W, C), got {pixels.shape}")
    if pixels.dtype == np.uint8:
        return pixels.astype(np.float64) / 255.0
    return pixels.astype(np.float64)


class ImageEncoder:
    """Linear patch embedding: each ``P×P`` patch becomes one ``d_model`` token."""

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        d_model: int,
        patch_size: int,
        channels: int = 3,
    ) -> None:
        self.d_model = d_model
        self.patch_size = patch_size
        self.dtype = store.precision.dtype
        self.projection = Linear(store, f"{name}.projection", patch_size * patch_size * channels, d_model)

    def __call__(self, images: ArrayLike, slot: int | None = None) -> TokenSequence:
        """
        Encode ``(H, W, C)`` or ``(batch, H, W, C)`` images; ``uint8`` input is scaled to [0, 1].

        When ``slot`` is given the frame's grid positional embedding is added.
        """
        patches = patchify(_as_pixels(images), self.patch_size)
        tokens = self.projection(Tensor(patches, dtype=self.dtype))
        if slot is not None:
            tokens = tokens + Tensor(frame_embedding(slot, patches.shape[1], self.d_model), dtype=self.dtype)
        return TokenSequence(tokens, TokenKind.IMAGE)


class TextEncoder:
    """Token embedding, 1-D sinusoidal positions and one pre-norm self-attention layer."""

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        vocab_size: int,
        d_model: int,
        heads: int,
    ) -> None:
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.dtype = store.precision.dtype
        self.table = store.normal(f"{name}.table", (vocab_size, d_model), 1.0)
        self.norm = LayerNorm(store, f"{name}.norm", d_model)
        self.attention = MultiHeadAttention(store, f"{name}.attention", d_model, heads)

    def __call__(self, ids: ArrayLike, mask: ArrayLike | None = None) -> TokenSequence:
        index = np.asarray(ids, dtype=np.int64)
        if index.ndim == 1:
            index = index[None]
        if index.ndim != 2 or index.shape[1] < 1:
            raise ShapeMismatchError(f"token ids must be (batch, length>=1), got {index.shape}")
        if index.min() < 0 or index.max() >= self.vocab_size:
            bad = int(index[(index < 0) | (index >= self.vocab_size)][0])
            raise VocabularyError(f"token id {bad} outside vocabulary of size {self.vocab_size}")
        keep = index != PAD_ID if mask is None else np.asarray(mask, dtype=bool).reshape(index.shape)

        positions = Tensor(sinusoidal_embedding(np.arange(index.shape[1]), self.d_model), dtype=self.dtype)
        x = nx.embedding(self.table, index) + positions
        x = x + self.attention(self.norm(x), mask=keep)
        return TokenSequence(x, TokenKind.TEXT, mask=keep)


def pad_instructions(instructions: Sequence[Sequence[int]]) -> tuple[NDArray[np.int64], NDArray[np.bool_]]:
    """Right-pad id sequences with ``PAD_ID`` to a common length; returns ids and the keep mask."""
    if not instructions or any(len(ids) == 0 for ids in instructions):
        raise VocabularyError("every instruction needs at least one token")
    length = max(len(ids) for ids in instructions)
    ids = np.full((len(instructions), length), PAD_ID, dtype=np.int64)
    keep = np.zeros((len(instructions), length), dtype=bool)
    for row, seq in enumerate(instructions):
        ids[row, : len(seq)] = seq
        keep[row, : len(seq)] = True
    return ids, keep
