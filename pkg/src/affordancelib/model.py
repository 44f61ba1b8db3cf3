"""
The affordance denoiser: a conditional diffusion transformer over waypoint chunks.

The model predicts clean waypoints ``x̂⁰`` from a noisy chunk ``x^k``, the timestep ``k``, an image
pair and an instruction. Visual conditioning goes through position offset attention (current-frame
tokens concatenated with frame-difference tokens); image and text tokens are injected by
cross-attention in alternating blocks; a small MLP head maps the point tokens back to coordinates.
"""

from __future__ import annotations

import enum
import logging
from collections.abc import Callable, Iterator
from typing import Any

import attrs
import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import numerics as nx
from .encoders import (
    DEFAULT_WORDS,
    ImageEncoder,
    TextEncoder,
    TokenKind,
    TokenSequence,
    frame_embedding,
    sinusoidal_embedding,
    timestep_embedding,
)
from .exceptions import ShapeMismatchError
from .layers import FeedForward, LayerNorm, Linear, MultiHeadAttention, ParameterStore
from .numerics import GradCheckReport, Precision, Tensor

_LOGGER = logging.getLogger(__name__)

HEAD_OUTPUT_STD = 0.02
ENCODER_PREFIXES = ("image_encoder.", "text_encoder.")


class CrossAttentionOrder(enum.StrEnum):
    IMAGE_FIRST = "image-first"
    TEXT_FIRST = "text-first"


def _positive(_instance: Any, attribute: attrs.Attribute[int], value: int) -> None:
    if value < 1:
        raise ValueError(f"{attribute.name} must be >= 1, got {value}")


def _image_size(value: Any) -> tuple[int, int]:
    width, height = (int(v) for v in value)
    return width, height


@attrs.frozen
class ModelConfig:
    n_layers: int = attrs.field(default=4, validator=_positive)
    d_model: int = attrs.field(default=128, validator=_positive)
    n_heads: int = attrs.field(default=4, validator=_positive)
    chunk_size: int = attrs.field(default=5, validator=_positive)
    patch_size: int = attrs.field(default=16, validator=_positive)
    image_size: tuple[int, int] = attrs.field(default=(64, 64), converter=_image_size)
    vocab_size: int = attrs.field(default=len(DEFAULT_WORDS), validator=_positive)
    mlp_ratio: int = attrs.field(default=4, validator=_positive)
    disable_poa: bool = False
    disable_sial: bool = False
    cross_attention_order: CrossAttentionOrder = attrs.field(
        default=CrossAttentionOrder.IMAGE_FIRST, converter=CrossAttentionOrder
    )
    freeze_encoders: bool = False
    precision: Precision = attrs.field(default=Precision.SINGLE, converter=Precision)

    @d_model.validator
    def _check_width(self, _attribute: attrs.Attribute[int], value: int) -> None:
        if value % 4:
            raise ValueError(f"d_model must be divisible by 4, got {value}")

    @n_heads.validator
    def _check_heads(self, _attribute: attrs.Attribute[int], value: int) -> None:
        if self.d_model % value:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {value}")

    @image_size.validator
    def _check_image_size(self, _attribute: attrs.Attribute[tuple[int, int]], value: tuple[int, int]) -> None:
        width, height = value
        if width < 1 or height < 1 or width % self.patch_size or height % self.patch_size:
            raise ValueError(f"image size {width}x{height} must be a positive multiple of patch {self.patch_size}")

    @property
    def tokens_per_frame(self) -> int:
        width, height = self.image_size
        return (width // self.patch_size) * (height // self.patch_size)

    @property
    def visual_tokens(self) -> int:
        return self.tokens_per_frame * (1 if self.disable_poa else 2)

    def to_dict(self) -> dict[str, Any]:
        raw = attrs.asdict(self)
        raw["image_size"] = list(self.image_size)
        raw["cross_attention_order"] = self.cross_attention_order.value
        raw["precision"] = self.precision.value
        return raw

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> ModelConfig:
        return cls(**raw)


@attrs.frozen(eq=False)
class Conditions:
    """Encoded conditioning for a batch: fused visual tokens and masked text tokens."""

    visual: TokenSequence
    text: TokenSequence

    @property
    def batch(self) -> int:
        return self.visual.tokens.shape[0]


@attrs.frozen(eq=False)
class DenoiserInput:
    k: NDArray[np.int64] = attrs.field(converter=lambda v: np.asarray(v, dtype=np.int64).reshape(-1))
    noisy_waypoints: Tensor
    conditions: Conditions

    def __attrs_post_init__(self) -> None:
        batch = self.conditions.batch
        shape = self.noisy_waypoints.shape
        if len(shape) != 3 or shape[0] != batch or shape[2] != 2:
            raise ShapeMismatchError(f"noisy waypoints must be ({batch}, T, 2), got {shape}")
        if self.k.shape != (batch,):
            raise ShapeMismatchError(f"expected {batch} timesteps, got {self.k.shape[0]}")
        if (self.k < 0).any():
            raise ValueError("timesteps must be nonnegative")


class DiTBlock:
    """Pre-norm self-attention, cross-attention to one conditioning stream, then an MLP."""

    def __init__(self, store: ParameterStore, name: str, width: int, heads: int, hidden: int) -> None:
        self.self_norm = LayerNorm(store, f"{name}.self_norm", width)
        self.self_attention = MultiHeadAttention(store, f"{name}.self_attention", width, heads)
        self.cross_norm = LayerNorm(store, f"{name}.cross_norm", width)
        self.cross_attention = MultiHeadAttention(store, f"{name}.cross_attention", width, heads)
        self.mlp_norm = LayerNorm(store, f"{name}.mlp_norm", width)
        self.mlp = FeedForward(store, f"{name}.mlp", width, hidden)

    def __call__(self, x: Tensor, context: TokenSequence) -> Tensor:
        x = x + self.self_attention(self.self_norm(x))
        x = x + self.cross_attention(self.cross_norm(x), context.tokens, context.mask)
        return x + self.mlp(self.mlp_norm(x))


class AffordanceDenoiser:
    """
    ``f_θ(k, x^k, I_{t-1:t}, ℓ) → x̂⁰``.

    Parameters are created in a fixed order from one seeded store, so the same config and seed always
    give the same initial weights. Outputs are unbounded; callers clamp at inference.
    """

    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        self.config = config
        self.store = ParameterStore(config.precision, seed)
        d = config.d_model
        self.image_encoder = ImageEncoder(self.store, "image_encoder", d, config.patch_size)
        self.text_encoder = TextEncoder(self.store, "text_encoder", config.vocab_size, d, config.n_heads)
        self.waypoint_embed = Linear(self.store, "waypoint_embed", 2, d)
        self.timestep_embed = FeedForward(self.store, "timestep_embed", d, d)
        self.blocks = [
            DiTBlock(self.store, f"blocks.{i}", d, config.n_heads, d * config.mlp_ratio)
            for i in range(config.n_layers)
        ]
        self.final_norm = LayerNorm(self.store, "final_norm", d)
        self.head: FeedForward | Linear
        if config.disable_sial:
            self.head = Linear(self.store, "head", d, 2, std=HEAD_OUTPUT_STD)
        else:
            self.head = FeedForward(self.store, "head", d, d, out=2, out_std=HEAD_OUTPUT_STD)
        _LOGGER.debug("Built denoiser with %d parameters", self.store.count())

    @property
    def dtype(self) -> np.dtype[Any]:
        return self.config.precision.dtype

    def parameter_count(self) -> int:
        return self.store.count()

    def trainable(self) -> Iterator[tuple[str, Tensor]]:
        for name, tensor in self.store.items():
            if self.config.freeze_encoders and name.startswith(ENCODER_PREFIXES):
                continue
            yield name, tensor

    def position_offset_attention(self, cur: TokenSequence, prev: TokenSequence) -> TokenSequence:
        """Current tokens followed by motion tokens ``cur - prev``; current tokens only without POA."""
        if cur.tokens.shape != prev.tokens.shape:
            raise ShapeMismatchError(
                f"current frame tokens {cur.tokens.shape} vs previous frame tokens {prev.tokens.shape}"
            )
        if self.config.disable_poa:
            return TokenSequence(cur.tokens, TokenKind.IMAGE)
        motion = cur.tokens - prev.tokens
        return TokenSequence(nx.concat([cur.tokens, motion], axis=1), TokenKind.IMAGE)

    def _visual_positions(self, n_tokens: int) -> Tensor:
        slots = [frame_embedding(slot, n_tokens, self.config.d_model) for slot in range(2)]
        stacked = slots[0] if self.config.disable_poa else np.concatenate(slots, axis=0)
        return Tensor(stacked, dtype=self.dtype)

    def encode_conditions(
        self,
        images_current: ArrayLike,
        images_previous: ArrayLike | None,
        text_ids: ArrayLike,
        text_mask: ArrayLike | None = None,
    ) -> Conditions:
        """Encode a batch of image pairs and instructions; a missing previous frame reuses the current one."""
        cur = self.image_encoder(images_current)
        prev = cur if images_previous is None else self.image_encoder(images_previous)
        fused = self.position_offset_attention(cur, prev)
        visual = TokenSequence(fused.tokens + self._visual_positions(cur.n_tokens), TokenKind.IMAGE)
        text = self.text_encoder(text_ids, text_mask)
        if text.tokens.shape[0] != visual.tokens.shape[0]:
            raise ShapeMismatchError(
                f"{visual.tokens.shape[0]} image pairs but {text.tokens.shape[0]} instructions"
            )
        return Conditions(visual=visual, text=text)

    def embed_waypoints(self, noisy: Tensor, k: ArrayLike) -> TokenSequence:
        """Project each point to ``d_model`` and prepend one timestep token: ``T + 1`` tokens."""
        batch = noisy.shape[0]
        d = self.config.d_model
        steps = Tensor(timestep_embedding(np.asarray(k).reshape(-1), d), dtype=self.dtype)
        timestep = nx.reshape(self.timestep_embed(steps), (batch, 1, d))
        points = self.waypoint_embed(noisy)
        return TokenSequence(nx.concat([timestep, points], axis=1), TokenKind.WAYPOINT)

    def _context(self, layer: int, conditions: Conditions) -> TokenSequence:
        image_turn = layer % 2 == 0
        if self.config.cross_attention_order is CrossAttentionOrder.TEXT_FIRST:
            image_turn = not image_turn
        return conditions.visual if image_turn else conditions.text

    def sial_head(self, hidden: TokenSequence) -> Tensor:
        if hidden.width != self.config.d_model:
            raise ShapeMismatchError(f"head expects width {self.config.d_model}, got {hidden.width}")
        return self.head(hidden.tokens)

    def forward(self, inputs: DenoiserInput) -> Tensor:
        """Predicted clean waypoints, ``(batch, T, 2)``."""
        sequence = self.embed_waypoints(inputs.noisy_waypoints, inputs.k)
        positions = sinusoidal_embedding(np.arange(sequence.n_tokens), self.config.d_model)
        x = sequence.tokens + Tensor(positions, dtype=self.dtype)
        for layer, block in enumerate(self.blocks):
            x = block(x, self._context(layer, inputs.conditions))
        x = self.final_norm(x)
        return self.sial_head(TokenSequence(x[:, 1:, :], TokenKind.WAYPOINT))

    def __call__(self, inputs: DenoiserInput) -> Tensor:
        return self.forward(inputs)


def tiny_config(**overrides: Any) -> ModelConfig:
    """The small configuration used for end-to-end gradient checks."""
    base: dict[str, Any] = {
        "n_layers": 2,
        "d_model": 32,
        "n_heads": 2,
        "chunk_size": 5,
        "patch_size": 8,
        "image_size": (16, 16),
        "mlp_ratio": 2,
        "precision": Precision.DOUBLE,
    }
    base.update(overrides)
    return ModelConfig(**base)


def model_grad_check(
    config: ModelConfig | None = None,
    seed: int = 0,
    *,
    batch: int = 2,
    coordinates_per_tensor: int = 2,
) -> dict[str, GradCheckReport]:
    """
    Check the end-to-end loss gradient of every parameter tensor against finite differences.

    The loss is the masked MSE between the denoiser output and a random target, evaluated on random
    images, instructions, timesteps and noisy chunks. A single-precision model is checked against
    finite differences of a double-precision copy holding the same weights.
    """
    cfg = config or tiny_config()
    model = AffordanceDenoiser(cfg, seed=seed)
    rng = np.random.default_rng([seed, 1])
    width, height = cfg.image_size
    images_cur = rng.integers(0, 256, size=(batch, height, width, 3), dtype=np.uint8)
    images_prev = rng.integers(0, 256, size=(batch, height, width, 3), dtype=np.uint8)
    ids = rng.integers(1, cfg.vocab_size, size=(batch, 4))
    mask = np.ones((batch, 4), dtype=bool)
    mask[-1, 2:] = False
    k = rng.integers(0, 1000, size=batch)
    dtype = cfg.precision.dtype
    noisy = rng.standard_normal((batch, cfg.chunk_size, 2)).astype(dtype)
    target = rng.uniform(0.0, 1.0, size=(batch, cfg.chunk_size, 2)).astype(dtype)

    def loss_of(denoiser: AffordanceDenoiser) -> Callable[[Tensor], Tensor]:
        chunk = Tensor(noisy, dtype=denoiser.dtype)

        def loss(_point: Tensor) -> Tensor:
            conditions = denoiser.encode_conditions(images_cur, images_prev, ids, mask)
            return nx.mse(denoiser(DenoiserInput(k, chunk, conditions)), target)

        return loss

    twin: AffordanceDenoiser | None = None
    if cfg.precision is not Precision.DOUBLE:
        twin = AffordanceDenoiser(attrs.evolve(cfg, precision=Precision.DOUBLE), seed=seed)
        twin.store.load(model.store.state())
    tol = 1e-6 if twin is None else 1e-3
    return {
        name: nx.grad_check(
            loss_of(model),
            tensor,
            step=nx.FD_STEP,
            tol=tol,
            floor=1e-2,
            max_coordinates=coordinates_per_tensor,
            seed=seed,
            reference=None if twin is None else (loss_of(twin), twin.store[name]),
        )
        for name, tensor in model.store.items()
    }
