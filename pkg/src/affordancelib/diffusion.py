"""
Noise schedules, closed-form forward noising and the few-step probability-flow ODE sampler.

The sampler is the first-order exponential integrator in data-prediction form. Moving from grid
point ``k`` to ``k'`` it evaluates the denoiser once and sets ``x ← √ᾱ_{k'}·x̂⁰ + σ_{k'}·ε̂`` where
``ε̂`` is recovered from ``x̂⁰``; the last evaluation returns ``x̂⁰`` itself.
"""

from __future__ import annotations

import enum
import logging
import math
from collections.abc import Callable, Sequence
from typing import Any

import attrs
import numpy as np
from numpy.typing import ArrayLike, NDArray

from .exceptions import DiffusionError
from .model import AffordanceDenoiser, Conditions, DenoiserInput
from .numerics import Array, Tensor

_LOGGER = logging.getLogger(__name__)

Denoiser = Callable[[Array, int], Array]
Seed = int | Sequence[int]


class ScheduleKind(enum.StrEnum):
    COSINE = "cosine"
    LINEAR_BETA = "linear-beta"


class StepSpacing(enum.StrEnum):
    UNIFORM_K = "uniform-k"
    UNIFORM_LOG_SNR = "uniform-log-snr"


@attrs.frozen
class ScheduleConfig:
    kind: ScheduleKind = attrs.field(default=ScheduleKind.COSINE, converter=ScheduleKind)
    steps: int = attrs.field(default=1000)
    cosine_offset: float = 0.008
    max_beta: float = attrs.field(default=0.999)
    beta_start: float = 1e-4
    beta_end: float = 0.02

    @steps.validator
    def _check_steps(self, _attribute: attrs.Attribute[int], value: int) -> None:
        if value < 2:
            raise ValueError(f"schedule needs at least 2 steps, got {value}")

    @max_beta.validator
    def _check_max_beta(self, _attribute: attrs.Attribute[float], value: float) -> None:
        if not 0.0 < value < 1.0:
            raise ValueError(f"max_beta must lie in (0, 1), got {value}")

    def to_dict(self) -> dict[str, Any]:
        raw = attrs.asdict(self)
        raw["kind"] = self.kind.value
        return raw


@attrs.frozen
class SamplerConfig:
    steps: int = attrs.field(default=5)
    spacing: StepSpacing = attrs.field(default=StepSpacing.UNIFORM_K, converter=StepSpacing)
    initial_noise_scale: float = attrs.field(default=1.0)

    @steps.validator
    def _check_steps(self, _attribute: attrs.Attribute[int], value: int) -> None:
        if value < 1:
            raise ValueError(f"sampler needs at least one step, got {value}")

    @initial_noise_scale.validator
    def _check_scale(self, _attribute: attrs.Attribute[float], value: float) -> None:
        if value <= 0:
            raise ValueError(f"initial noise scale must be positive, got {value}")

    def to_dict(self) -> dict[str, Any]:
        raw = attrs.asdict(self)
        raw["spacing"] = self.spacing.value
        return raw


def _cosine_alpha_bar(steps: int, offset: float, max_beta: float) -> Array:
    def f(t: Array) -> Array:
        return np.cos((t + offset) / (1.0 + offset) * math.pi / 2.0) ** 2

    grid = np.arange(steps + 1, dtype=np.float64) / steps
    betas = np.minimum(1.0 - f(grid[1:]) / f(grid[:-1]), max_beta)
    return np.cumprod(1.0 - betas)


def _linear_alpha_bar(steps: int, start: float, end: float, max_beta: float) -> Array:
    scale = 1000.0 / steps
    betas = np.minimum(np.linspace(start * scale, end * scale, steps), max_beta)
    return np.cumprod(1.0 - betas)


@attrs.frozen(eq=False)
class NoiseSchedule:
    """The ``ᾱ_k`` table for ``k = 0 .. steps-1`` and the coefficients derived from it."""

    alpha_bar: Array = attrs.field()
    kind: ScheduleKind | None = None

    @alpha_bar.validator
    def _check_table(self, _attribute: attrs.Attribute[Array], value: Array) -> None:
        if value.ndim != 1 or value.size < 2:
            raise DiffusionError("ᾱ table must be a vector with at least two entries")
        if not np.all(np.isfinite(value)) or value.min() < 0.0 or value.max() > 1.0:
            raise DiffusionError("ᾱ entries must lie in [0, 1]")
        if np.any(np.diff(value) > 0):
            raise DiffusionError("ᾱ must be non-increasing in k")

    @classmethod
    def build(cls, config: ScheduleConfig | None = None) -> NoiseSchedule:
        cfg = config or ScheduleConfig()
        if cfg.kind is ScheduleKind.COSINE:
            table = _cosine_alpha_bar(cfg.steps, cfg.cosine_offset, cfg.max_beta)
        else:
            table = _linear_alpha_bar(cfg.steps, cfg.beta_start, cfg.beta_end, cfg.max_beta)
        return cls(table, cfg.kind)

    @classmethod
    def from_alpha_bar(cls, values: ArrayLike) -> NoiseSchedule:
        return cls(np.asarray(values, dtype=np.float64))

    @property
    def steps(self) -> int:
        return int(self.alpha_bar.size)

    def check_step(self, k: ArrayLike) -> NDArray[np.int64]:
        index = np.asarray(k, dtype=np.int64)
        if index.size and (index.min() < 0 or index.max() >= self.steps):
            raise DiffusionError(f"timestep outside [0, {self.steps}): {np.asarray(k).tolist()}")
        return index

    def alpha(self, k: ArrayLike) -> Array:
        return np.sqrt(self.alpha_bar[self.check_step(k)])

    def sigma(self, k: ArrayLike) -> Array:
        return np.sqrt(1.0 - self.alpha_bar[self.check_step(k)])

    def log_snr(self, k: ArrayLike | None = None) -> Array:
        """``log(ᾱ / (1 - ᾱ))``; infinite where ``ᾱ`` is exactly 0 or 1."""
        table = self.alpha_bar if k is None else self.alpha_bar[self.check_step(k)]
        with np.errstate(divide="ignore"):
            return np.log(table) - np.log1p(-table)

    def drift(self) -> Array:
        """``f(t) = d log α / dt`` on the continuous time ``t = k / steps``."""
        with np.errstate(divide="ignore"):
            log_alpha = 0.5 * np.log(self.alpha_bar)
        return np.gradient(log_alpha, 1.0 / self.steps)

    def diffusion_squared(self) -> Array:
        """``g²(t) = dσ²/dt - 2 f(t) σ²(t)`` for the variance-preserving process."""
        variance = 1.0 - self.alpha_bar
        return np.gradient(variance, 1.0 / self.steps) - 2.0 * self.drift() * variance


def _per_sample(coef: Array, like: Array) -> Array:
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (like.ndim - coef.ndim))


def q_sample(schedule: NoiseSchedule, x0: ArrayLike, k: ArrayLike, noise: ArrayLike) -> Array:
    """``√ᾱ_k·x⁰ + √(1-ᾱ_k)·ε``; ``k`` is a scalar or one timestep per leading row."""
    clean = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(noise, dtype=np.float64)
    if clean.shape != eps.shape:
        raise DiffusionError(f"clean signal {clean.shape} and noise {eps.shape} differ in shape")
    return _per_sample(schedule.alpha(k), clean) * clean + _per_sample(schedule.sigma(k), clean) * eps


def x0_to_eps(schedule: NoiseSchedule, x0_hat: ArrayLike, xk: ArrayLike, k: ArrayLike) -> Array:
    """Invert ``q_sample`` for the noise: ``ε̂ = (x^k - √ᾱ_k·x̂⁰) / √(1-ᾱ_k)``."""
    sigma = schedule.sigma(k)
    if np.any(sigma == 0.0):
        raise DiffusionError(f"ᾱ_k = 1 at k={np.asarray(k).tolist()}; noise is not recoverable")
    noisy = np.asarray(xk, dtype=np.float64)
    clean = np.asarray(x0_hat, dtype=np.float64)
    return (noisy - _per_sample(schedule.alpha(k), noisy) * clean) / _per_sample(sigma, noisy)


def sampling_grid(schedule: NoiseSchedule, cfg: SamplerConfig) -> NDArray[np.int64]:
    """
    Descending evaluation timesteps from ``steps - 1`` down to ``k_min``.

    ``k_min`` is the first timestep whose ``ᾱ`` is below one, which keeps every evaluation point
    invertible for ``ε̂``.
    """
    noisy = np.flatnonzero(schedule.alpha_bar < 1.0)
    if noisy.size == 0:
        raise DiffusionError("schedule never adds noise")
    k_min, k_max = int(noisy[0]), schedule.steps - 1
    if cfg.steps > k_max - k_min + 1:
        raise DiffusionError(f"{cfg.steps} sampling steps exceed the {k_max - k_min + 1} usable timesteps")
    if cfg.steps == 1:
        return np.array([k_max], dtype=np.int64)

    if cfg.spacing is StepSpacing.UNIFORM_K:
        grid = np.round(np.linspace(k_max, k_min, cfg.steps)).astype(np.int64)
    else:
        candidates = np.arange(k_min, k_max + 1)
        snr = schedule.log_snr(candidates)
        finite = np.isfinite(snr)
        candidates, snr = candidates[finite], snr[finite]
        targets = np.linspace(snr[-1], snr[0], cfg.steps)
        grid = candidates[np.abs(snr[None, :] - targets[:, None]).argmin(axis=1)].astype(np.int64)

    _, first = np.unique(grid, return_index=True)
    if first.size != grid.size:
        _LOGGER.warning(
            "Sampling grid collapsed %d duplicate timesteps; using %d steps",
            grid.size - first.size,
            first.size,
        )
        grid = grid[np.sort(first)]
    return grid


def integrate_ode(
    denoise: Denoiser,
    x_init: ArrayLike,
    schedule: NoiseSchedule,
    grid: Sequence[int] | NDArray[np.int64],
) -> Array:
    """Run the data-prediction update over ``grid`` (descending) and return the final ``x̂⁰``."""
    x = np.asarray(x_init, dtype=np.float64)
    steps = [int(k) for k in grid]
    for index, k in enumerate(steps):
        x0_hat = np.asarray(denoise(x, k), dtype=np.float64)
        if index + 1 < len(steps):
            k_next = steps[index + 1]
            eps_hat = x0_to_eps(schedule, x0_hat, x, k)
            x = schedule.alpha(k_next) * x0_hat + schedule.sigma(k_next) * eps_hat
        else:
            x = x0_hat
        if not np.all(np.isfinite(x)):
            raise DiffusionError(f"sampler state became non-finite at step {index} (k={k})")
    return x


def initial_noise(seeds: Sequence[Seed], chunk_size: int, cfg: SamplerConfig) -> Array:
    """One independent standard-normal chunk per seed, scaled by ``σ̃``."""
    draws = [np.random.default_rng(seed).standard_normal((chunk_size, 2)) for seed in seeds]
    return np.stack(draws) * cfg.initial_noise_scale


def ode_sample(
    model: AffordanceDenoiser,
    conditions: Conditions,
    cfg: SamplerConfig,
    schedule: NoiseSchedule,
    seeds: Sequence[Seed],
    *,
    clamp: bool = True,
) -> Array:
    """
    Sample one waypoint chunk per conditioned record, ``(batch, T, 2)``.

    Record ``i`` starts from the noise drawn with ``seeds[i]``, so a record's prediction does not
    depend on what else is in the batch. Outputs are clamped to ``[0, 1]`` unless ``clamp`` is off.
    """
    batch = conditions.batch
    if len(seeds) != batch:
        raise DiffusionError(f"{batch} conditioned records but {len(seeds)} seeds")
    dtype = model.dtype

    def denoise(x: Array, k: int) -> Array:
        inputs = DenoiserInput(np.full(batch, k), Tensor(x, dtype=dtype), conditions)
        return model(inputs).data

    x_init = initial_noise(seeds, model.config.chunk_size, cfg)
    result = integrate_ode(denoise, x_init, schedule, sampling_grid(schedule, cfg))
    return np.clip(result, 0.0, 1.0) if clamp else result
