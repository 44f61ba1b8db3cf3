"""
Two-stage optimisation of the denoiser.

Pre-training supervises only the contact point: the target chunk is the contact point repeated
``T`` times and the previous frame is replaced by the current one. Fine-tuning supervises the
record's waypoint mask (every point for trajectory records). Both stages draw a random timestep
per sample, noise the target with ``q_sample`` and regress the clean chunk with a masked MSE.

Batches are assembled on a worker thread and handed to the optimizer through a bounded memory
stream. All randomness of step ``s`` derives from ``(seed, s)``, so a run resumed from a
checkpoint continues bit for bit.
"""

from __future__ import annotations

import enum
import itertools
import json
import logging
import math
from collections.abc import Sequence
from pathlib import Path
from typing import TYPE_CHECKING, Any, TextIO

import anyio
import attrs
import numpy as np
from anyio.abc import ObjectReceiveStream, ObjectSendStream
from numpy.typing import NDArray
from tenacity import (
    AsyncRetrying,
    RetryCallState,
    RetryError,
    before_sleep_log,
    retry_if_exception_type,
    stop_after_attempt,
)

from . import checkpoint as ckpt
from . import numerics as nx
from .data import AffordanceSample, DatasetManifest, frames
from .diffusion import NoiseSchedule, q_sample
from .encoders import pad_instructions
from .evaluation import ModelPredictor, heldout_records, score_records
from .exceptions import (
    NonFiniteError,
    NonFiniteLossError,
    TrainingError,
    TrainingHaltedError,
)
from .model import AffordanceDenoiser, DenoiserInput
from .numerics import Array, GradientTape, Tensor

if TYPE_CHECKING:
    from .config import RunConfig

_LOGGER = logging.getLogger(__name__)

MAX_CONSECUTIVE_ABORTS = 3
METRICS_NAME = "metrics.jsonl"
BEST_NAME = "best.ckpt"
FINAL_NAME = "final.ckpt"


class Stage(enum.StrEnum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"


class Supervision(enum.StrEnum):
    FIRST_POINT = "first-point"
    RECORD_MASK = "record-mask"


def _at_least_one(_instance: Any, attribute: attrs.Attribute[int], value: int) -> None:
    if value < 1:
        raise ValueError(f"{attribute.name} must be >= 1, got {value}")


@attrs.frozen
class TrainConfig:
    stage: Stage = attrs.field(default=Stage.PRETRAIN, converter=Stage)
    steps: int = attrs.field(default=2000, validator=_at_least_one)
    batch_size: int = attrs.field(default=32, validator=_at_least_one)
    learning_rate: float = attrs.field(default=1e-4)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = attrs.field(default=1.0)
    seed: int = 0
    eval_interval: int = attrs.field(default=200, validator=_at_least_one)
    log_interval: int = attrs.field(default=50, validator=_at_least_one)
    prefetch: int = attrs.field(default=2, validator=_at_least_one)
    supervision: Supervision = attrs.field(converter=Supervision)

    @supervision.default
    def _default_supervision(self) -> Supervision:
        return Supervision.FIRST_POINT if self.stage is Stage.PRETRAIN else Supervision.RECORD_MASK

    @learning_rate.validator
    def _check_lr(self, _attribute: attrs.Attribute[float], value: float) -> None:
        if not value > 0:
            raise ValueError(f"learning_rate must be > 0, got {value}")

    @grad_clip.validator
    def _check_clip(self, _attribute: attrs.Attribute[float], value: float) -> None:
        if not value > 0:
            raise ValueError(f"grad_clip must be > 0, got {value}")

    def to_dict(self) -> dict[str, Any]:
        raw = attrs.asdict(self)
        raw["stage"] = self.stage.value
        raw["supervision"] = self.supervision.value
        return raw


class AdamW:
    """Adaptive moments with decoupled weight decay on matrices (parameters with two or more axes)."""

    def __init__(self, parameters: Sequence[tuple[str, Tensor]], cfg: TrainConfig) -> None:
        self.parameters = list(parameters)
        self.cfg = cfg
        self.updates = 0
        self.first = {name: np.zeros_like(p.data) for name, p in self.parameters}
        self.second = {name: np.zeros_like(p.data) for name, p in self.parameters}

    def load(self, first: dict[str, Array], second: dict[str, Array], updates: int) -> None:
        for name, p in self.parameters:
            if name not in first or name not in second:
                raise TrainingError(f"checkpoint has no optimizer moments for {name!r}")
            self.first[name] = np.array(first[name], dtype=p.dtype)
            self.second[name] = np.array(second[name], dtype=p.dtype)
        self.updates = updates

    def step(self, grads: dict[str, Array]) -> None:
        cfg = self.cfg
        self.updates += 1
        bias1 = 1.0 - cfg.beta1**self.updates
        bias2 = 1.0 - cfg.beta2**self.updates
        for name, p in self.parameters:
            g = grads[name].astype(p.dtype, copy=False)
            m = self.first[name] = cfg.beta1 * self.first[name] + (1.0 - cfg.beta1) * g
            v = self.second[name] = cfg.beta2 * self.second[name] + (1.0 - cfg.beta2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + cfg.epsilon)
            data = p.data
            if p.ndim >= 2:
                data = data - cfg.learning_rate * cfg.weight_decay * data
            p.data = (data - cfg.learning_rate * update).astype(p.dtype, copy=False)


@attrs.frozen(eq=False)
class Batch:
    images_current: NDArray[np.uint8]
    images_previous: NDArray[np.uint8] | None
    text_ids: NDArray[np.int64]
    text_mask: NDArray[np.bool_]
    targets: NDArray[np.float64]
    supervise: NDArray[np.bool_]
    k: NDArray[np.int64]
    noise: NDArray[np.float64]

    @property
    def size(self) -> int:
        return int(self.targets.shape[0])


def collate(
    records: Sequence[AffordanceSample],
    supervision: Supervision,
    k: NDArray[np.int64],
    noise: NDArray[np.float64],
) -> Batch:
    if not records:
        raise TrainingError("cannot train on an empty batch")
    ids, keep = pad_instructions([r.instruction for r in records])
    if supervision is Supervision.FIRST_POINT:
        current, _ = frames(records, previous=False)
        contacts = np.stack([r.waypoints.to_array()[0] for r in records])
        chunk = records[0].chunk_size
        targets = np.repeat(contacts[:, None, :], chunk, axis=1)
        supervise = np.zeros((len(records), chunk), dtype=bool)
        supervise[:, 0] = True
        previous = None
    else:
        current, previous = frames(records)
        targets = np.stack([r.waypoints.to_array() for r in records])
        supervise = np.array([r.supervise_mask for r in records], dtype=bool)
    return Batch(current, previous, ids, keep, targets, supervise, k, noise)


def assemble_batch(
    records: Sequence[AffordanceSample],
    step: int,
    cfg: TrainConfig,
    schedule_steps: int,
) -> Batch:
    """Batch for step ``step``: record indices from ``(seed, step)``, timesteps and noise from ``(seed, step, 1)``."""
    pick = np.random.default_rng([cfg.seed, step]).integers(0, len(records), size=cfg.batch_size)
    chosen = [records[int(i)] for i in pick]
    noise_rng = np.random.default_rng([cfg.seed, step, 1])
    k = noise_rng.integers(0, schedule_steps, size=cfg.batch_size)
    noise = noise_rng.standard_normal((cfg.batch_size, chosen[0].chunk_size, 2))
    return collate(chosen, cfg.supervision, k, noise)


def batch_loss(model: AffordanceDenoiser, batch: Batch, schedule: NoiseSchedule) -> Tensor:
    noisy = q_sample(schedule, batch.targets, batch.k, batch.noise)
    conditions = model.encode_conditions(
        batch.images_current, batch.images_previous, batch.text_ids, batch.text_mask
    )
    pred = model(DenoiserInput(batch.k, Tensor(noisy, dtype=model.dtype), conditions))
    return nx.mse(pred, batch.targets, batch.supervise)


def _clip(grads: dict[str, Array], limit: float) -> float:
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm > limit:
        scale = limit / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


def train_step(
    model: AffordanceDenoiser,
    optimizer: AdamW,
    batch: Batch,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
) -> float:
    """
    One optimizer update on ``batch``; returns the batch loss.

    A non-finite loss or gradient raises ``NonFiniteLossError`` before any parameter changes.
    """
    params = optimizer.parameters
    try:
        with GradientTape() as tape:
            loss = batch_loss(model, batch, schedule)
    except NonFiniteError as exc:
        raise NonFiniteLossError(f"forward pass produced non-finite values: {exc}") from exc
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLossError(f"loss is {value}")
    grads = dict(zip((n for n, _ in params), tape.gradient(loss, [p for _, p in params]), strict=True))
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NonFiniteLossError("gradient contains non-finite values")
    _clip(grads, cfg.grad_clip)
    optimizer.step(grads)
    return value


@attrs.frozen
class MetricsRow:
    step: int
    loss: float
    mae_norm: float | None = None
    mae_px: float | None = None

    def to_json(self) -> str:
        return json.dumps(
            {"step": self.step, "loss": self.loss, "mae_norm": self.mae_norm, "mae_px": self.mae_px}
        )


@attrs.frozen
class TrainResult:
    best_checkpoint: Path
    final_checkpoint: Path
    metrics_path: Path
    best_mae: float | None
    history: tuple[MetricsRow, ...]


def read_metrics(path: Path) -> list[MetricsRow]:
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            raw = json.loads(line)
            rows.append(MetricsRow(raw["step"], raw["loss"], raw.get("mae_norm"), raw.get("mae_px")))
    return rows


def _heldout_mae(
    model: AffordanceDenoiser, run: RunConfig, corpus: DatasetManifest, schedule: NoiseSchedule
) -> tuple[float, float]:
    predictor = ModelPredictor(model, run.sampler, schedule)
    scores = score_records(predictor, heldout_records(corpus), seed=run.train.seed)
    return (
        float(np.mean([s.mae_norm for s in scores])),
        float(np.mean([s.mae_px for s in scores])),
    )


class BatchFeed:
    """
    Producer side of the prefetch hand-off: assembles batches ``start+1, start+2, ...`` on a
    worker thread. A failure is kept and the stream closed, so the consumer sees it on receive.
    """

    def __init__(
        self,
        records: Sequence[AffordanceSample],
        start: int,
        cfg: TrainConfig,
        schedule_steps: int,
    ) -> None:
        self.records = records
        self.start = start
        self.cfg = cfg
        self.schedule_steps = schedule_steps
        self.error: Exception | None = None

    async def produce(self, send: ObjectSendStream[Batch]) -> None:
        async with send:
            try:
                for step in itertools.count(self.start + 1):
                    batch = await anyio.to_thread.run_sync(
                        assemble_batch, self.records, step, self.cfg, self.schedule_steps
                    )
                    await send.send(batch)
            except (anyio.BrokenResourceError, anyio.ClosedResourceError):
                return
            except Exception as exc:
                self.error = exc

    async def next(self, receive: ObjectReceiveStream[Batch]) -> Batch:
        try:
            return await receive.receive()
        except anyio.EndOfStream:
            if self.error is not None:
                raise self.error from None
            raise TrainingError("batch producer stopped early") from None


async def run_stage(
    run: RunConfig,
    corpus: DatasetManifest,
    out_dir: Path,
    *,
    init: ckpt.Checkpoint | None = None,
    resume: ckpt.Checkpoint | None = None,
) -> TrainResult:
    """
    Train ``run.train.steps`` steps of ``run.train.stage`` on the corpus' train split.

    Held-out MAE on the test split is measured every ``eval_interval`` steps and at the end; the
    best-scoring parameters go to ``best.ckpt`` and the last ones to ``final.ckpt``.
    """
    cfg = run.train
    if not corpus.has_split:
        raise TrainingError("corpus needs a train/test split before training")
    train_records = corpus.train().records
    schedule = NoiseSchedule.build(run.schedule)

    model = AffordanceDenoiser(run.model, seed=cfg.seed)
    trainable = list(model.trainable())
    frozen = {name for name, _ in model.store.items()} - {name for name, _ in trainable}
    for name in frozen:
        model.store[name].requires_grad = False
    optimizer = AdamW(trainable, cfg)

    start = 0
    best_mae: float | None = None
    if resume is not None:
        if resume.state.stage != cfg.stage.value:
            raise TrainingError(f"cannot resume a {resume.state.stage} checkpoint as {cfg.stage.value}")
        model.store.load(resume.parameters)
        first, second = resume.moments()
        optimizer.load(first, second, resume.state.updates)
        start, best_mae = resume.state.step, resume.state.best_mae
    elif init is not None:
        model.store.load(init.parameters)

    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / METRICS_NAME
    best_path, final_path = out_dir / BEST_NAME, out_dir / FINAL_NAME
    history: list[MetricsRow] = []
    config_dict = run.to_dict()
    step = start

    def snapshot(best: float | None) -> ckpt.Checkpoint:
        state = ckpt.TrainingState(
            step=step, updates=optimizer.updates, stage=cfg.stage.value, best_mae=best
        )
        return ckpt.model_checkpoint(model, config_dict, state, (optimizer.first, optimizer.second))

    if best_mae is None or not best_path.exists():
        ckpt.save(best_path, snapshot(best_mae))

    def budget_spent(_state: RetryCallState) -> bool:
        return step >= cfg.steps

    # an abort on the last step index ends the stage instead of training past the budget
    retrying = AsyncRetrying(
        stop=stop_after_attempt(MAX_CONSECUTIVE_ABORTS) | budget_spent,
        retry=retry_if_exception_type(NonFiniteLossError),
        before_sleep=before_sleep_log(_LOGGER, logging.WARNING),
    )
    feed = BatchFeed(train_records, start, cfg, schedule.steps)

    async def consume(receive: ObjectReceiveStream[Batch], metrics: TextIO) -> None:
        nonlocal step, best_mae
        while step < cfg.steps:
            loss = math.nan
            try:
                async for attempt in retrying:
                    with attempt:
                        batch = await feed.next(receive)
                        step += 1
                        loss = await anyio.to_thread.run_sync(
                            train_step, model, optimizer, batch, schedule, cfg
                        )
            except RetryError as exc:
                if exc.last_attempt.attempt_number >= MAX_CONSECUTIVE_ABORTS:
                    raise TrainingHaltedError(
                        f"{MAX_CONSECUTIVE_ABORTS} consecutive non-finite steps ending at step {step}"
                    ) from exc
                _LOGGER.warning("%s step %d aborted with no steps left", cfg.stage.value, step)

            evaluate_now = step % cfg.eval_interval == 0 or step == cfg.steps
            if not evaluate_now and step % cfg.log_interval:
                continue
            row = MetricsRow(step, loss)
            if evaluate_now:
                mae_norm, mae_px = await anyio.to_thread.run_sync(
                    _heldout_mae, model, run, corpus, schedule
                )
                row = MetricsRow(step, loss, mae_norm, mae_px)
                if best_mae is None or mae_norm < best_mae:
                    best_mae = mae_norm
                    ckpt.save(best_path, snapshot(best_mae))
                _LOGGER.info(
                    "%s step %d: loss=%.5f mae_norm=%.4f mae_px=%.2f",
                    cfg.stage.value,
                    step,
                    loss,
                    mae_norm,
                    mae_px,
                )
            metrics.write(row.to_json() + "\n")
            metrics.flush()
            history.append(row)

    failure: Exception | None = None
    send, receive = anyio.create_memory_object_stream[Batch](cfg.prefetch)
    with metrics_path.open("a" if resume is not None else "w", encoding="utf-8") as metrics:
        async with anyio.create_task_group() as tg, receive:
            tg.start_soon(feed.produce, send)
            try:
                await consume(receive, metrics)
            except Exception as exc:
                failure = exc
            tg.cancel_scope.cancel()
    if failure is not None:
        raise failure

    ckpt.save(final_path, snapshot(best_mae))
    return TrainResult(best_path, final_path, metrics_path, best_mae, tuple(history))


async def pretrain(
    run: RunConfig,
    corpus: DatasetManifest,
    out_dir: Path,
    *,
    resume: ckpt.Checkpoint | None = None,
) -> TrainResult:
    train = attrs.evolve(run.train, stage=Stage.PRETRAIN, supervision=Supervision.FIRST_POINT)
    staged = attrs.evolve(run, train=train)
    return await run_stage(staged, corpus, out_dir, resume=resume)


async def finetune(
    run: RunConfig,
    corpus: DatasetManifest,
    out_dir: Path,
    *,
    init: ckpt.Checkpoint | None = None,
    resume: ckpt.Checkpoint | None = None,
) -> TrainResult:
    """Fine-tune from ``init`` (a pretrained checkpoint) or, without one, from fresh weights."""
    train = attrs.evolve(run.train, stage=Stage.FINETUNE, supervision=Supervision.RECORD_MASK)
    staged = attrs.evolve(run, train=train)
    return await run_stage(staged, corpus, out_dir, init=init, resume=resume)
