"""
Held-out scoring: waypoint MAE, evaluation reports and the comparison harnesses.

``mae`` averages absolute coordinate error over all ``2T`` entries of a chunk, once in normalised
units and once in pixels (u scaled by width, v by height).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from collections.abc import Sequence
from pathlib import Path
from typing import TYPE_CHECKING, Any, Protocol

import anyio
import attrs
import numpy as np
from numpy.typing import ArrayLike

from .data import AffordanceSample, DatasetManifest, Source, Split, WaypointChunk, frames
from .diffusion import NoiseSchedule, SamplerConfig, ode_sample
from .encoders import pad_instructions
from .exceptions import ShapeMismatchError
from .model import AffordanceDenoiser
from .numerics import Array

if TYPE_CHECKING:
    from .config import RunConfig

_LOGGER = logging.getLogger(__name__)

PREDICT_BATCH = 32


def mae(
    pred: WaypointChunk | ArrayLike,
    truth: WaypointChunk | ArrayLike,
    resolution: tuple[int, int],
) -> tuple[float, float]:
    """``(mae_norm, mae_px)`` between two chunks of equal length."""
    p = pred.to_array() if isinstance(pred, WaypointChunk) else np.asarray(pred, dtype=np.float64)
    t = truth.to_array() if isinstance(truth, WaypointChunk) else np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 2 or p.shape[1] != 2:
        raise ShapeMismatchError(f"cannot compare waypoint chunks {p.shape} and {t.shape}")
    diff = np.abs(p - t)
    scale = np.asarray(resolution, dtype=np.float64)
    return float(diff.mean()), float((diff * scale).mean())


class Predictor(Protocol):
    def predict(self, records: Sequence[AffordanceSample], seeds: Sequence[Any]) -> Array:
        """One ``(T, 2)`` chunk per record, stacked."""
        ...


@attrs.frozen(eq=False)
class ModelPredictor:
    """Few-step ODE sampling with a trained denoiser, in fixed-size batches."""

    model: AffordanceDenoiser
    sampler: SamplerConfig
    schedule: NoiseSchedule
    batch_size: int = PREDICT_BATCH

    def predict(self, records: Sequence[AffordanceSample], seeds: Sequence[Any]) -> Array:
        chunks = []
        for start in range(0, len(records), self.batch_size):
            part = records[start : start + self.batch_size]
            current, previous = frames(part)
            ids, keep = pad_instructions([r.instruction for r in part])
            conditions = self.model.encode_conditions(current, previous, ids, keep)
            chunks.append(
                ode_sample(
                    self.model,
                    conditions,
                    self.sampler,
                    self.schedule,
                    seeds[start : start + self.batch_size],
                )
            )
        return np.concatenate(chunks, axis=0)


@attrs.frozen
class RecordScore:
    index: int
    source: Source
    mae_norm: float
    mae_px: float


@attrs.frozen
class EvalReport:
    records: tuple[RecordScore, ...] = attrs.field(converter=tuple)
    seeds: int = 1
    model_digest: str | None = None
    config_digest: str | None = None
    corpus_digest: str | None = None
    ablation: str | None = None

    @property
    def mae_norm(self) -> float:
        return float(np.mean([r.mae_norm for r in self.records])) if self.records else float("nan")

    @property
    def mae_px(self) -> float:
        return float(np.mean([r.mae_px for r in self.records])) if self.records else float("nan")

    @property
    def by_source(self) -> dict[str, dict[str, float]]:
        groups: dict[str, list[RecordScore]] = {}
        for record in self.records:
            groups.setdefault(record.source.value, []).append(record)
        return {
            source: {
                "count": len(rows),
                "mae_norm": float(np.mean([r.mae_norm for r in rows])),
                "mae_px": float(np.mean([r.mae_px for r in rows])),
            }
            for source, rows in sorted(groups.items())
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "ablation": self.ablation,
            "seeds": self.seeds,
            "model_digest": self.model_digest,
            "config_digest": self.config_digest,
            "corpus_digest": self.corpus_digest,
            "mae_norm": self.mae_norm,
            "mae_px": self.mae_px,
            "by_source": self.by_source,
            "records": [
                {"index": r.index, "source": r.source.value, "mae_norm": r.mae_norm, "mae_px": r.mae_px}
                for r in self.records
            ],
        }

    def write_json(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def digest_model(model: AffordanceDenoiser) -> str:
    h = hashlib.sha256()
    for name, tensor in model.store.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensor.data).tobytes())
    return h.hexdigest()


def digest_config(config: dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def record_seed(seed: int, index: int, repeat: int) -> list[int]:
    return [seed, index, repeat]


def score_records(
    predictor: Predictor,
    records: Sequence[tuple[int, AffordanceSample]],
    seed: int = 0,
    seeds: int = 1,
) -> list[RecordScore]:
    """Score ``(index, record)`` pairs, averaging each record's MAE over ``seeds`` noise draws."""
    if seeds < 1:
        raise ValueError(f"seeds must be >= 1, got {seeds}")
    if not records:
        return []
    samples = [record for _, record in records]
    totals = np.zeros((len(records), 2), dtype=np.float64)
    for repeat in range(seeds):
        noise_seeds = [record_seed(seed, index, repeat) for index, _ in records]
        predictions = predictor.predict(samples, noise_seeds)
        for row, (pred, record) in enumerate(zip(predictions, samples, strict=True)):
            totals[row] += mae(pred, record.waypoints, record.native_resolution)
    totals /= seeds
    return [
        RecordScore(index=index, source=record.source, mae_norm=float(norm), mae_px=float(px))
        for (index, record), (norm, px) in zip(records, totals, strict=True)
    ]


def heldout_records(
    manifest: DatasetManifest, sources: Sequence[Source | str] | None = None
) -> list[tuple[int, AffordanceSample]]:
    """The test split (or every record when unsplit), optionally restricted to some sources."""
    wanted = {Source(s) for s in sources} if sources else None
    only_test = manifest.has_split
    return [
        (index, record)
        for index, record in enumerate(manifest.records)
        if (not only_test or record.split is Split.TEST)
        and (wanted is None or record.source in wanted)
    ]


async def evaluate(
    predictor: Predictor,
    manifest: DatasetManifest,
    *,
    seed: int = 0,
    seeds: int = 1,
    workers: int = 1,
    sources: Sequence[Source | str] | None = None,
    ablation: str | None = None,
    model_digest: str | None = None,
    config_digest: str | None = None,
) -> EvalReport:
    """
    Score every held-out record; index ranges run on up to ``workers`` threads.

    Each record's sampling noise depends only on ``(seed, record index, repeat)``, so reports are
    identical for any worker count.
    """
    records = heldout_records(manifest, sources)
    ranges = [part for part in np.array_split(np.arange(len(records)), max(1, workers)) if part.size]
    parts: list[list[RecordScore]] = [[] for _ in ranges]
    limiter = anyio.CapacityLimiter(max(1, workers))

    async def run(slot: int, rows: list[int]) -> None:
        subset = [records[i] for i in rows]
        parts[slot] = await anyio.to_thread.run_sync(score_records, predictor, subset, seed, seeds, limiter=limiter)

    async with anyio.create_task_group() as tg:
        for slot, rows in enumerate(ranges):
            tg.start_soon(run, slot, rows.tolist())

    report = EvalReport(
        records=[score for part in parts for score in part],
        seeds=seeds,
        model_digest=model_digest,
        config_digest=config_digest,
        corpus_digest=manifest.digest(),
        ablation=ablation,
    )
    _LOGGER.info("Evaluated %d records: mae_norm=%.4f mae_px=%.2f", len(report.records), report.mae_norm, report.mae_px)
    return report


@attrs.frozen
class AblationRow:
    tag: str
    mae_norm: float
    mae_px: float
    visual_tokens: int


ABLATION_ARMS: dict[str, dict[str, bool]] = {
    "full": {},
    "w/o POA": {"disable_poa": True},
    "w/o SIAL": {"disable_sial": True},
}


def write_ablation_csv(rows: Sequence[AblationRow], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["arm", "mae_norm", "mae_px", "visual_tokens"])
        for row in rows:
            writer.writerow([row.tag, repr(row.mae_norm), repr(row.mae_px), row.visual_tokens])


def write_series_csv(series: dict[str, Sequence[tuple[int, float]]], path: Path) -> None:
    """Long-format ``arm,step,mae_norm`` rows for external plotting."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["arm", "step", "mae_norm"])
        for arm, points in series.items():
            for step, value in points:
                writer.writerow([arm, step, repr(value)])


async def _score_model(
    run: RunConfig, model: AffordanceDenoiser, corpus: DatasetManifest, tag: str
) -> EvalReport:
    predictor = ModelPredictor(model, run.sampler, NoiseSchedule.build(run.schedule))
    return await evaluate(
        predictor,
        corpus,
        seed=run.train.seed,
        ablation=tag,
        model_digest=digest_model(model),
        config_digest=digest_config(run.to_dict()),
    )


async def ablation_suite(run: RunConfig, corpus: DatasetManifest, out_dir: Path) -> list[AblationRow]:
    """Train the full model and both ablation arms from scratch under one budget and seed."""
    from . import checkpoint, training

    rows = []
    for tag, flags in ABLATION_ARMS.items():
        arm = attrs.evolve(run, model=attrs.evolve(run.model, **flags))
        arm_dir = out_dir / tag.replace("/", "").replace(" ", "_")
        result = await training.finetune(arm, corpus, arm_dir)
        model = checkpoint.restore_model(checkpoint.load(result.best_checkpoint))
        report = await _score_model(arm, model, corpus, tag)
        report.write_json(arm_dir / "report.json")
        rows.append(AblationRow(tag, report.mae_norm, report.mae_px, arm.model.visual_tokens))
        _LOGGER.info("Ablation arm %s: mae_norm=%.4f", tag, report.mae_norm)
    write_ablation_csv(rows, out_dir / "ablation.csv")
    return rows


@attrs.frozen
class PretrainingBenefit:
    pretrained_mae: float
    scratch_mae: float
    series: dict[str, tuple[tuple[int, float], ...]]

    @property
    def improved(self) -> bool:
        return self.pretrained_mae <= self.scratch_mae


async def pretraining_benefit(
    run: RunConfig,
    pretrain_corpus: DatasetManifest,
    finetune_corpus: DatasetManifest,
    out_dir: Path,
) -> PretrainingBenefit:
    """Fine-tune once from a pretrained checkpoint and once from scratch, with equal budgets."""
    from . import checkpoint, training

    pretrained = await training.pretrain(run, pretrain_corpus, out_dir / "pretrain")
    init = checkpoint.load(pretrained.best_checkpoint)
    arms = {
        "pretrained": await training.finetune(run, finetune_corpus, out_dir / "finetune_pretrained", init=init),
        "scratch": await training.finetune(run, finetune_corpus, out_dir / "finetune_scratch"),
    }
    scores: dict[str, float] = {}
    series: dict[str, tuple[tuple[int, float], ...]] = {}
    for arm, result in arms.items():
        model = checkpoint.restore_model(checkpoint.load(result.best_checkpoint))
        scores[arm] = (await _score_model(run, model, finetune_corpus, arm)).mae_norm
        series[arm] = tuple((row.step, row.mae_norm) for row in result.history if row.mae_norm is not None)
    write_series_csv(series, out_dir / "mae_series.csv")
    return PretrainingBenefit(scores["pretrained"], scores["scratch"], series)
