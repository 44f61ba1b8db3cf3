"""Tests for batching, the optimizer and the two training stages."""

import math
from pathlib import Path

import attrs
import numpy as np
import pytest

from affordancelib import checkpoint as ckpt
from affordancelib import training
from affordancelib.config import RunConfig
from affordancelib.data import DatasetManifest, WaypointChunk
from affordancelib.diffusion import NoiseSchedule
from affordancelib.exceptions import NonFiniteLossError, TrainingError, TrainingHaltedError
from affordancelib.model import AffordanceDenoiser
from affordancelib.numerics import Tensor
from affordancelib.training import (
    AdamW,
    Stage,
    Supervision,
    TrainConfig,
    assemble_batch,
    collate,
    read_metrics,
)


def _params(path: Path) -> dict[str, np.ndarray]:
    return ckpt.load(path).parameters


class TestTrainConfig:
    """Test stage defaults and validation."""

    def test_supervision_follows_stage(self) -> None:
        assert TrainConfig().supervision is Supervision.FIRST_POINT
        assert TrainConfig(stage="finetune").supervision is Supervision.RECORD_MASK

    def test_validation(self) -> None:
        with pytest.raises(ValueError, match="learning_rate"):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError, match="batch_size"):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError, match="grad_clip"):
            TrainConfig(grad_clip=-1.0)


class TestBatches:
    """Test batch assembly."""

    def test_first_point_supervision(self, tiny_corpus: DatasetManifest) -> None:
        """Pre-training repeats the contact point and drops the previous frame."""
        records = tiny_corpus.records[:2]
        batch = collate(records, Supervision.FIRST_POINT, np.zeros(2, dtype=np.int64), np.zeros((2, 5, 2)))
        assert batch.images_previous is None
        for row, record in enumerate(records):
            np.testing.assert_array_equal(batch.targets[row], np.tile(record.waypoints.to_array()[0], (5, 1)))
        assert batch.supervise[:, 0].all()
        assert not batch.supervise[:, 1:].any()

    def test_record_mask_supervision(self, tiny_corpus: DatasetManifest) -> None:
        records = tiny_corpus.records[:3]
        batch = collate(records, Supervision.RECORD_MASK, np.zeros(3, dtype=np.int64), np.zeros((3, 5, 2)))
        assert batch.images_previous is not None
        np.testing.assert_array_equal(batch.targets[2], records[2].waypoints.to_array())
        assert batch.supervise.all()
        assert batch.size == 3

    def test_first_point_ignores_later_waypoints(self, tiny_run: RunConfig, tiny_corpus: DatasetManifest) -> None:
        """Under first-point supervision, moving waypoints 1..T-1 leaves the loss unchanged."""
        records = list(tiny_corpus.records[:2])
        tail = np.full((4, 2), 0.9)
        moved = [
            attrs.evolve(
                r, waypoints=WaypointChunk.from_array(np.vstack([r.waypoints.to_array()[:1], tail]))
            )
            for r in records
        ]
        k = np.array([10, 60], dtype=np.int64)
        noise = np.random.default_rng(0).standard_normal((2, 5, 2))
        model = AffordanceDenoiser(tiny_run.model, seed=0)
        schedule = NoiseSchedule.build(tiny_run.schedule)
        before = training.batch_loss(model, collate(records, Supervision.FIRST_POINT, k, noise), schedule)
        after = training.batch_loss(model, collate(moved, Supervision.FIRST_POINT, k, noise), schedule)
        assert float(after.data) == float(before.data)

    def test_empty_batch(self) -> None:
        with pytest.raises(TrainingError, match="empty batch"):
            collate([], Supervision.RECORD_MASK, np.zeros(0, dtype=np.int64), np.zeros((0, 5, 2)))

    def test_batches_depend_only_on_seed_and_step(self, tiny_corpus: DatasetManifest) -> None:
        cfg = TrainConfig(batch_size=4, seed=3)
        a = assemble_batch(tiny_corpus.records, 7, cfg, 100)
        b = assemble_batch(tiny_corpus.records, 7, cfg, 100)
        c = assemble_batch(tiny_corpus.records, 8, cfg, 100)
        np.testing.assert_array_equal(a.k, b.k)
        np.testing.assert_array_equal(a.noise, b.noise)
        np.testing.assert_array_equal(a.targets, b.targets)
        assert not np.array_equal(a.noise, c.noise)
        assert a.k.max() < 100


class TestAdamW:
    """Test the optimizer update."""

    def test_decay_only_on_matrices(self) -> None:
        """With a zero gradient only matrices shrink, by lr * weight_decay."""
        matrix = Tensor(np.ones((2, 2)), requires_grad=True)
        vector = Tensor(np.ones(2), requires_grad=True)
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.5)
        optimizer = AdamW([("m", matrix), ("v", vector)], cfg)
        optimizer.step({"m": np.zeros((2, 2)), "v": np.zeros(2)})
        np.testing.assert_allclose(matrix.data, 0.95)
        np.testing.assert_allclose(vector.data, 1.0)
        assert optimizer.updates == 1

    def test_first_update_is_sign_step(self) -> None:
        """Bias correction makes the first update lr times the gradient sign."""
        param = Tensor(np.zeros(3), requires_grad=True)
        optimizer = AdamW([("p", param)], TrainConfig(learning_rate=0.01))
        optimizer.step({"p": np.array([2.0, -0.5, 1e-3])})
        np.testing.assert_allclose(param.data, [-0.01, 0.01, -0.01], rtol=1e-4)

    def test_load_requires_every_moment(self) -> None:
        optimizer = AdamW([("p", Tensor(np.zeros(3)))], TrainConfig())
        with pytest.raises(TrainingError, match="moments for 'p'"):
            optimizer.load({}, {}, 0)

    def test_clip(self) -> None:
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert training._clip(grads, 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose([grads["a"][0], grads["b"][0]], [0.6, 0.8])


class TestRunStage:
    """Test whole training stages on a tiny corpus."""

    async def test_pretrain_outputs(
        self, tiny_run: RunConfig, tiny_corpus: DatasetManifest, tmp_path: Path
    ) -> None:
        result = await training.pretrain(tiny_run, tiny_corpus, tmp_path)
        assert result.best_checkpoint.is_file()
        assert result.final_checkpoint.is_file()
        rows = read_metrics(result.metrics_path)
        assert [row.step for row in rows] == [1, 2, 3, 4]
        assert [row.mae_norm is not None for row in rows] == [False, True, False, True]
        assert rows == list(result.history)
        assert result.best_mae == min(row.mae_norm for row in rows if row.mae_norm is not None)

        final = ckpt.load(result.final_checkpoint)
        assert final.state == ckpt.TrainingState(step=4, updates=4, stage="pretrain", best_mae=result.best_mae)
        assert RunConfig.from_dict(final.config).train.stage is Stage.PRETRAIN

    async def test_needs_split(self, tiny_run: RunConfig, tiny_corpus: DatasetManifest, tmp_path: Path) -> None:
        unsplit = DatasetManifest(tiny_corpus.resolution, [attrs.evolve(r, split="unassigned") for r in tiny_corpus])
        with pytest.raises(TrainingError, match="split"):
            await training.pretrain(tiny_run, unsplit, tmp_path)

    async def test_resume_is_bit_exact(
        self, tiny_run: RunConfig, tiny_corpus: DatasetManifest, tmp_path: Path
    ) -> None:
        """Stopping after three steps and resuming to six matches an uninterrupted six-step run."""
        six = attrs.evolve(tiny_run, train=attrs.evolve(tiny_run.train, steps=6))
        three = attrs.evolve(tiny_run, train=attrs.evolve(tiny_run.train, steps=3))
        straight = await training.pretrain(six, tiny_corpus, tmp_path / "straight")
        partial = await training.pretrain(three, tiny_corpus, tmp_path / "partial")
        resumed = await training.pretrain(
            six, tiny_corpus, tmp_path / "resumed", resume=ckpt.load(partial.final_checkpoint)
        )
        expected = _params(straight.final_checkpoint)
        actual = _params(resumed.final_checkpoint)
        assert expected.keys() == actual.keys()
        for name, value in expected.items():
            assert actual[name].tobytes() == value.tobytes(), name
        assert [row.step for row in resumed.history] == [4, 5, 6]

    async def test_resume_wrong_stage(
        self, tiny_run: RunConfig, tiny_corpus: DatasetManifest, tmp_path: Path
    ) -> None:
        result = await training.pretrain(tiny_run, tiny_corpus, tmp_path / "pre")
        with pytest.raises(TrainingError, match="cannot resume a pretrain checkpoint"):
            await training.finetune(
                tiny_run, tiny_corpus, tmp_path / "fine", resume=ckpt.load(result.final_checkpoint)
            )

    async def test_halts_after_consecutive_non_finite_steps(
        self,
        tiny_run: RunConfig,
        tiny_corpus: DatasetManifest,
        tmp_path: Path,
        monkeypatch: pytest.MonkeyPatch,
    ) -> None:
        def explode(*_args: object) -> float:
            raise NonFiniteLossError("loss is nan")

        monkeypatch.setattr(training, "train_step", explode)
        with pytest.raises(TrainingHaltedError, match="3 consecutive non-finite steps ending at step 3"):
            await training.pretrain(tiny_run, tiny_corpus, tmp_path)
        assert not (tmp_path / training.FINAL_NAME).exists()

    async def test_single_abort_skips_one_step(
        self,
        tiny_run: RunConfig,
        tiny_corpus: DatasetManifest,
        tmp_path: Path,
        monkeypatch: pytest.MonkeyPatch,
    ) -> None:
        """An aborted step still consumes its index; the next step trains normally."""
        real = training.train_step
        calls = []

        def flaky(*args: object) -> float:
            calls.append(len(calls))
            if len(calls) == 2:
                raise NonFiniteLossError("loss is inf")
            return real(*args)  # type: ignore[arg-type]

        monkeypatch.setattr(training, "train_step", flaky)
        result = await training.pretrain(tiny_run, tiny_corpus, tmp_path)
        state = ckpt.load(result.final_checkpoint).state
        assert state.step == 4
        assert state.updates == 3
        assert [row.step for row in result.history] == [1, 3, 4]
        assert result.history[-1].mae_norm is not None
        assert result.best_mae is not None

    async def test_abort_on_last_step_still_evaluates(
        self,
        tiny_run: RunConfig,
        tiny_corpus: DatasetManifest,
        tmp_path: Path,
        monkeypatch: pytest.MonkeyPatch,
    ) -> None:
        """An abort on the final index ends the stage on budget and still runs the last evaluation."""
        real = training.train_step
        calls = []

        def flaky(*args: object) -> float:
            calls.append(len(calls))
            if len(calls) == tiny_run.train.steps:
                raise NonFiniteLossError("loss is nan")
            return real(*args)  # type: ignore[arg-type]

        monkeypatch.setattr(training, "train_step", flaky)
        result = await training.pretrain(tiny_run, tiny_corpus, tmp_path)
        assert len(calls) == tiny_run.train.steps
        state = ckpt.load(result.final_checkpoint).state
        assert state.step == tiny_run.train.steps
        assert state.updates == tiny_run.train.steps - 1
        last = result.history[-1]
        assert last.step == tiny_run.train.steps
        assert math.isnan(last.loss)
        assert last.mae_norm is not None
        assert result.best_mae == min(r.mae_norm for r in result.history if r.mae_norm is not None)
        assert read_metrics(result.metrics_path)[-1].step == tiny_run.train.steps

    async def test_finetune_from_pretrained(
        self, tiny_run: RunConfig, tiny_corpus: DatasetManifest, tmp_path: Path
    ) -> None:
        pre = await training.pretrain(tiny_run, tiny_corpus, tmp_path / "pre")
        init = ckpt.load(pre.best_checkpoint)
        fine = await training.finetune(tiny_run, tiny_corpus, tmp_path / "fine", init=init)
        state = ckpt.load(fine.final_checkpoint).state
        assert state.stage == "finetune"
        assert state.step == 4

    async def test_frozen_encoders_keep_initial_weights(
        self, tiny_run: RunConfig, tiny_corpus: DatasetManifest, tmp_path: Path
    ) -> None:
        pre = await training.pretrain(tiny_run, tiny_corpus, tmp_path / "pre")
        init = ckpt.load(pre.final_checkpoint)
        frozen = attrs.evolve(tiny_run, model=attrs.evolve(tiny_run.model, freeze_encoders=True))
        fine = await training.finetune(frozen, tiny_corpus, tmp_path / "fine", init=init)
        after = ckpt.load(fine.final_checkpoint).parameters
        for name, value in init.parameters.items():
            if name.startswith(("image_encoder.", "text_encoder.")):
                np.testing.assert_array_equal(after[name], value)
        assert not np.array_equal(after["head.outer.weight"], init.parameters["head.outer.weight"])
