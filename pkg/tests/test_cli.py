"""End-to-end tests of the affordctl commands on a tiny corpus and model."""

import json
from pathlib import Path

import numpy as np
import pytest
from typer.testing import CliRunner

from affordancelib.cli import app
from affordancelib.data import load_manifest
from affordancelib.encoders import Vocabulary
from affordancelib.execution import DepthMap

REFERENCE = Path(__file__).resolve().parents[1] / "configs" / "reference.json"

TINY = [
    "--config", str(REFERENCE),
    "--set", "train.steps=2",
    "--set", "train.batch_size=2",
    "--set", "train.eval_interval=2",
    "--set", "schedule.steps=100",
    "--set", "sampler.steps=2",
]  # fmt: skip

runner = CliRunner()


def _ok(args: list[str]) -> str:
    result = runner.invoke(app, args)
    assert result.exit_code == 0, result.output
    return result.output


@pytest.fixture(scope="module")
def corpus(tmp_path_factory: pytest.TempPathFactory) -> Path:
    out = tmp_path_factory.mktemp("corpus")
    _ok(
        ["gen-data", "--out", str(out), "--task", "touch", "--count", "8"]
        + ["--train-ratio", "0.75", "--workers", "2"]
    )
    return out


@pytest.fixture(scope="module")
def pretrained(corpus: Path, tmp_path_factory: pytest.TempPathFactory) -> Path:
    out = tmp_path_factory.mktemp("pretrain")
    _ok(["pretrain", "--data", str(corpus), "--out", str(out), *TINY])
    return out


class TestGenData:
    def test_writes_split_corpus(self, corpus: Path) -> None:
        manifest = load_manifest(corpus)
        assert len(manifest) == 8
        assert len(manifest.train()) == 6
        assert Vocabulary.load(corpus / "vocab.json") == Vocabulary.default()

    def test_invalid_spec_exits(self, tmp_path: Path) -> None:
        result = runner.invoke(app, ["gen-data", "--out", str(tmp_path), "--chunk-size", "0"])
        assert result.exit_code == 1
        assert "chunk_size" in result.output


class TestTraining:
    """Test the two training commands."""

    @pytest.mark.timeout(120)
    def test_pretrain_writes_checkpoints(self, pretrained: Path) -> None:
        assert (pretrained / "best.ckpt").is_file()
        assert (pretrained / "final.ckpt").is_file()
        assert (pretrained / "metrics.jsonl").is_file()

    @pytest.mark.timeout(120)
    def test_finetune_from_pretrained(self, corpus: Path, pretrained: Path, tmp_path: Path) -> None:
        output = _ok(
            ["finetune", "--data", str(corpus), "--out", str(tmp_path)]
            + ["--init", str(pretrained / "best"), *TINY]
        )
        assert "Best checkpoint" in output
        assert (tmp_path / "final.ckpt").is_file()

    def test_unknown_override_exits(self, corpus: Path, tmp_path: Path) -> None:
        result = runner.invoke(
            app, ["pretrain", "--data", str(corpus), "--out", str(tmp_path), "--set", "optim.lr=1"]
        )
        assert result.exit_code == 1
        assert "unknown section" in result.output

    def test_missing_corpus_exits(self, tmp_path: Path) -> None:
        result = runner.invoke(
            app, ["pretrain", "--data", str(tmp_path / "absent"), "--out", str(tmp_path), *TINY]
        )
        assert result.exit_code == 1


class TestInference:
    """Test predict and eval against a trained checkpoint."""

    @pytest.mark.timeout(120)
    def test_predict(self, corpus: Path, pretrained: Path, tmp_path: Path) -> None:
        record = json.loads((corpus / "manifest.json").read_text())["records"][0]
        instruction = " ".join(Vocabulary.default().decode(record["instruction"]))
        out = tmp_path / "wp.json"
        overlay = tmp_path / "overlay.ppm"
        _ok(
            ["predict", "--checkpoint", str(pretrained / "best")]
            + ["--image", str(corpus / record["image_current"])]
            + ["--instruction", instruction, "--out", str(out), "--overlay", str(overlay)]
        )
        payload = json.loads(out.read_text())
        points = np.asarray(payload["waypoints"])
        assert points.shape == (5, 2)
        assert points.min() >= 0.0 and points.max() <= 1.0
        assert payload["resolution"] == [64, 64]
        assert overlay.is_file()

    def test_predict_unknown_word_exits(self, corpus: Path, pretrained: Path, tmp_path: Path) -> None:
        result = runner.invoke(
            app,
            ["predict", "--checkpoint", str(pretrained / "best")]
            + ["--image", str(corpus / "images" / "000000_current.ppm")]
            + ["--instruction", "touch the purple circle", "--out", str(tmp_path / "wp.json")],
        )
        assert result.exit_code == 1
        assert "purple" in result.output

    @pytest.mark.timeout(120)
    def test_eval(self, corpus: Path, pretrained: Path, tmp_path: Path) -> None:
        out = tmp_path / "report.json"
        _ok(["eval", "--checkpoint", str(pretrained / "best"), "--data", str(corpus), "--out", str(out)])
        payload = json.loads(out.read_text())
        assert len(payload["records"]) == 2
        assert payload["corpus_digest"] == load_manifest(corpus).digest()


class TestExecute:
    def test_plan(self, tmp_path: Path) -> None:
        DepthMap(np.ones((48, 64))).save(tmp_path / "depth.pgm")
        (tmp_path / "k.json").write_text(json.dumps({"fx": 50, "fy": 50, "cx": 32, "cy": 24}))
        (tmp_path / "g.json").write_text(
            json.dumps([{"position": [0, 0, 1], "quaternion": [0, 1, 0, 0]}])
        )
        (tmp_path / "wp.json").write_text(
            json.dumps({"waypoints": [[0.5, 0.5], [0.75, 0.5]], "resolution": [64, 48]})
        )
        out = tmp_path / "plan.json"
        output = _ok(
            ["execute", "--waypoints", str(tmp_path / "wp.json")]
            + ["--depth", str(tmp_path / "depth.pgm"), "--intrinsics", str(tmp_path / "k.json")]
            + ["--grasps", str(tmp_path / "g.json"), "--out", str(out), "--max-step", "0.1"]
        )
        assert "5 poses" in output
        plan = json.loads(out.read_text())
        np.testing.assert_allclose(plan["poses"][-1]["position"], [0.32, 0.0, 1.1])

    @pytest.mark.parametrize(("flags", "count"), [([], 5), (["--from-grasp"], 7)])
    def test_plan_start(self, tmp_path: Path, flags: list[str], count: int) -> None:
        """Plans start at the contact point unless asked to approach it from the grasp."""
        DepthMap(np.ones((48, 64))).save(tmp_path / "depth.pgm")
        (tmp_path / "k.json").write_text(json.dumps({"fx": 50, "fy": 50, "cx": 32, "cy": 24}))
        (tmp_path / "g.json").write_text(json.dumps([{"position": [0, 0, 0.8], "quaternion": [1, 0, 0, 0]}]))
        (tmp_path / "wp.json").write_text(
            json.dumps({"waypoints": [[0.5, 0.5], [0.75, 0.5]], "resolution": [64, 48]})
        )
        out = tmp_path / "plan.json"
        output = _ok(
            ["execute", "--waypoints", str(tmp_path / "wp.json")]
            + ["--depth", str(tmp_path / "depth.pgm"), "--intrinsics", str(tmp_path / "k.json")]
            + ["--grasps", str(tmp_path / "g.json"), "--out", str(out), "--max-step", "0.1", *flags]
        )
        assert f"{count} poses" in output
        first = json.loads(out.read_text())["poses"][0]["position"]
        np.testing.assert_allclose(first, [0, 0, 0.8] if flags else [0, 0, 1])

    def test_no_grasps_exits(self, tmp_path: Path) -> None:
        DepthMap(np.ones((48, 64))).save(tmp_path / "depth.pgm")
        (tmp_path / "k.json").write_text(json.dumps({"fx": 50, "fy": 50, "cx": 32, "cy": 24}))
        (tmp_path / "g.json").write_text("[]")
        (tmp_path / "wp.json").write_text(json.dumps({"waypoints": [[0.5, 0.5]], "resolution": [64, 48]}))
        result = runner.invoke(
            app,
            ["execute", "--waypoints", str(tmp_path / "wp.json")]
            + ["--depth", str(tmp_path / "depth.pgm"), "--intrinsics", str(tmp_path / "k.json")]
            + ["--grasps", str(tmp_path / "g.json"), "--out", str(tmp_path / "plan.json")],
        )
        assert result.exit_code == 1
        assert not (tmp_path / "plan.json").exists()


class TestGradcheck:
    def test_primitives_pass(self) -> None:
        output = _ok(["gradcheck", "--no-model"])
        assert "FAIL" not in output
