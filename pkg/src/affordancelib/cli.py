"""Command-line entry point for the affordance pipeline."""

import json
import logging
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated

import anyio
import attrs
import numpy as np
import typer
from async_typer import AsyncTyper
from rich import print as rprint
from rich.table import Table

from . import checkpoint as ckpt
from .config import RunConfig, load_run_config, with_overrides
from .data import (
    SyntheticTaskSpec,
    TaskKind,
    draw_overlay,
    generate_synthetic_parallel,
    load_manifest,
    read_image,
    save_manifest,
    split,
    write_image,
)
from .encoders import Vocabulary, pad_instructions
from .exceptions import AffordanceError, ConfigError, DatasetError
from .execution import (
    DEFAULT_CLEARANCE,
    DEFAULT_MAX_STEP,
    ConstantHeightSelector,
    DepthMap,
    ExplicitHeightSelector,
    HeightCategory,
    HeightSelector,
    load_extrinsics,
    load_grasps,
    load_intrinsics,
    load_waypoints,
    plan_execution,
)
from .numerics import GradCheckReport, Precision

app = AsyncTyper(help="Affordance diffusion pipeline: data, training, evaluation and execution")

VOCAB_NAME = "vocab.json"


@attrs.frozen
class GlobalOptions:
    verbose: bool


_GLOBAL_OPTIONS: GlobalOptions | None = None


@app.callback()  # type: ignore
def handle_global_options(
    verbose: Annotated[
        bool,
        typer.Option(
            "--verbose",
            "-v",
            help="Enable verbose output.",
        ),
    ] = False,
) -> None:
    global _GLOBAL_OPTIONS
    _GLOBAL_OPTIONS = GlobalOptions(verbose=verbose)
    if verbose:
        logging.basicConfig(level=logging.DEBUG)
    else:
        logging.basicConfig(level=logging.WARN)


@contextmanager
def _failing_on_error() -> Iterator[None]:
    try:
        yield
    except AffordanceError as exc:
        typer.secho(str(exc), fg="red")
        verbose = _GLOBAL_OPTIONS is not None and _GLOBAL_OPTIONS.verbose
        if verbose and exc.__cause__ is not None:
            typer.secho(f"caused by: {exc.__cause__!r}", fg="red")
        raise typer.Exit(code=1) from exc


ConfigOption = Annotated[
    Path | None,
    typer.Option("--config", "-c", help="Run configuration JSON (defaults when omitted)."),
]
SetOption = Annotated[
    list[str] | None,
    typer.Option("--set", help="Override a configuration field, e.g. --set train.steps=100."),
]
SeedOption = Annotated[int | None, typer.Option("--seed", help="Seed for every random draw.")]
WorkersOption = Annotated[int, typer.Option("--workers", "-w", help="Worker threads.")]


def _run_config(config: Path | None, overrides: list[str] | None, seed: int | None) -> RunConfig:
    return load_run_config(config, overrides or (), seed)


@app.async_command("gen-data")  # type: ignore
async def gen_data(
    out: Annotated[Path, typer.Option("--out", "-o", help="Output corpus directory.")],
    task: Annotated[TaskKind, typer.Option("--task", help="Synthetic task family.")] = TaskKind.PUSH_LINE,
    count: Annotated[int, typer.Option("--count", "-n", help="Number of records.")] = 500,
    seed: Annotated[int, typer.Option("--seed", help="Corpus seed.")] = 0,
    width: Annotated[int, typer.Option("--width", help="Canvas width in pixels.")] = 64,
    height: Annotated[int, typer.Option("--height", help="Canvas height in pixels.")] = 64,
    chunk_size: Annotated[int, typer.Option("--chunk-size", help="Waypoints per record.")] = 5,
    ratio: Annotated[float, typer.Option("--train-ratio", help="Fraction tagged as train.")] = 0.8,
    workers: WorkersOption = 4,
) -> None:
    """Generate a synthetic corpus with a seeded train/test split."""
    with _failing_on_error():
        try:
            spec = SyntheticTaskSpec(task=task, canvas=(width, height), chunk_size=chunk_size, seed=seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        manifest = await generate_synthetic_parallel(spec, count, workers=workers)
        manifest = split(manifest, ratio=ratio, seed=seed)
        path = save_manifest(manifest, out)
        Vocabulary.default().save(out / VOCAB_NAME)
    rprint(f"[green]Wrote[/green] {len(manifest)} records to {path}")


def _render_history(title: str, rows: list[tuple[int, float | None, float | None]]) -> None:
    table = Table(title=title)
    table.add_column("Step", justify="right", style="cyan")
    table.add_column("MAE (norm)", justify="right")
    table.add_column("MAE (px)", justify="right")
    for step, norm, px in rows:
        table.add_row(str(step), f"{norm:.4f}" if norm is not None else "-", f"{px:.2f}" if px is not None else "-")
    rprint(table)


@app.async_command()  # type: ignore
async def pretrain(
    data: Annotated[Path, typer.Option("--data", "-d", help="Corpus directory or manifest.")],
    out: Annotated[Path, typer.Option("--out", "-o", help="Checkpoint directory.")],
    config: ConfigOption = None,
    overrides: SetOption = None,
    seed: SeedOption = None,
    resume: Annotated[Path | None, typer.Option("--resume", help="Continue from a checkpoint.")] = None,
) -> None:
    """Contact-point pre-training."""
    from . import training

    with _failing_on_error():
        run = _run_config(config, overrides, seed)
        corpus = load_manifest(data)
        state = ckpt.load(resume) if resume is not None else None
        result = await training.pretrain(run, corpus, out, resume=state)
    evaluated = [(r.step, r.mae_norm, r.mae_px) for r in result.history if r.mae_norm is not None]
    _render_history("Pre-training", evaluated)
    rprint(f"[green]Best checkpoint:[/green] {result.best_checkpoint}")


@app.async_command()  # type: ignore
async def finetune(
    data: Annotated[Path, typer.Option("--data", "-d", help="Corpus directory or manifest.")],
    out: Annotated[Path, typer.Option("--out", "-o", help="Checkpoint directory.")],
    init: Annotated[Path | None, typer.Option("--init", help="Pretrained checkpoint, e.g. ck/best.")] = None,
    config: ConfigOption = None,
    overrides: SetOption = None,
    seed: SeedOption = None,
    resume: Annotated[Path | None, typer.Option("--resume", help="Continue from a checkpoint.")] = None,
) -> None:
    """Full-trajectory fine-tuning, from a pretrained checkpoint or from scratch."""
    from . import training

    with _failing_on_error():
        run = _run_config(config, overrides, seed)
        corpus = load_manifest(data)
        start = ckpt.load(init) if init is not None else None
        state = ckpt.load(resume) if resume is not None else None
        result = await training.finetune(run, corpus, out, init=start, resume=state)
    evaluated = [(r.step, r.mae_norm, r.mae_px) for r in result.history if r.mae_norm is not None]
    _render_history("Fine-tuning", evaluated)
    rprint(f"[green]Best checkpoint:[/green] {result.best_checkpoint}")


def _checkpoint_run(
    checkpoint: ckpt.Checkpoint, overrides: list[str] | None, seed: int | None
) -> RunConfig:
    """The run configuration stored in a checkpoint, with sampler or schedule overrides applied."""
    extra = list(overrides or ())
    if seed is not None:
        extra.append(f"train.seed={seed}")
    return RunConfig.from_dict(with_overrides(checkpoint.config, extra))


@app.async_command()  # type: ignore
async def predict(
    checkpoint: Annotated[Path, typer.Option("--checkpoint", "-k", help="Trained checkpoint.")],
    image: Annotated[Path, typer.Option("--image", "-i", help="Current frame.")],
    instruction: Annotated[str, typer.Option("--instruction", help="Instruction text.")],
    out: Annotated[Path, typer.Option("--out", "-o", help="Waypoints JSON to write.")],
    previous: Annotated[Path | None, typer.Option("--previous", help="Previous frame.")] = None,
    vocab: Annotated[Path | None, typer.Option("--vocab", help="Vocabulary JSON.")] = None,
    overlay: Annotated[Path | None, typer.Option("--overlay", help="Overlay pixmap to write.")] = None,
    overrides: SetOption = None,
    seed: Annotated[int, typer.Option("--seed", help="Sampling seed.")] = 0,
) -> None:
    """Predict the contact point and trajectory for one image and instruction."""
    from PIL import Image

    from .diffusion import NoiseSchedule, ode_sample
    from .evaluation import record_seed

    with _failing_on_error():
        state = ckpt.load(checkpoint)
        run = _checkpoint_run(state, overrides, seed)
        model = ckpt.restore_model(state, run.model)
        words = Vocabulary.load(vocab) if vocab is not None else Vocabulary.default()
        ids, keep = pad_instructions([words.encode(instruction)])

        try:
            pixels = read_image(image)
            before = read_image(previous) if previous is not None else None
        except OSError as exc:
            raise DatasetError(f"cannot read input image: {exc}") from exc
        resolution = (pixels.shape[1], pixels.shape[0])
        size = run.model.image_size

        def fit(frame: np.ndarray) -> np.ndarray:
            if (frame.shape[1], frame.shape[0]) == size:
                return frame
            return np.asarray(Image.fromarray(frame).resize(size, Image.Resampling.BILINEAR))

        conditions = model.encode_conditions(
            fit(pixels)[None], None if before is None else fit(before)[None], ids, keep
        )
        schedule = NoiseSchedule.build(run.schedule)
        waypoints = await anyio.to_thread.run_sync(
            lambda: ode_sample(model, conditions, run.sampler, schedule, [record_seed(seed, 0, 0)])[0]
        )

    out.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "waypoints": waypoints.tolist(),
        "resolution": list(resolution),
        "instruction": instruction,
        "seed": seed,
    }
    out.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    if overlay is not None:
        write_image(overlay, draw_overlay(pixels, waypoints))

    table = Table(title="Predicted waypoints")
    table.add_column("Index", justify="right", style="cyan")
    table.add_column("u", justify="right")
    table.add_column("v", justify="right")
    for index, (u, v) in enumerate(waypoints):
        table.add_row(str(index), f"{u:.4f}", f"{v:.4f}")
    rprint(table)


@app.async_command("eval")  # type: ignore
async def evaluate(
    checkpoint: Annotated[Path, typer.Option("--checkpoint", "-k", help="Trained checkpoint.")],
    data: Annotated[Path, typer.Option("--data", "-d", help="Corpus directory or manifest.")],
    out: Annotated[Path | None, typer.Option("--out", "-o", help="Report JSON to write.")] = None,
    seeds: Annotated[int, typer.Option("--seeds", help="Noise draws per record.")] = 1,
    source: Annotated[
        list[str] | None, typer.Option("--source", help="Only score records from this source.")
    ] = None,
    overrides: SetOption = None,
    seed: Annotated[int, typer.Option("--seed", help="Sampling seed.")] = 0,
    workers: WorkersOption = 1,
) -> None:
    """Held-out MAE of a checkpoint."""
    from .diffusion import NoiseSchedule
    from .evaluation import ModelPredictor, digest_config, digest_model
    from .evaluation import evaluate as run_evaluation

    with _failing_on_error():
        state = ckpt.load(checkpoint)
        run = _checkpoint_run(state, overrides, seed)
        model = ckpt.restore_model(state, run.model)
        corpus = load_manifest(data)
        predictor = ModelPredictor(model, run.sampler, NoiseSchedule.build(run.schedule))
        try:
            report = await run_evaluation(
                predictor,
                corpus,
                seed=seed,
                seeds=seeds,
                workers=workers,
                sources=source,
                model_digest=digest_model(model),
                config_digest=digest_config(run.to_dict()),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    if out is not None:
        report.write_json(out)
    table = Table(title=f"Held-out MAE ({len(report.records)} records)")
    table.add_column("Source", style="cyan")
    table.add_column("Records", justify="right")
    table.add_column("MAE (norm)", justify="right")
    table.add_column("MAE (px)", justify="right")
    for name, stats in report.by_source.items():
        table.add_row(name, str(stats["count"]), f"{stats['mae_norm']:.4f}", f"{stats['mae_px']:.2f}")
    table.add_row("all", str(len(report.records)), f"{report.mae_norm:.4f}", f"{report.mae_px:.2f}")
    rprint(table)


@app.async_command()  # type: ignore
async def ablate(
    data: Annotated[Path, typer.Option("--data", "-d", help="Corpus directory or manifest.")],
    out: Annotated[Path, typer.Option("--out", "-o", help="Output directory.")],
    config: ConfigOption = None,
    overrides: SetOption = None,
    seed: SeedOption = None,
) -> None:
    """Train and score the full model and the w/o POA and w/o SIAL arms."""
    from .evaluation import ablation_suite

    with _failing_on_error():
        run = _run_config(config, overrides, seed)
        corpus = load_manifest(data)
        rows = await ablation_suite(run, corpus, out)

    table = Table(title="Ablation")
    table.add_column("Arm", style="cyan")
    table.add_column("MAE (norm)", justify="right")
    table.add_column("MAE (px)", justify="right")
    table.add_column("Visual tokens", justify="right")
    for row in rows:
        table.add_row(row.tag, f"{row.mae_norm:.4f}", f"{row.mae_px:.2f}", str(row.visual_tokens))
    rprint(table)


@app.async_command()  # type: ignore
async def benefit(
    pretrain_data: Annotated[Path, typer.Option("--pretrain-data", help="Pre-training corpus.")],
    data: Annotated[Path, typer.Option("--data", "-d", help="Fine-tuning corpus.")],
    out: Annotated[Path, typer.Option("--out", "-o", help="Output directory.")],
    config: ConfigOption = None,
    overrides: SetOption = None,
    seed: SeedOption = None,
) -> None:
    """Compare pretrain-then-finetune against fine-tuning from scratch at equal budget."""
    from .evaluation import pretraining_benefit

    with _failing_on_error():
        run = _run_config(config, overrides, seed)
        result = await pretraining_benefit(run, load_manifest(pretrain_data), load_manifest(data), out)

    table = Table(title="Pre-training benefit")
    table.add_column("Arm", style="cyan")
    table.add_column("MAE (norm)", justify="right")
    table.add_row("pretrained", f"{result.pretrained_mae:.4f}")
    table.add_row("scratch", f"{result.scratch_mae:.4f}")
    rprint(table)


@app.async_command()  # type: ignore
async def execute(
    waypoints: Annotated[Path, typer.Option("--waypoints", help="Waypoints JSON from predict.")],
    depth: Annotated[Path, typer.Option("--depth", help="16-bit PGM depth map (JSON sidecar).")],
    intrinsics: Annotated[Path, typer.Option("--intrinsics", help="Intrinsics JSON.")],
    grasps: Annotated[Path, typer.Option("--grasps", help="Grasp candidates JSON.")],
    out: Annotated[Path, typer.Option("--out", "-o", help="Execution plan JSON to write.")],
    extrinsics: Annotated[
        Path | None, typer.Option("--extrinsics", help="Camera-to-world 4x4 JSON.")
    ] = None,
    height: Annotated[
        HeightCategory | None, typer.Option("--height", help="Use one height category for all waypoints.")
    ] = None,
    clearance: Annotated[float, typer.Option("--clearance", help="Above-target lift in metres.")] = DEFAULT_CLEARANCE,
    max_step: Annotated[float, typer.Option("--max-step", help="Largest pose step in metres.")] = DEFAULT_MAX_STEP,
    from_grasp: Annotated[
        bool, typer.Option("--from-grasp", help="Approach the contact point from the grasp position.")
    ] = False,
) -> None:
    """Lift predicted waypoints to an SE(3) plan."""
    with _failing_on_error():
        points, _resolution, heights = load_waypoints(waypoints)
        selector: HeightSelector | None = None
        if height is not None:
            selector = ConstantHeightSelector(height)
        elif heights is not None:
            selector = ExplicitHeightSelector(heights)
        plan = plan_execution(
            points,
            DepthMap.load(depth),
            load_intrinsics(intrinsics),
            load_grasps(grasps),
            selector=selector,
            clearance=clearance,
            max_step=max_step,
            camera_to_world=load_extrinsics(extrinsics) if extrinsics is not None else None,
            start_at_grasp=from_grasp,
        )
        plan.write_json(out)
    rprint(f"[green]Wrote[/green] {len(plan.poses)} poses to {out}")


def _render_checks(title: str, reports: dict[str, GradCheckReport]) -> bool:
    table = Table(title=title)
    table.add_column("Check", style="cyan")
    table.add_column("Max rel. error", justify="right")
    table.add_column("Result")
    for name, report in reports.items():
        verdict = "[green]pass[/green]" if report.passed else "[red]FAIL[/red]"
        table.add_row(name, f"{report.max_error:.2e}", verdict)
    rprint(table)
    return all(report.passed for report in reports.values())


@app.async_command()  # type: ignore
async def gradcheck(
    precision: Annotated[Precision, typer.Option("--precision", help="Floating-point width.")] = Precision.DOUBLE,
    seed: Annotated[int, typer.Option("--seed", help="Seed for points and parameters.")] = 0,
    model: Annotated[bool, typer.Option("--model/--no-model", help="Also check the tiny model.")] = True,
) -> None:
    """Finite-difference gradient checks of the primitives and the tiny model."""
    from .model import model_grad_check, tiny_config
    from .numerics import primitive_checks

    with _failing_on_error():
        ok = _render_checks("Primitives", await anyio.to_thread.run_sync(primitive_checks, precision, seed))
        if model:
            config = tiny_config(precision=precision)
            ok = _render_checks("Tiny model", await anyio.to_thread.run_sync(model_grad_check, config, seed)) and ok
    if not ok:
        typer.secho("Gradient check failed", fg="red")
        raise typer.Exit(code=1)


def main() -> None:
    app()
