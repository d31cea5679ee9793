"""Command-line interface for sgdfuse."""

import logging
import sys
import time
from collections.abc import Callable
from pathlib import Path
from typing import Annotated, Any, Optional

import click
import typer
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from sgdfuse import __version__
from sgdfuse.config import MaskKind, RunConfig, load_config
from sgdfuse.core.checkpoint import StageTag, content_hash
from sgdfuse.core.ingest import load_pairs, scan_dataset
from sgdfuse.core.manifest import ManifestWriter, outputs_hash
from sgdfuse.core.masks import MaskProvider, write_masks
from sgdfuse.core.metrics import (
    compare_reports,
    evaluate_all,
    read_report_csv,
    write_report_csv,
)
from sgdfuse.core.stage1 import count_parameters
from sgdfuse.core.trainer import (
    FusionPipeline,
    build_stage1,
    build_stage2,
    checkpoint_path,
    fuse_dataset,
    train_stage1,
    train_stage2,
)
from sgdfuse.errors import ConfigError, MissingFusedError
from sgdfuse.models.manifest import RunManifest
from sgdfuse.models.report import METRIC_NAMES, MetricReport

logger = logging.getLogger(__name__)

app = typer.Typer(
    name="sgdfuse",
    help="SGDFuse - two-stage infrared/visible image fusion",
    no_args_is_help=True,
)
console = Console()
err_console = Console(stderr=True)

ConfigOption = Annotated[
    Optional[Path],
    typer.Option("--config", "-c", help="TOML run configuration"),
]
OverrideOption = Annotated[
    Optional[list[str]],
    typer.Option("--override", "-o", help="dotted.key=value, repeatable"),
]
WorkdirOption = Annotated[
    Optional[Path],
    typer.Option("--workdir", "-w", help="Base directory for relative paths"),
]
VerboseOption = Annotated[
    int,
    typer.Option("--verbose", "-v", count=True, help="-v for INFO, -vv for DEBUG"),
]
Operation = Callable[[RunConfig, RunManifest], list[Path]]


def _configure_logging(verbose: int) -> None:
    level = logging.WARNING if verbose <= 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(
        level=level,
        format="%(message)s",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


def _load(
    config: Path | None,
    overrides: list[str] | None,
    workdir: Path | None,
    verbose: int,
    extra: list[str] | None = None,
) -> RunConfig:
    """Configure logging and load the run config before any work starts."""
    _configure_logging(verbose)
    items = list(overrides or [])
    if workdir is not None:
        items.append(f'paths.workdir="{workdir.as_posix()}"')
    items.extend(extra or [])
    return load_config(config, items)


def _resolve(cfg: RunConfig, path: Path) -> Path:
    return cfg.paths.resolve(path)


def _existing_hashes(paths: list[Path]) -> dict[str, str]:
    return {str(p): content_hash(p) for p in paths if p.is_file()}


def _run(command: str, cfg: RunConfig, operation: Operation, root: Path | None = None) -> RunManifest:
    """Run ``operation`` and record a manifest whether it succeeds or not."""
    manifest = RunManifest(command=command, config_digest=cfg.digest(), seed=cfg.seed)
    writer = ManifestWriter(cfg.paths.resolve(cfg.paths.manifest_dir))
    start = time.perf_counter()
    try:
        outputs = operation(cfg, manifest)
        manifest.outputs = [str(p) for p in outputs]
        if outputs:
            manifest.output_hash = outputs_hash(outputs, root)
    except Exception as e:
        manifest.success = False
        manifest.error_message = str(e)
        raise
    finally:
        manifest.wall_time_s = time.perf_counter() - start
        writer.write(manifest)
    return manifest


@app.command()
def version() -> None:
    """Show the current version."""
    console.print(f"sgdfuse v{__version__}")


@app.command("train-stage1")
def train_stage1_cmd(
    config: ConfigOption = None,
    override: OverrideOption = None,
    workdir: WorkdirOption = None,
    verbose: VerboseOption = 0,
    resume: Annotated[
        Optional[Path],
        typer.Option("--resume", help="Continue from this Stage-I checkpoint"),
    ] = None,
) -> None:
    """Train the Stage-I fusion network."""
    cfg = _load(config, override, workdir, verbose)

    def operation(cfg: RunConfig, manifest: RunManifest) -> list[Path]:
        resume_path = _resolve(cfg, resume) if resume is not None else None
        ckpt = train_stage1(cfg, resume_path)
        written = [checkpoint_path(cfg, StageTag.STAGE1, k) for k in ("last", "best")]
        manifest.checkpoints = _existing_hashes(written + ([resume_path] if resume_path else []))
        manifest.details = {"step": ckpt.step, "best_loss": ckpt.best_loss}
        console.print(f"[green]Stage I trained to step {ckpt.step}[/]")
        return [p for p in written if p.is_file()]

    _run("train-stage1", cfg, operation)


@app.command("train-stage2")
def train_stage2_cmd(
    config: ConfigOption = None,
    override: OverrideOption = None,
    workdir: WorkdirOption = None,
    verbose: VerboseOption = 0,
    stage1: Annotated[
        Optional[Path],
        typer.Option("--stage1", help="Frozen Stage-I checkpoint (default: stage1_last.ckpt)"),
    ] = None,
    resume: Annotated[
        Optional[Path],
        typer.Option("--resume", help="Continue from this Stage-II checkpoint"),
    ] = None,
) -> None:
    """Train the mask-conditioned diffusion refiner."""
    cfg = _load(config, override, workdir, verbose)

    def operation(cfg: RunConfig, manifest: RunManifest) -> list[Path]:
        stage1_path = _resolve(cfg, stage1) if stage1 is not None else None
        resume_path = _resolve(cfg, resume) if resume is not None else None
        ckpt = train_stage2(cfg, stage1_path, resume_path)
        written = [checkpoint_path(cfg, StageTag.STAGE2, k) for k in ("last", "best")]
        read = [stage1_path or checkpoint_path(cfg, StageTag.STAGE1, "last")]
        if resume_path is not None:
            read.append(resume_path)
        manifest.checkpoints = _existing_hashes(written + ([] if cfg.ablation.no_stage1 else read))
        manifest.details = {"step": ckpt.step, "best_loss": ckpt.best_loss}
        console.print(f"[green]Stage II trained to step {ckpt.step}[/]")
        return [p for p in written if p.is_file()]

    _run("train-stage2", cfg, operation)


@app.command()
def fuse(
    config: ConfigOption = None,
    override: OverrideOption = None,
    workdir: WorkdirOption = None,
    verbose: VerboseOption = 0,
    data: Annotated[
        Optional[Path],
        typer.Option("--data", "-d", help="Dataset root (default: data.root)"),
    ] = None,
    out: Annotated[
        Optional[Path],
        typer.Option("--out", help="Output directory (default: paths.output_dir)"),
    ] = None,
    stage1: Annotated[Optional[Path], typer.Option("--stage1", help="Stage-I checkpoint")] = None,
    stage2: Annotated[Optional[Path], typer.Option("--stage2", help="Stage-II checkpoint")] = None,
) -> None:
    """Fuse every pair of a dataset at its original resolution."""
    cfg = _load(config, override, workdir, verbose)
    out_dir = _resolve(cfg, out or cfg.paths.output_dir)

    def operation(cfg: RunConfig, manifest: RunManifest) -> list[Path]:
        pipeline = FusionPipeline.from_checkpoints(
            cfg,
            _resolve(cfg, stage1) if stage1 is not None else None,
            _resolve(cfg, stage2) if stage2 is not None else None,
        )
        manifest.checkpoints = dict(pipeline.checkpoints)
        written = fuse_dataset(pipeline, _resolve(cfg, data or cfg.data.root), out_dir)
        manifest.details = {"images": len(written), "sampler": cfg.diffusion.sampler}
        console.print(f"[green]Fused {len(written)} images into {out_dir}[/]")
        return written

    _run("fuse", cfg, operation, root=out_dir)


def _report_table(report: MetricReport, title: str) -> Table:
    table = Table(title=title)
    table.add_column("id", style="cyan")
    for name in METRIC_NAMES:
        table.add_column(name, justify="right")
    for row in report.per_image:
        table.add_row(row.id, *(f"{v:.4f}" for v in row.values().values()))
    table.add_row("[bold]mean[/]", *(f"[bold]{v:.4f}[/]" for v in report.aggregate.values()))
    return table


@app.command("eval")
def eval_cmd(
    fused: Annotated[Path, typer.Option("--fused", "-f", help="Directory of fused <id>.png files")],
    data: Annotated[Path, typer.Option("--data", "-d", help="Dataset root with ir/ and vis/")],
    config: ConfigOption = None,
    override: OverrideOption = None,
    workdir: WorkdirOption = None,
    verbose: VerboseOption = 0,
    report: Annotated[
        Optional[Path],
        typer.Option("--report", "-r", help="CSV report path (default: <fused>/metrics.csv)"),
    ] = None,
    jobs: Annotated[Optional[int], typer.Option("--jobs", "-j", min=1, help="Parallel images")] = None,
    baseline: Annotated[
        Optional[Path],
        typer.Option("--baseline", help="Earlier report to print metric deltas against"),
    ] = None,
) -> None:
    """Compute the seven fusion metrics for a directory of fused images."""
    cfg = _load(config, override, workdir, verbose)
    fused_dir = _resolve(cfg, fused)
    report_path = _resolve(cfg, report) if report is not None else fused_dir / "metrics.csv"

    def operation(cfg: RunConfig, manifest: RunManifest) -> list[Path]:
        index = scan_dataset(_resolve(cfg, data))
        result = evaluate_all(
            index,
            fused_dir,
            jobs=jobs or cfg.metrics.jobs,
            qabf_consts=cfg.metrics.qabf,
            vif_consts=cfg.metrics.vif,
        )
        write_report_csv(result, report_path)
        console.print(_report_table(result, f"Fusion metrics ({result.count} images)"))
        if result.missing:
            console.print(f"[yellow]Missing fused images: {', '.join(result.missing)}[/]")
        details: dict[str, Any] = {"aggregate": result.aggregate, "missing": result.missing}
        if baseline is not None:
            deltas = compare_reports(read_report_csv(_resolve(cfg, baseline)), result)
            details["deltas"] = deltas
            table = Table(title="Delta vs baseline")
            for name in METRIC_NAMES:
                table.add_column(name, justify="right")
            table.add_row(*(f"{deltas[name]:+.4f}" for name in METRIC_NAMES))
            console.print(table)
        manifest.details = details
        manifest.outputs = [str(report_path)]
        manifest.output_hash = outputs_hash([report_path], report_path.parent)
        if result.missing:
            raise MissingFusedError(result.missing)
        return [report_path]

    _run("eval", cfg, operation, root=report_path.parent)


@app.command()
def masks(
    data: Annotated[Path, typer.Option("--data", "-d", help="Dataset root; masks go to masks_ir/ and masks_vis/")],
    config: ConfigOption = None,
    override: OverrideOption = None,
    workdir: WorkdirOption = None,
    verbose: VerboseOption = 0,
    source: Annotated[
        Optional[MaskKind],
        typer.Option("--source", "-s", help="synthetic, remote or random_patch"),
    ] = None,
    q_ir: Annotated[Optional[float], typer.Option("--q-ir", help="IR saliency quantile")] = None,
    q_vis: Annotated[Optional[float], typer.Option("--q-vis", help="VIS gradient quantile")] = None,
) -> None:
    """Generate a mask pair for every image pair of a dataset."""
    extra = []
    if source is not None:
        extra.append(f'masks.source="{source.value}"')
    if q_ir is not None:
        extra.append(f"masks.q_ir={q_ir!r}")
    if q_vis is not None:
        extra.append(f"masks.q_vis={q_vis!r}")
    cfg = _load(config, override, workdir, verbose, extra)
    if cfg.mask_source is MaskKind.FILE:
        raise ConfigError("masks needs a generating source, not 'file'")
    root = _resolve(cfg, data)

    def operation(cfg: RunConfig, manifest: RunManifest) -> list[Path]:
        index = scan_dataset(root)
        pairs = load_pairs(index, jobs=max(1, cfg.data.num_workers))
        built = MaskProvider.from_config(cfg).masks_for_all(pairs, list(index.entries))
        written: list[Path] = []
        for entry_id in index.ids:
            written.extend(write_masks(built[entry_id], root, entry_id))
        manifest.details = {"pairs": len(pairs), "source": cfg.mask_source.value}
        console.print(f"[green]Wrote masks for {len(pairs)} pairs under {root}[/]")
        return written

    _run("masks", cfg, operation, root=root)


@app.command()
def info(
    config: ConfigOption = None,
    override: OverrideOption = None,
    workdir: WorkdirOption = None,
    verbose: VerboseOption = 0,
) -> None:
    """Show parameter counts and the config digest without touching data."""
    cfg = _load(config, override, workdir, verbose)

    def operation(cfg: RunConfig, manifest: RunManifest) -> list[Path]:
        stage1 = count_parameters(build_stage1(cfg))
        stage2 = build_stage2(cfg)
        table = Table(title="sgdfuse model")
        table.add_column("Component", style="cyan")
        table.add_column("Parameters", justify="right", style="green")
        table.add_row("Stage I", f"{stage1:,}")
        table.add_row("U-Net", f"{count_parameters(stage2.unet):,}")
        table.add_row("HFAH", f"{count_parameters(stage2.hfah):,}")
        console.print(table)
        console.print(f"Config digest: {cfg.digest()}")
        console.print(f"Feature timesteps (T={cfg.diffusion.T}): {stage2.timesteps}")
        runs = ManifestWriter(cfg.paths.resolve(cfg.paths.manifest_dir)).read_all()
        failed = sum(not run.success for run in runs)
        console.print(f"Recorded runs: {len(runs)} ({failed} failed)")
        manifest.details = {
            "stage1_params": stage1,
            "unet_params": count_parameters(stage2.unet),
            "hfah_params": count_parameters(stage2.hfah),
            "recorded_runs": len(runs),
        }
        return []

    _run("info", cfg, operation)


def dispatch(argv: list[str] | None = None) -> int:
    """Run the CLI and map the outcome to an exit code.

    Returns:
        0 on success, 1 on usage or validation errors, 2 on runtime failures.
    """
    try:
        result = app(args=argv, prog_name="sgdfuse", standalone_mode=False)
    except click.exceptions.Exit as e:
        return int(e.exit_code)
    except click.UsageError as e:
        e.show()
        return 1
    except (ConfigError, ValidationError) as e:
        err_console.print(f"[red]Invalid configuration:[/] {e}")
        return 1
    except click.exceptions.Abort:
        err_console.print("[red]Aborted[/]")
        return 2
    except Exception as e:
        logger.debug("Run failed", exc_info=True)
        err_console.print(f"[red]Error ({type(e).__name__}):[/] {e}")
        return 2
    return result if isinstance(result, int) else 0


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
