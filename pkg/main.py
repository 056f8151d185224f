from dataclasses import dataclass
import logging
import logging.config
from pathlib import Path
from typing import Callable, Optional, TypeVar

import typer
from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler

from exceptions import WorldModelError
from pipeline import commands
from schemas.config import RunConfig, build_config, data_root, load_config
from tensor.core import set_precision

load_dotenv()

LOGGING_CONFIG = Path(__file__).with_name("logging.ini")
T = TypeVar("T")

# Initialize the CLI
app = typer.Typer(
    help="Occupancy world model: scene generation, training, forecasting and evaluation.",
    add_completion=False,
    no_args_is_help=True,
)
console = Console()
err_console = Console(stderr=True)


@dataclass
class GlobalOptions:
    config: Optional[Path]
    seed: Optional[int]
    threads: int
    no_images: bool


def setup_logging(verbose: bool = False) -> None:
    """Load logging.ini and point its rich handlers at stderr."""
    if LOGGING_CONFIG.is_file():
        logging.config.fileConfig(LOGGING_CONFIG, disable_existing_loggers=False)
    root = logging.getLogger()
    for handler in root.handlers:
        if isinstance(handler, RichHandler):
            handler.console = err_console
    if verbose:
        root.setLevel(logging.DEBUG)


def resolve_config(opts: GlobalOptions, checkpoint: Optional[Path] = None) -> RunConfig:
    """``--config``, else the config saved next to the checkpoint, else defaults; then ``--seed``."""
    if opts.config is not None:
        config = load_config(opts.config)
    else:
        config = commands.config_for_checkpoint(checkpoint, None) if checkpoint is not None else build_config()
    if opts.seed is not None:
        data = config.model_dump()
        data["seed"] = opts.seed
        data["model"]["seed"] = opts.seed
        data["scene"]["seed"] = opts.seed
        config = build_config(data)
    return config


def run_command(action: Callable[[], T]) -> T:
    """Run a command; contract violations become one error line and exit status 2."""
    try:
        return action()
    except WorldModelError as exc:
        err_console.print(exc.error_line(), markup=False, highlight=False, soft_wrap=True)
        raise typer.Exit(code=2)


def _default_path(path: Optional[Path], name: str) -> Path:
    return path if path is not None else data_root() / name


@app.callback()
def main(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(None, "--config", help="Flat key=value config file."),
    seed: Optional[int] = typer.Option(None, "--seed", help="Overrides every seed in the config."),
    threads: int = typer.Option(1, "--threads", min=1, help="Worker threads for data generation."),
    f64: bool = typer.Option(False, "--f64", help="Run tensors in 64-bit (gradient-check mode)."),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging."),
    no_images: bool = typer.Option(False, "--no-images", help="Forecast without the image branch."),
):
    setup_logging(verbose)
    if f64:
        set_precision("f64")
    ctx.obj = GlobalOptions(config, seed, threads, no_images)


@app.command()
def gen(ctx: typer.Context, out: Optional[Path] = typer.Option(None, "--out", help="Dataset directory.")):
    """Generate synthetic scenes."""
    opts: GlobalOptions = ctx.obj
    out = _default_path(out, "scenes")
    paths = run_command(lambda: commands.cmd_gen(resolve_config(opts), out, opts.threads))
    console.print(f"generated {len(paths)} scenes in {out}")


@app.command()
def train(
    ctx: typer.Context,
    data: Optional[Path] = typer.Option(None, "--data", help="Dataset directory."),
    out: Optional[Path] = typer.Option(None, "--out", help="Run directory for checkpoint and loss curve."),
):
    """Train the world model."""
    opts: GlobalOptions = ctx.obj
    data, out = _default_path(data, "scenes"), _default_path(out, "run")
    result = run_command(lambda: commands.cmd_train(resolve_config(opts), data, out))
    console.print(f"checkpoint {result.checkpoint}, loss curve {result.loss_curve}")


@app.command()
def forecast(
    ctx: typer.Context,
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    scenes: Optional[Path] = typer.Option(None, "--scenes", help="A scene directory or a dataset root."),
    out: Optional[Path] = typer.Option(None, "--out", help="Predictions directory."),
):
    """Forecast future grids, trajectories and images."""
    opts: GlobalOptions = ctx.obj
    scenes, out = _default_path(scenes, "scenes"), _default_path(out, "predictions")
    use_images = False if opts.no_images else None
    written = run_command(
        lambda: commands.cmd_forecast(resolve_config(opts, checkpoint), checkpoint, scenes, out, use_images)
    )
    console.print(f"wrote {len(written)} forecasts to {out}")


@app.command(name="eval")
def evaluate(
    ctx: typer.Context,
    pred: Optional[Path] = typer.Option(None, "--pred", help="Predictions directory."),
    gt: Optional[Path] = typer.Option(None, "--gt", help="Ground-truth dataset directory."),
    out: Optional[Path] = typer.Option(None, "--out", help="Metric CSV path."),
):
    """Score forecasts against ground truth and the copy-last baseline."""
    opts: GlobalOptions = ctx.obj
    pred, gt = _default_path(pred, "predictions"), _default_path(gt, "scenes")
    out = out if out is not None else pred / commands.METRICS_NAME
    report = run_command(lambda: commands.cmd_eval(resolve_config(opts), pred, gt, out))
    console.print(report.to_frame().to_string(index=False))


@app.command(name="render-depth")
def render_depth(
    ctx: typer.Context,
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    scenes: Optional[Path] = typer.Option(None, "--scenes"),
    out: Optional[Path] = typer.Option(None, "--out"),
):
    """Render depth maps for every forecast frame."""
    opts: GlobalOptions = ctx.obj
    scenes, out = _default_path(scenes, "scenes"), _default_path(out, "depth")
    written = run_command(lambda: commands.cmd_render_depth(resolve_config(opts, checkpoint), checkpoint, scenes, out))
    console.print(f"wrote {len(written)} depth maps to {out}")


@app.command()
def bench(
    ctx: typer.Context,
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint"),
    iterations: int = typer.Option(100, "--iterations", min=1),
):
    """Measure forecasts per second."""
    opts: GlobalOptions = ctx.obj
    use_images = False if opts.no_images else None
    result = run_command(
        lambda: commands.cmd_bench(resolve_config(opts, checkpoint), checkpoint, iterations, use_images=use_images)
    )
    console.print(f"forecasts_per_second={result.forecasts_per_second:.3f}")


@app.command()
def ablate(
    ctx: typer.Context,
    data: Optional[Path] = typer.Option(None, "--data"),
    out: Optional[Path] = typer.Option(None, "--out"),
):
    """Train and compare the forecasting-head variants."""
    opts: GlobalOptions = ctx.obj
    data, out = _default_path(data, "scenes"), _default_path(out, "ablation")
    table = run_command(lambda: commands.cmd_ablate(resolve_config(opts), data, out))
    console.print(table.to_string(index=False))


if __name__ == "__main__":
    app()
