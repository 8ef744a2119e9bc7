"""
mrfei CLI - Command-line interface.

Commands:
- mrfei simulate-dict   : Simulate an EPG dictionary
- mrfei fit-basis       : Fit the temporal SVD basis of a dictionary
- mrfei make-dataset    : Generate a synthetic phantom dataset
- mrfei train           : Train a reconstruction network (nlei, ei, supervised)
- mrfei evaluate        : Score a trained network on a dataset's test split
- mrfei run-experiment  : Compare SVD-MRF, EI, NLEI and supervised training
- mrfei alpha-sweep     : Train one model per alpha and pick the best
- mrfei gradcheck       : Check autodiff against finite differences
- mrfei config          : Show or write configuration

Exit codes: 0 success, 1 unexpected error, 2 configuration error,
3 numerical failure, 130 interrupted.
"""

from __future__ import annotations

import sys
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import click
from rich.console import Console

from mrfei import __version__
from mrfei.acquisition import PATTERNS
from mrfei.config import PRESETS, ConfigError, ExperimentConfig, load_config, write_config
from mrfei.diagnostics import GRADCHECK_TOLERANCE, gradcheck_suite
from mrfei.experiment import ExperimentError, ExperimentResult, ExperimentRunner, write_method_images, write_results_csv
from mrfei.nn import ReconNetwork
from mrfei.phantom import MrfDataset, load_dataset, save_dataset
from mrfei.reporter import Reporter
from mrfei.sequence import Dictionary, GridSpec, build_dictionary, default_flip_schedule
from mrfei.subspace import fit_basis
from mrfei.surrogate import BlochSurrogate
from mrfei.tensor import NumericalError
from mrfei.training import Trainer, TrainMode
from mrfei.utils import ensure_dirs, is_interactive, setup_logging

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_INTERRUPTED = 130

# Global console
console = Console()


@dataclass
class CliState:
    """Options shared by every subcommand."""

    reporter: Reporter
    config_path: Path | None
    preset: str
    overrides: dict[str, Any]
    use_cache: bool

    def config(self, **extra: Any) -> ExperimentConfig:
        return load_config(self.config_path, self.preset, {**self.overrides, **extra})

    def runner(self, cfg: ExperimentConfig, output_dir: Path, dataset: MrfDataset | None = None) -> ExperimentRunner:
        show = console if is_interactive() and not self.reporter.silent else None
        return ExperimentRunner(cfg, output_dir, use_cache=self.use_cache, console=show, dataset=dataset)


def create_reporter(
    json_output: bool = False,
    quiet: bool = False,
    no_color: bool = False,
) -> Reporter:
    """Create reporter with given options."""
    return Reporter(
        console=console,
        json_output=json_output,
        quiet=quiet,
        no_color=no_color,
    )


def exit_code_for(error: BaseException) -> int:
    """Map an exception (or the cause of a stage failure) to an exit code."""
    if isinstance(error, KeyboardInterrupt):
        return EXIT_INTERRUPTED
    cause = error.__cause__ if isinstance(error, ExperimentError) and error.__cause__ else error
    if isinstance(cause, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(cause, (ConfigError, click.BadParameter)):
        return EXIT_CONFIG
    return EXIT_ERROR


@contextmanager
def handle_errors(reporter: Reporter) -> Iterator[None]:
    """Report failures and exit with the matching code."""
    try:
        yield
    except KeyboardInterrupt:
        reporter.output_error("Interrupted by user", "Cancelled")
        sys.exit(EXIT_INTERRUPTED)
    except (ConfigError, click.BadParameter) as e:
        reporter.output_error(e.message, "Configuration error")
        sys.exit(EXIT_CONFIG)
    except NumericalError as e:
        reporter.output_error(e.message, "Numerical failure")
        sys.exit(EXIT_NUMERICAL)
    except ExperimentError as e:
        reporter.output_error(str(e), f"Stage '{e.stage}' failed")
        sys.exit(exit_code_for(e))
    except Exception as e:
        reporter.output_error(str(e) or type(e).__name__)
        sys.exit(EXIT_ERROR)


def _parse_alphas(value: str | None) -> tuple[float, ...] | None:
    if value is None:
        return None
    try:
        alphas = tuple(float(v) for v in value.split(",") if v.strip())
    except ValueError as e:
        raise click.BadParameter(f"Alphas must be comma-separated numbers: {value}") from e
    if not alphas:
        raise click.BadParameter("Alpha list is empty")
    return alphas


@click.group()
@click.version_option(version=__version__, prog_name="mrfei")
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), help="TOML or JSON experiment config")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default="desk", show_default=True, help="Base preset")
@click.option("--seed", type=int, default=None, help="Random seed")
@click.option("--deterministic", is_flag=True, help="Single-threaded, bit-reproducible run")
@click.option("--pattern", type=click.Choice(PATTERNS), default=None, help="Sampling pattern")
@click.option("--size", type=int, default=None, help="Image size (H = W)")
@click.option("--no-cache", is_flag=True, help="Do not read or write cached dictionaries and surrogates")
@click.option("--json", "-j", "json_output", is_flag=True, help="Output in JSON format")
@click.option("--quiet", "-q", is_flag=True, help="Suppress non-essential output")
@click.option("--verbose", "-v", is_flag=True, help="Enable debug logging")
@click.option("--no-color", is_flag=True, help="Disable colored output")
@click.pass_context
def cli(
    ctx: click.Context,
    config_path: Path | None,
    preset: str,
    seed: int | None,
    deterministic: bool,
    pattern: str | None,
    size: int | None,
    no_cache: bool,
    json_output: bool,
    quiet: bool,
    verbose: bool,
    no_color: bool,
) -> None:
    """
    mrfei - nonlinear equivariant imaging for MR fingerprinting.

    Simulates dictionaries, builds synthetic datasets, trains NLEI/EI/supervised
    reconstruction networks and compares them with dictionary matching.
    """
    ensure_dirs()
    setup_logging(verbose=verbose, quiet=quiet or json_output)
    overrides = {
        "seed": seed,
        "pattern": pattern,
        "size": size,
        "deterministic": True if deterministic else None,
    }
    ctx.obj = CliState(create_reporter(json_output, quiet, no_color), config_path, preset, overrides, not no_cache)


pass_state = click.make_pass_decorator(CliState)


@cli.command("simulate-dict")
@click.option("--out", "-o", type=click.Path(path_type=Path), required=True, help="Output bundle stem")
@click.option("--schedule", type=click.Path(exists=True, dir_okay=False, path_type=Path), help="Flip-angle CSV")
@click.option("--n-t1", type=int, default=None, help="T1 grid points")
@click.option("--n-t2", type=int, default=None, help="T2 grid points")
@click.option("--t2-below-t1", is_flag=True, help="Drop pairs with T2 > T1")
@click.option("--n-states", type=int, default=None, help="EPG truncation order")
@pass_state
def simulate_dict(
    state: CliState,
    out: Path,
    schedule: Path | None,
    n_t1: int | None,
    n_t2: int | None,
    t2_below_t1: bool,
    n_states: int | None,
) -> None:
    """Simulate a time-domain EPG dictionary on a log-spaced (T1, T2) grid."""
    with handle_errors(state.reporter):
        cfg = state.config(n_t1=n_t1, n_t2=n_t2, n_states=n_states, t2_below_t1=t2_below_t1 or None)
        seq = default_flip_schedule(schedule or (Path(cfg.schedule_path) if cfg.schedule_path else None))
        grid = GridSpec(n_t1=cfg.n_t1, n_t2=cfg.n_t2, t2_below_t1=cfg.t2_below_t1)
        dictionary = build_dictionary(seq, grid, cfg.n_states)
        path = dictionary.save(out)
        state.reporter.output_summary(
            "Dictionary",
            {"atoms": dictionary.size, "length": dictionary.length, "n_states": cfg.n_states, "file": path},
        )


@cli.command("fit-basis")
@click.argument("dictionary_stem", type=click.Path(path_type=Path))
@click.option("--rank", "-t", type=int, default=10, show_default=True, help="Subspace dimension t")
@click.option("--out", "-o", type=click.Path(path_type=Path), required=True, help="Output bundle stem")
@click.option("--compressed-out", type=click.Path(path_type=Path), help="Also save the compressed dictionary")
@pass_state
def fit_basis_cmd(state: CliState, dictionary_stem: Path, rank: int, out: Path, compressed_out: Path | None) -> None:
    """Fit the top-t temporal singular vectors of a dictionary."""
    with handle_errors(state.reporter):
        dictionary = Dictionary.load(dictionary_stem)
        basis = fit_basis(dictionary, rank)
        if basis.rank_deficient:
            state.reporter.output_warning(f"Dictionary has fewer than {rank} significant singular values")
        path = basis.save(out)
        if compressed_out is not None:
            dictionary.compress(basis).save(compressed_out)
        state.reporter.output_summary(
            "Temporal basis",
            {"T": basis.T, "t": basis.t, "retained_energy": basis.retained_energy(), "rank_deficient": basis.rank_deficient, "file": path},
        )


@cli.command("make-dataset")
@click.option("--out", "-o", type=click.Path(file_okay=False, path_type=Path), required=True, help="Dataset directory")
@click.option("--n-train", type=int, default=None, help="Train slices")
@click.option("--n-test", type=int, default=None, help="Test slices")
@click.option("--with-train-truth", is_flag=True, help="Keep ground truth for train slices (supervised training)")
@pass_state
def make_dataset(state: CliState, out: Path, n_train: int | None, n_test: int | None, with_train_truth: bool) -> None:
    """Generate phantoms, exact TSMIs and undersampled k-space."""
    with handle_errors(state.reporter):
        cfg = state.config(n_train=n_train, n_test=n_test)
        # supervised keeps train ground truth; nlei would fit a surrogate
        methods = ("svd-mrf", "supervised") if with_train_truth else ("svd-mrf",)
        dataset = state.runner(replace(cfg, methods=methods), out).prepare().dataset
        path = save_dataset(dataset, out)
        state.reporter.output_summary(
            "Dataset",
            {
                "train": len(dataset.train),
                "test": len(dataset.test),
                "pattern": dataset.mask.pattern,
                "grid": f"{cfg.size}x{cfg.size}",
                "compression": f"{cfg.compression_ratio:.1f}:1",
                "manifest": path,
            },
        )


def _dataset_config(state: CliState, dataset: MrfDataset, **extra: Any) -> ExperimentConfig:
    """Config whose grid, pattern and basis sizes follow a saved dataset."""
    return state.config(
        pattern=dataset.mask.pattern,
        size=dataset.mask.grid[0],
        m=dataset.mask.m,
        T=dataset.basis.T,
        t=dataset.basis.t,
        **extra,
    )


@cli.command()
@click.argument("dataset_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--mode", type=click.Choice([m.value for m in TrainMode]), default="nlei", show_default=True)
@click.option("--alpha", type=float, default=None, help="EI loss weight (default: per mode and pattern)")
@click.option("--epochs", type=int, default=None, help="Training epochs")
@click.option("--surrogate", "surrogate_stem", type=click.Path(path_type=Path), help="Pretrained surrogate bundle stem")
@click.option("--stop-grad", is_flag=True, help="Detach reconstructions before transforming them")
@click.option("--per-item-transforms", is_flag=True, help="Independent transform draws per batch item")
@click.option("--checkpoint-every", type=int, default=None, help="Checkpoint interval in epochs")
@click.option("--out", "-o", type=click.Path(file_okay=False, path_type=Path), required=True, help="Run directory")
@pass_state
def train(
    state: CliState,
    dataset_dir: Path,
    mode: str,
    alpha: float | None,
    epochs: int | None,
    surrogate_stem: Path | None,
    stop_grad: bool,
    per_item_transforms: bool,
    checkpoint_every: int | None,
    out: Path,
) -> None:
    """
    Train a reconstruction network on a saved dataset.

    NLEI training fits (or loads from the cache) a Bloch surrogate unless
    --surrogate points to one trained for the dataset's basis.
    """
    with handle_errors(state.reporter):
        dataset = load_dataset(dataset_dir)
        train_overrides = {
            "epochs": epochs,
            "stop_grad": stop_grad or None,
            "per_item_transforms": per_item_transforms or None,
            "checkpoint_every": checkpoint_every,
        }
        cfg = _dataset_config(state, dataset, methods=(mode,), train={k: v for k, v in train_overrides.items() if v is not None})
        train_cfg = cfg.train_config(mode, alpha)
        runner = state.runner(replace(cfg, methods=("svd-mrf",)) if surrogate_stem else cfg, out, dataset)

        surrogate = runner.prepare().surrogate
        if surrogate_stem is not None and train_cfg.mode is not TrainMode.NLEI:
            state.reporter.output_warning(f"--surrogate is ignored in {mode} mode")
        if surrogate_stem is not None and train_cfg.mode is TrainMode.NLEI:
            surrogate = BlochSurrogate.load(surrogate_stem, dataset.basis)
        with runner.progress(f"Training {mode}", train_cfg.epochs) as update:
            result = Trainer(train_cfg, dataset, surrogate=surrogate, run_dir=out, progress=update).fit()
        state.reporter.output_training(result)


@cli.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.argument("dataset_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", "-o", type=click.Path(file_okay=False, path_type=Path), help="Write results and images here")
@pass_state
def evaluate(state: CliState, run_dir: Path, dataset_dir: Path, out: Path | None) -> None:
    """Score a trained network on the test split of a dataset."""
    with handle_errors(state.reporter):
        dataset = load_dataset(dataset_dir)
        network, manifest = ReconNetwork.load(run_dir / "model")
        method = manifest.get("train", {}).get("mode", network.mode.value)
        cfg = _dataset_config(state, dataset, methods=("svd-mrf",))
        runner = state.runner(cfg, out or run_dir / "evaluation", dataset)
        output = runner.outputs_from_network(method, network, float(manifest.get("norm", 1.0)))
        report = runner.evaluate(output)
        if out is not None:
            write_method_images(output, [s.index for s in dataset.test], out / "images")
            write_results_csv([report], out / "results.csv")
        state.reporter.output_results(ExperimentResult({method: report}, runner.output_dir))


@cli.command("run-experiment")
@click.option("--out", "-o", type=click.Path(file_okay=False, path_type=Path), required=True, help="Output directory")
@click.option("--methods", help="Comma-separated subset of svd-mrf,ei,nlei,supervised")
@pass_state
def run_experiment_cmd(state: CliState, out: Path, methods: str | None) -> None:
    """Build the dataset, train every method and write the comparison table."""
    with handle_errors(state.reporter):
        extra = {"methods": [m.strip() for m in methods.split(",") if m.strip()]} if methods else {}
        cfg = state.config(**extra)
        result = state.runner(cfg, out).run()
        state.reporter.output_results(result)


@cli.command("alpha-sweep")
@click.option("--out", "-o", type=click.Path(file_okay=False, path_type=Path), required=True, help="Output directory")
@click.option("--alphas", help="Comma-separated alpha values (default: from the config)")
@click.option("--method", type=click.Choice(["nlei", "ei"]), default="nlei", show_default=True)
@pass_state
def alpha_sweep_cmd(state: CliState, out: Path, alphas: str | None, method: str) -> None:
    """Train one model per alpha on a shared dataset and select the best."""
    with handle_errors(state.reporter):
        values = _parse_alphas(alphas)
        cfg = state.config(methods=[method])
        sweep = state.runner(cfg, out).sweep(values if values is not None else cfg.sweep_alphas, method)
        state.reporter.output_sweep(sweep)


@cli.command()
@click.option("--max-checks", type=int, default=8, show_default=True, help="Probed entries per tensor")
@click.option("--tolerance", type=float, default=GRADCHECK_TOLERANCE, show_default=True)
@pass_state
def gradcheck(state: CliState, max_checks: int, tolerance: float) -> None:
    """Compare autodiff gradients with central finite differences."""
    with handle_errors(state.reporter):
        seed = state.overrides.get("seed") or 0
        results = gradcheck_suite(seed=seed, max_checks=max_checks)
        state.reporter.output_gradcheck(results, tolerance)
        failed = [name for name, err in results.items() if err > tolerance]
        if failed:
            state.reporter.output_error(f"Gradient mismatch in: {', '.join(failed)}", "Numerical failure")
            sys.exit(EXIT_NUMERICAL)


@cli.command()
@click.option("--write", "write_path", type=click.Path(dir_okay=False, path_type=Path), help="Write the resolved config as TOML")
@pass_state
def config(state: CliState, write_path: Path | None) -> None:
    """
    Show the resolved configuration (preset, file and flags).

    Use --write to save it as a TOML file to edit and pass back via --config.
    """
    with handle_errors(state.reporter):
        cfg = state.config()
        if write_path is not None:
            write_config(cfg, write_path)
            state.reporter.output_success(f"Configuration written to {write_path}")
            return
        data = cfg.to_dict()
        data["compression_ratio"] = round(cfg.compression_ratio, 2)
        state.reporter.output_config(data)


def main() -> None:
    """Main entry point."""
    cli()


if __name__ == "__main__":
    main()
