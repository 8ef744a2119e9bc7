"""
Experiment orchestration: the method comparison and the alpha sweep.

Provides:
- ExperimentRunner: builds the shared artifacts (dictionary, basis, operator,
  dataset, surrogate), trains the requested methods, evaluates them on the
  test split and writes the results
- run_experiment / alpha_sweep convenience wrappers
- select_alpha, the metric-vote rule for picking alpha
"""

from __future__ import annotations

import csv
import logging
import time
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from rich.console import Console
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn

from mrfei.acquisition import AcquisitionOperator, make_mask, save_mask
from mrfei.config import ExperimentConfig, write_config
from mrfei.matching import dictionary_match
from mrfei.metrics import HIGHER_IS_BETTER, MAPS, METRICS, PSNR_CAP_DB, MetricReport, evaluate_qmaps, normalized_pd_magnitude
from mrfei.nn import OutputMode, ReconNetwork
from mrfei.phantom import MrfDataset, QMaps, Tsmi, build_dataset
from mrfei.sequence import Dictionary, GridSpec, SequenceSchedule, default_flip_schedule, load_or_build_dictionary
from mrfei.subspace import TemporalBasis, fit_basis
from mrfei.surrogate import BlochSurrogate, held_out_error, train_surrogate
from mrfei.training import ForwardModel, Trainer, TrainMode, TrainResult, equivariance_gap, reconstruct
from mrfei.utils import (
    compute_hash,
    format_duration,
    get_cache_dir,
    hash_arrays,
    safe_filename,
    save_bundle,
    save_json_file,
    short_hash,
    write_pgm,
)

logger = logging.getLogger(__name__)

# Priority order for breaking ties between alphas
ALPHA_TIE_PRIORITY = ("MAPE", "MAE", "PSNR", "SSIM")
IMAGE_RANGES = {"T1": (0.0, 6.0), "T2": (0.0, 4.0), "PD": (0.0, 1.0)}


class ExperimentError(Exception):
    """Exception raised when an experiment stage fails; earlier artifacts stay on disk."""

    def __init__(self, message: str, stage: str, output_dir: Path | None = None):
        self.message = message
        self.stage = stage
        self.output_dir = output_dir
        super().__init__(f"[{stage}] {message}")


@dataclass
class ExperimentArtifacts:
    """Everything the methods share."""

    schedule: SequenceSchedule
    dictionary: Dictionary
    basis: TemporalBasis
    compressed: Dictionary
    op: AcquisitionOperator
    dataset: MrfDataset
    surrogate: BlochSurrogate | None = None


@dataclass
class MethodOutput:
    """Test-split reconstructions of one method."""

    method: str
    qmaps: list[QMaps]
    tsmi: list[Tsmi] | None = None
    train: TrainResult | None = None
    equivariance_gap: float | None = None


@dataclass
class ExperimentResult:
    reports: dict[str, MetricReport]
    output_dir: Path
    duration_s: float = 0.0
    equivariance_gaps: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "output_dir": str(self.output_dir),
            "duration_s": self.duration_s,
            "reports": {name: r.to_dict() for name, r in self.reports.items()},
            "equivariance_gaps": self.equivariance_gaps,
        }


@dataclass
class SweepResult:
    method: str
    alphas: list[float]
    reports: list[MetricReport]
    selected: float
    output_dir: Path
    wins: dict[float, int] = field(default_factory=dict)

    def table(self) -> list[tuple[float, dict[str, float]]]:
        return [(a, {m: r.averaged(m) for m in METRICS}) for a, r in zip(self.alphas, self.reports, strict=True)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "selected_alpha": self.selected,
            "rows": [{"alpha": a, **row} for a, row in self.table()],
            "output_dir": str(self.output_dir),
        }


def select_alpha(table: Sequence[tuple[float, dict[str, float]]]) -> float:
    """
    Pick alpha by metric vote.

    Each metric votes for its best alpha (lowest MAE/MAPE, highest PSNR/SSIM;
    equal values go to the earlier row). The alpha with most votes wins; a tie
    goes to the tied alpha preferred by MAPE, then MAE, then PSNR, then SSIM.

    Args:
        table: (alpha, {metric: averaged value}) rows
    """
    if not table:
        raise ValueError("Cannot select from an empty alpha table")
    best_by_metric = _metric_winners(table)
    wins = _vote_counts(table)
    top = max(wins.values())
    tied = [alpha for alpha, count in wins.items() if count == top]
    if len(tied) == 1:
        return tied[0]
    for metric in ALPHA_TIE_PRIORITY:
        if best_by_metric[metric] in tied:
            return best_by_metric[metric]
    return tied[0]


def _metric_winners(table: Sequence[tuple[float, dict[str, float]]]) -> dict[str, float]:
    winners = {}
    for metric in METRICS:
        values = [row[metric] for _, row in table]
        idx = int(np.argmax(values) if HIGHER_IS_BETTER[metric] else np.argmin(values))
        winners[metric] = table[idx][0]
    return winners


def _vote_counts(table: Sequence[tuple[float, dict[str, float]]]) -> dict[float, int]:
    wins = {alpha: 0 for alpha, _ in table}
    for alpha in _metric_winners(table).values():
        wins[alpha] += 1
    return wins


def write_results_csv(reports: Sequence[MetricReport], path: Path) -> None:
    """One row per method, one column per metric x map."""
    columns = ["method"] + [f"{metric}_{name}" for metric in METRICS for name in MAPS]
    extra = sorted({k for r in reports for k in r.row() if k not in columns})
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns + extra, restval="")
        writer.writeheader()
        for r in reports:
            writer.writerow(r.row())


def format_results_text(reports: Sequence[MetricReport]) -> str:
    """Fixed-width results table with a footer describing metric conventions."""
    header = f"{'method':<12}" + "".join(f"{f'{metric} {name}':>12}" for metric in METRICS for name in MAPS)
    lines = [header, "-" * len(header)]
    for r in reports:
        cells = []
        for metric in METRICS:
            for name in MAPS:
                value = r.get(name, metric)
                cells.append(f"{value:>12.4f}" if metric != "PSNR" else f"{value:>12.2f}")
        lines.append(f"{r.method:<12}" + "".join(cells))
    lines += [
        "",
        "MAE in seconds (T1, T2) and normalised units (PD); MAPE in percent, excluding voxels with zero truth.",
        f"PSNR in dB, capped at {PSNR_CAP_DB:.0f} dB for exact matches; data ranges T1 6 s, T2 4 s, PD 1.",
        "Metrics are computed inside each slice's head mask and averaged over test slices.",
    ]
    return "\n".join(lines) + "\n"


def write_method_images(out: MethodOutput, indices: Sequence[int], root: Path) -> None:
    """16-bit PGM per map plus the raw float64 maps, one set per test slice."""
    for q, index in zip(out.qmaps, indices, strict=True):
        stem = root / out.method / f"slice_{index:04d}"
        images = {"T1": q.t1_s, "T2": q.t2_s, "PD": normalized_pd_magnitude(q.pd, q.head_mask)}
        for name, img in images.items():
            write_pgm(stem.with_name(f"{stem.name}_{name}.pgm"), img, *IMAGE_RANGES[name])
        save_bundle(stem, {"t1_s": q.t1_s, "t2_s": q.t2_s, "pd": q.pd, "head_mask": q.head_mask}, {"kind": "qmaps", "method": out.method})


class ExperimentRunner:
    """
    Runs one configured experiment end to end.

    Features:
    - Cached dictionary build (content-hash key) and shared basis/operator/dataset
    - Surrogate fitted once and frozen, only when NLEI is requested
    - Stage-tagged failures; reports and images are written per method as they finish
    - Optional rich progress display when a console is attached
    """

    def __init__(
        self,
        config: ExperimentConfig,
        output_dir: Path,
        cache_dir: Path | None = None,
        use_cache: bool = True,
        console: Console | None = None,
        dataset: MrfDataset | None = None,
    ):
        """
        Initialize runner.

        Args:
            config: Validated experiment configuration
            output_dir: Where results, runs and images go
            cache_dir: Dictionary and surrogate cache (defaults to the user cache dir)
            use_cache: Reuse and store cached dictionaries and surrogates
            console: Show progress bars on this console
            dataset: Use this dataset (and its mask and basis) instead of building one
        """
        self.config = config
        self.output_dir = Path(output_dir)
        self.cache_dir = cache_dir or get_cache_dir()
        self.use_cache = use_cache
        self.console = console
        self.workers = 1 if config.deterministic else config.workers
        self._dataset = dataset
        self._artifacts: ExperimentArtifacts | None = None

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """Log timing of a stage and tag any failure with its name."""
        start = time.time()
        logger.info("Stage %s ...", name)
        try:
            yield
        except ExperimentError:
            raise
        except Exception as e:
            raise ExperimentError(str(e) or type(e).__name__, name, self.output_dir) from e
        logger.info("Stage %s done in %s", name, format_duration(time.time() - start))

    @contextmanager
    def progress(self, description: str, total: int) -> Iterator[Callable[..., None]]:
        """Yield a ``(done, total, loss=None)`` callback driving a rich progress bar, or a no-op."""
        if self.console is None:
            yield lambda *args: None
            return
        progress = Progress(
            TextColumn("[bold blue]{task.description}"),
            BarColumn(bar_width=40),
            MofNCompleteColumn(),
            "•",
            TextColumn("{task.fields[loss]}"),
            "•",
            TimeElapsedColumn(),
            console=self.console,
            transient=True,
        )
        task_id = progress.add_task(description, total=total, loss="")
        progress.start()

        def update(done: int, _total: int, loss: float | None = None) -> None:
            progress.update(task_id, completed=done, loss=f"loss {loss:.4g}" if loss is not None else "")

        try:
            yield update
        finally:
            progress.stop()

    def prepare(self) -> ExperimentArtifacts:
        """Build (or return) the shared artifacts."""
        if self._artifacts is not None:
            return self._artifacts
        cfg = self.config
        with self.stage("dictionary"):
            base = default_flip_schedule(Path(cfg.schedule_path) if cfg.schedule_path else None)
            if cfg.T > base.T:
                raise ValueError(f"Schedule has {base.T} repetitions, config asks for T={cfg.T}")
            schedule = replace(base, flip_angles_deg=base.flip_angles_deg[: cfg.T])
            grid = GridSpec(n_t1=cfg.n_t1, n_t2=cfg.n_t2, t2_below_t1=cfg.t2_below_t1)
            dictionary = load_or_build_dictionary(schedule, grid, cfg.n_states, self.cache_dir, self.use_cache)
        with self.stage("basis"):
            basis = self._dataset.basis if self._dataset is not None else fit_basis(dictionary, cfg.t)
            compressed = dictionary.compress(basis)
        with self.stage("dataset"):
            if self._dataset is not None:
                dataset = self._dataset
                op = dataset.operator()
            else:
                mask = make_mask(cfg.pattern, cfg.size, cfg.size, cfg.samples_per_frame, cfg.T)
                op = AcquisitionOperator(mask, basis)
                with self.progress("Synthesising slices", cfg.n_train + cfg.n_test) as update:
                    dataset = build_dataset(
                        cfg.n_train,
                        cfg.n_test,
                        op,
                        schedule,
                        seed=cfg.seed,
                        n_states=cfg.n_states,
                        smooth=cfg.smooth,
                        keep_train_ground_truth="supervised" in cfg.methods,
                        workers=self.workers,
                        progress=update,
                    )
        surrogate = None
        if "nlei" in cfg.methods:
            with self.stage("surrogate"):
                surrogate = self.surrogate_for(compressed, schedule, basis)
        self._artifacts = ExperimentArtifacts(schedule, dictionary, basis, compressed, op, dataset, surrogate)
        return self._artifacts

    def surrogate_for(self, compressed: Dictionary, schedule: SequenceSchedule, basis: TemporalBasis) -> BlochSurrogate:
        """
        Fit a frozen surrogate to a compressed dictionary, reusing a cached fit when allowed.

        Fresh fits are scored on held-out (T1, T2) pairs before they are cached.
        """
        cfg = self.config
        key = hash_arrays(
            extra=f"{compressed.digest()}|{cfg.surrogate_epochs}|{cfg.surrogate_hidden}|{cfg.surrogate_lr}|{cfg.seed}"
        )
        stem = self.cache_dir / "surrogates" / f"surrogate-{short_hash(key)}"
        if self.use_cache and stem.with_suffix(".json").exists():
            logger.info("Using cached surrogate %s", stem.name)
            surrogate = BlochSurrogate.load(stem)
            surrogate.freeze()
            return surrogate
        with self.progress("Fitting Bloch surrogate", cfg.surrogate_epochs) as update:
            surrogate = train_surrogate(
                compressed,
                epochs=cfg.surrogate_epochs,
                lr=cfg.surrogate_lr,
                hidden=cfg.surrogate_hidden,
                seed=cfg.seed,
                progress=update,
            )
        held_out_error(surrogate, schedule, basis, seed=cfg.seed, n_states=cfg.n_states, t2_below_t1=cfg.t2_below_t1)
        if self.use_cache:
            surrogate.save(stem)
        return surrogate

    def _match(self, tsmis: list[Tsmi]) -> list[QMaps]:
        art = self.prepare()
        return [
            dictionary_match(x, art.compressed, s.head_mask, basis=art.basis, workers=self.workers).to_qmaps(s.head_mask)
            for x, s in zip(tsmis, art.dataset.test, strict=True)
        ]

    def outputs_from_network(self, method: str, network: ReconNetwork, norm: float, train: TrainResult | None = None) -> MethodOutput:
        """Reconstruct the test split with a trained network; TSMI networks are followed by matching."""
        art = self.prepare()
        outputs = [reconstruct(network, s.kspace, art.op, norm, s.head_mask) for s in art.dataset.test]
        if network.mode is OutputMode.TSMI:
            tsmis = [x for x in outputs if isinstance(x, Tsmi)]
            return MethodOutput(method, self._match(tsmis), tsmis, train)
        return MethodOutput(method, [q for q in outputs if isinstance(q, QMaps)], None, train)

    def run_method(self, method: str, alpha: float | None = None, run_dir: Path | None = None) -> MethodOutput:
        """Train (if needed) and reconstruct the test split with one method."""
        art = self.prepare()
        if method == "svd-mrf":
            tsmis = [Tsmi(art.op.backproject(s.kspace.samples), (art.op.H, art.op.W)) for s in art.dataset.test]
            return MethodOutput(method, self._match(tsmis), tsmis)

        train_cfg = self.config.train_config(method, alpha)
        with self.progress(f"Training {method}", train_cfg.epochs) as update:
            result = Trainer(
                train_cfg,
                art.dataset,
                art.op,
                surrogate=art.surrogate,
                run_dir=run_dir,
                progress=update,
            ).fit()
        output = self.outputs_from_network(method, result.network, result.norm, result)
        if train_cfg.mode in (TrainMode.NLEI, TrainMode.EI):
            model = ForwardModel(art.op, art.surrogate if train_cfg.mode is TrainMode.NLEI else None, result.norm)
            test = art.dataset.test
            output.equivariance_gap = equivariance_gap(
                result.network, model, [s.kspace for s in test], [s.head_mask for s in test]
            )
            logger.info("%s equivariance gap on the test split: %.4g", method, output.equivariance_gap)
        return output

    def evaluate(self, out: MethodOutput, label: str | None = None) -> MetricReport:
        test = self.prepare().dataset.test
        truths = [s.qmaps for s in test if s.qmaps is not None]
        truth_tsmi = [s.tsmi for s in test if s.tsmi is not None]
        return evaluate_qmaps(
            label or out.method,
            out.qmaps,
            truths,
            pred_tsmi=out.tsmi,
            truth_tsmi=truth_tsmi if out.tsmi is not None and len(truth_tsmi) == len(truths) else None,
            config_hash=self.config.digest(),
            workers=self.workers,
        )

    def _write_common(self) -> None:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        write_config(self.config, self.output_dir / "config.toml")

    def _write_manifest(self, extra: dict[str, Any]) -> None:
        art = self.prepare()
        save_json_file(
            self.output_dir / "manifest.json",
            {
                "config_digest": self.config.digest(),
                "dataset": art.dataset.manifest(),
                "operator": art.op.describe(),
                "basis_digest": art.basis.digest(),
                "dictionary_digest": art.dictionary.digest(),
                "schedule_file_sha256": compute_hash(Path(self.config.schedule_path)) if self.config.schedule_path else None,
                "surrogate_digest": art.surrogate.digest() if art.surrogate is not None else None,
                "surrogate": art.surrogate.describe() if art.surrogate is not None else None,
                **extra,
            },
        )

    def run(self) -> ExperimentResult:
        """
        Train and evaluate every configured method.

        Raises:
            ExperimentError: Tagged with the failing stage
        """
        start = time.time()
        self._write_common()
        art = self.prepare()
        with self.stage("write"):
            save_mask(art.op.mask, self.output_dir / "mask")
            self._write_manifest({"methods": list(self.config.methods)})

        reports: dict[str, MetricReport] = {}
        gaps: dict[str, float] = {}
        indices = [s.index for s in art.dataset.test]
        truth = MethodOutput("ground-truth", [s.qmaps for s in art.dataset.test if s.qmaps is not None])
        write_method_images(truth, indices, self.output_dir / "images")
        for method in self.config.methods:
            with self.stage(f"train:{method}"):
                out = self.run_method(method, run_dir=self.output_dir / "runs" / method)
            with self.stage(f"evaluate:{method}"):
                reports[method] = self.evaluate(out)
                if out.equivariance_gap is not None:
                    gaps[method] = out.equivariance_gap
                write_method_images(out, indices, self.output_dir / "images")
                self._write_results(list(reports.values()))

        result = ExperimentResult(reports, self.output_dir, time.time() - start, gaps)
        save_json_file(self.output_dir / "report.json", result.to_dict())
        logger.info("Experiment %s finished in %s", self.config.name, format_duration(result.duration_s))
        return result

    def _write_results(self, reports: list[MetricReport]) -> None:
        write_results_csv(reports, self.output_dir / "results.csv")
        (self.output_dir / "results.txt").write_text(format_results_text(reports), encoding="utf-8")

    def sweep(self, alphas: Sequence[float], method: str = "nlei") -> SweepResult:
        """
        Train one model per alpha on the shared dataset and seed.

        Writes ``alpha_sweep.csv`` with metrics averaged over T1, T2 and PD.
        """
        if not alphas:
            raise ExperimentError("alpha list is empty", "sweep", self.output_dir)
        if method not in ("nlei", "ei"):
            raise ExperimentError(f"Alpha sweeps need an EI method, got '{method}'", "sweep", self.output_dir)
        if method == "nlei" and "nlei" not in self.config.methods:
            self.config = replace(self.config, methods=(*self.config.methods, "nlei"))
        self._write_common()
        reports = []
        for alpha in alphas:
            label = f"{method}@{alpha:g}"
            with self.stage(f"train:{label}"):
                out = self.run_method(method, alpha=alpha, run_dir=self.output_dir / "runs" / safe_filename(f"alpha_{alpha:g}"))
            with self.stage(f"evaluate:{label}"):
                report = self.evaluate(out, label)
                report.extra["alpha"] = alpha
                reports.append(report)

        table = [(a, {m: r.averaged(m) for m in METRICS}) for a, r in zip(alphas, reports, strict=True)]
        selected = select_alpha(table)
        with open(self.output_dir / "alpha_sweep.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["alpha", *METRICS])
            for alpha, row in table:
                writer.writerow([repr(alpha), *(repr(row[m]) for m in METRICS)])
        self._write_manifest({"sweep": {"method": method, "alphas": list(alphas), "selected": selected}})
        logger.info("Selected alpha %g for %s", selected, method)
        return SweepResult(method, list(alphas), reports, selected, self.output_dir, _vote_counts(table))


def run_experiment(config: ExperimentConfig, output_dir: Path, **kwargs: Any) -> ExperimentResult:
    """Run the method comparison; keyword arguments go to :class:`ExperimentRunner`."""
    return ExperimentRunner(config, output_dir, **kwargs).run()


def alpha_sweep(
    config: ExperimentConfig,
    output_dir: Path,
    alphas: Sequence[float] | None = None,
    method: str = "nlei",
    **kwargs: Any,
) -> SweepResult:
    """Alpha sweep; defaults to the config's ``sweep_alphas``."""
    return ExperimentRunner(config, output_dir, **kwargs).sweep(alphas if alphas is not None else config.sweep_alphas, method)
