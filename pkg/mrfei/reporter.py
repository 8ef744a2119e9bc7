"""
Output formatter for the mrfei CLI.

Provides:
- JSON output for machine readability
- Rich tables for results, sweeps and diagnostics
- Quiet mode support
"""

from __future__ import annotations

import json
from typing import Any

from rich.console import Console
from rich.table import Table

from mrfei.experiment import ExperimentResult, SweepResult
from mrfei.metrics import MAPS, METRICS, MetricReport
from mrfei.training import TrainResult


class Reporter:
    """
    Output formatter for mrfei.

    Features:
    - JSON output for scripting
    - Rich text output for terminal
    - Quiet mode support
    """

    def __init__(
        self,
        console: Console | None = None,
        json_output: bool = False,
        quiet: bool = False,
        no_color: bool = False,
    ):
        """
        Initialize reporter.

        Args:
            console: Rich console for output
            json_output: Output in JSON format
            quiet: Suppress non-essential output
            no_color: Disable colored output
        """
        self.json_output = json_output
        self.quiet = quiet

        if console is None:
            self.console = Console(color_system=None if no_color else "auto")
        else:
            self.console = console

    def _output_json(self, data: dict) -> None:
        self.console.print_json(json.dumps(data, default=str))

    @property
    def silent(self) -> bool:
        return self.json_output or self.quiet

    def output_results(self, result: ExperimentResult) -> None:
        """Comparison table: methods as rows, metric x map as columns."""
        if self.json_output:
            self._output_json({"experiment": result.to_dict()})
            return
        if self.quiet:
            return

        self.console.print(self.results_table(list(result.reports.values())))
        self.console.print("[dim]MAPE in %, PSNR in dB; averaged over test slices inside head masks.[/]")
        for method, gap in result.equivariance_gaps.items():
            self.console.print(f"[dim]{method} equivariance gap: {gap:.4g}[/]")
        self.console.print(f"\n[green]✓[/] Results written to {result.output_dir}")

    @staticmethod
    def results_table(reports: list[MetricReport], title: str = "Reconstruction quality") -> Table:
        table = Table(title=title, header_style="bold")
        table.add_column("Method", style="cyan")
        for metric in METRICS:
            for name in MAPS:
                table.add_column(f"{metric} {name}", justify="right")
        for r in reports:
            cells = []
            for metric in METRICS:
                for name in MAPS:
                    value = r.get(name, metric)
                    cells.append(f"{value:.2f}" if metric == "PSNR" else f"{value:.4f}")
            table.add_row(r.method, *cells)
        return table

    def output_sweep(self, sweep: SweepResult) -> None:
        if self.json_output:
            self._output_json({"alpha_sweep": sweep.to_dict()})
            return
        if self.quiet:
            return

        table = Table(title=f"Alpha sweep ({sweep.method}, metrics averaged over T1/T2/PD)", header_style="bold")
        table.add_column("alpha", justify="right", style="cyan")
        for metric in METRICS:
            table.add_column(metric, justify="right")
        table.add_column("votes", justify="right")
        for alpha, row in sweep.table():
            style = "bold green" if alpha == sweep.selected else None
            table.add_row(
                f"{alpha:g}",
                *(f"{row[m]:.4f}" for m in METRICS),
                str(sweep.wins.get(alpha, 0)),
                style=style,
            )
        self.console.print(table)
        self.console.print(f"\n[green]✓[/] Selected alpha = [bold]{sweep.selected:g}[/]")

    def output_training(self, result: TrainResult) -> None:
        if self.json_output:
            self._output_json({"train": result.manifest})
            return
        if self.quiet:
            return

        records = result.history.records
        self.console.print(
            f"\n[bold]Trained[/] {result.config.mode.value} network "
            f"({result.network.params.count:,} parameters, {len(records)} epochs)"
        )
        self.console.print(f"  loss {records[0].total:.4g} → {records[-1].total:.4g}  [dim](norm {result.norm:.4g})[/]")

    def output_summary(self, title: str, data: dict[str, Any]) -> None:
        """Key/value summary for artifact-producing commands."""
        if self.json_output:
            self._output_json({title.lower().replace(" ", "_"): data})
            return
        if self.quiet:
            return

        table = Table(title=title, show_header=False, box=None, padding=(0, 1))
        table.add_column("Key", style="dim")
        table.add_column("Value")
        for key, value in data.items():
            table.add_row(key, f"{value:.6g}" if isinstance(value, float) else str(value))
        self.console.print(table)

    def output_gradcheck(self, results: dict[str, float], tolerance: float) -> None:
        if self.json_output:
            self._output_json({"gradcheck": {"tolerance": tolerance, "max_rel_error": results}})
            return
        if self.quiet:
            return

        table = Table(title="Gradient check (autodiff vs central differences)", header_style="bold")
        table.add_column("Operation", style="cyan")
        table.add_column("max rel. error", justify="right")
        table.add_column("", justify="center")
        for name, err in results.items():
            ok = err <= tolerance
            table.add_row(name, f"{err:.2e}", "[green]✓[/]" if ok else "[red]✗[/]")
        self.console.print(table)

    def output_config(self, data: dict[str, Any]) -> None:
        if self.json_output:
            self._output_json({"config": data})
            return
        self.console.print_json(json.dumps(data, default=str))

    def output_error(self, message: str, title: str = "Error") -> None:
        """Output error message."""
        if self.json_output:
            self._output_json({"error": message, "title": title})
            return

        self.console.print(f"\n[red bold]{title}:[/] {message}")

    def output_warning(self, message: str) -> None:
        if self.silent:
            return

        self.console.print(f"\n[yellow]⚠ Warning:[/] {message}")

    def output_success(self, message: str) -> None:
        """Output success message."""
        if self.json_output:
            self._output_json({"success": True, "message": message})
            return

        if self.quiet:
            return

        self.console.print(f"\n[green]✓[/] {message}")
