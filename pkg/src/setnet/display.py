"""Rich-based terminal display utilities.

Everything here writes to stderr; stdout is reserved for machine-readable
JSON/CSV emitted by the CLI.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from typing import Any

from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

console = Console(stderr=True)


def setup_logging(level: str = "INFO") -> None:
    """Route library logging through a RichHandler on the stderr console."""
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False, rich_tracebacks=False)],
        force=True,
    )


def print_banner(command: str, details: dict[str, Any]) -> None:
    """Print a panel describing the command about to run."""
    lines = "\n".join(f"[dim]{key}:[/dim] [bold]{value}[/bold]" for key, value in details.items())
    console.print(Panel(lines, title=f"[bold cyan]setnet {command}[/bold cyan]", border_style="cyan"))


def print_info(message: str) -> None:
    console.print(f"[dim]{message}[/dim]")


def print_success(message: str) -> None:
    console.print(f"[bold green]OK:[/bold green] {message}")


def print_warning(message: str) -> None:
    console.print(f"[bold yellow]Warning:[/bold yellow] {message}")


def print_error(message: str) -> None:
    """Print error message."""
    console.print(f"[bold red]Error:[/bold red] {message}")


def print_report_table(reports: Iterable[Any]) -> None:
    """Summarize check reports (anything with name/max_deviation/tolerance/passed)."""
    table = Table(title="Checks", show_header=True, header_style="bold")
    table.add_column("Check", style="cyan")
    table.add_column("Max deviation", justify="right")
    table.add_column("Tolerance", justify="right")
    table.add_column("Result")
    for report in reports:
        result = "[green]pass[/green]" if report.passed else "[red]FAIL[/red]"
        table.add_row(report.name, f"{report.max_deviation:.3e}", f"{report.tolerance:.1e}", result)
    console.print(table)


def print_epoch(epoch: int, train_loss: float, test_loss: float, grad_first: float, grad_last: float) -> None:
    console.print(
        f"[bold]epoch {epoch:>3}[/bold]  train {train_loss:.6f}  test {test_loss:.6f}  "
        f"[dim]|grad| first {grad_first:.3e} last {grad_last:.3e}[/dim]"
    )


def print_profile_summary(rows: Sequence[tuple[str, int, float]]) -> None:
    """Table of (family, depth, mean first/last gradient ratio)."""
    table = Table(title="Gradient profile", show_header=True, header_style="bold")
    table.add_column("Family", style="cyan")
    table.add_column("Depth", justify="right")
    table.add_column("first / last", justify="right")
    for family, depth, ratio in rows:
        table.add_row(family, str(depth), f"{ratio:.3e}")
    console.print(table)
