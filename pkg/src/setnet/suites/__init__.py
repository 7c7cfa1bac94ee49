"""Check-suite registry behind `setnet check`."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

from setnet.config import DiagnosticsConfig, ModelConfig
from setnet.diagnostics import CheckReport
from setnet.errors import ConfigError


@dataclass
class SuiteContext:
    """What a suite may look at: an optional model config and the diagnostics settings."""
    config: ModelConfig | None = None
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)


@dataclass
class Suite:
    """A named group of checks producing CheckReports."""
    name: str
    description: str
    runner: Callable[[SuiteContext], list[CheckReport]]
    needs_config: bool = False


class SuiteRegistry:
    """Registry of available check suites."""

    def __init__(self) -> None:
        self._suites: dict[str, Suite] = {}

    def register(self, suite: Suite) -> None:
        """Register a suite."""
        self._suites[suite.name] = suite

    def get(self, name: str) -> Suite | None:
        """Get a suite by name."""
        return self._suites.get(name)

    def names(self) -> list[str]:
        return list(self._suites.keys())

    def run(self, name: str, context: SuiteContext) -> list[CheckReport]:
        suite = self._suites.get(name)
        if suite is None:
            raise ConfigError("suite", f"unknown suite '{name}'; choose from {', '.join(self.names())}")
        if suite.needs_config and context.config is None:
            raise ConfigError("config", f"suite '{name}' needs a model config")
        return suite.runner(context)


# Global registry instance
_registry = SuiteRegistry()


def get_registry() -> SuiteRegistry:
    """Get the global suite registry."""
    return _registry


def register_suite(suite: Suite) -> None:
    """Register a suite in the global registry."""
    _registry.register(suite)
