"""Bundled scenario suites."""

from __future__ import annotations

from importlib import resources

from ..world import Scenario, load_scenarios


def smoke_suite() -> list[Scenario]:
    """Twenty small scenarios (7 straight, 7 T-junction, 6 curve) for quick end-to-end runs."""
    with resources.as_file(resources.files(__name__) / "smoke_suite.jsonl") as path:
        return load_scenarios(path)
