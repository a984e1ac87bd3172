"""
Selectors: *read* functions.

Selectors never write: they resolve scenario files and load the summary
file into a DataFrame. Everything that appends or runs lives in services.
"""

from __future__ import annotations

from pathlib import Path

import pandas as pd
from django.conf import settings

from core.agents import Scenario, load_scenario
from core.constants import SUMMARY_FILENAME, SUMMARY_HEADER
from core.exceptions import ReportIncomplete, UnknownScenario, UnreadableFile


def scenario_path(*, scenario_id: str, scenario_dir: Path | str | None = None) -> Path:
    """
    ``scenario_id`` may be a fixture name (``s1_n3``) resolved under the
    scenario directory, or a path to a scenario file.
    """
    direct = Path(scenario_id)
    if direct.suffix == ".json" and direct.is_file():
        return direct
    base = Path(scenario_dir or settings.DACS_SCENARIO_DIR)
    candidate = base / f"{direct.name.removesuffix('.json')}.json"
    if not candidate.is_file():
        raise UnknownScenario(f"Unknown scenario: {scenario_id!r}")
    return candidate


def get_scenario(*, scenario_id: str, scenario_dir: Path | str | None = None) -> Scenario:
    return load_scenario(scenario_path(scenario_id=scenario_id, scenario_dir=scenario_dir))


def default_summary_path() -> Path:
    return Path(settings.DACS_RESULTS_DIR) / SUMMARY_FILENAME


def summary_frame(*, summary_path: Path | str | None = None) -> pd.DataFrame:
    """The summary file as a DataFrame with the canonical columns."""
    path = Path(summary_path) if summary_path else default_summary_path()
    if not path.is_file() or path.stat().st_size == 0:
        raise ReportIncomplete(f"No summary rows at {path}")
    try:
        frame = pd.read_csv(path)
    except (OSError, UnicodeDecodeError, pd.errors.ParserError) as exc:
        raise UnreadableFile(path, str(exc)) from exc
    missing = [col for col in SUMMARY_HEADER if col not in frame.columns]
    if missing:
        raise ReportIncomplete(f"{path} lacks column(s) {missing}")
    return frame.loc[:, list(SUMMARY_HEADER)]
