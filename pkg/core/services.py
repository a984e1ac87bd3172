"""
Services: batch runs, summary appends, reports and figure data.

Following the HackSoft Django Styleguide:
  - Services encapsulate write / business logic
  - Keyword-only args for the public interface
  - Type hints everywhere
"""

from __future__ import annotations

import asyncio
import csv
import errno
import fcntl
import json
import logging
import os
import time
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import UTC, datetime
from importlib import metadata
from pathlib import Path
from typing import Any, NamedTuple

import pandas as pd

from core.agents import Scenario, ScenarioDiagnostics, diagnose_scenario
from core.backend import Backend, make_backend
from core.constants import (
    LOCK_POLL_S,
    LOCK_TIMEOUT_S,
    SEED_MIXER,
    SUMMARY_FILENAME,
    SUMMARY_HEADER,
)
from core.exceptions import (
    BatchAborted,
    DegenerateVariance,
    ReportIncomplete,
    TrialFailed,
)
from core.experiment import Condition, RunConfig, SummaryRow, derive_trial_seed, run_trial
from core.selectors import get_scenario, summary_frame
from core.stats import WelchResult, efficiency_ratio, mean_se, welch_t

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Locked summary appends
# ---------------------------------------------------------------------------


class LockTimeout(Exception):
    pass


@contextmanager
def locked_append(
    path: Path, *, timeout: float = LOCK_TIMEOUT_S, poll: float = LOCK_POLL_S
) -> Iterator[Any]:
    """
    Open ``path`` for appending under an exclusive ``flock``. The lock is
    polled non-blocking until ``timeout`` so a stuck holder aborts the batch
    instead of hanging it.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "a+", newline="", encoding="utf-8")
    deadline = time.monotonic() + timeout
    try:
        while True:
            try:
                fcntl.flock(fh.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
                break
            except OSError as exc:
                if exc.errno not in (errno.EAGAIN, errno.EACCES):
                    raise
                if time.monotonic() >= deadline:
                    raise LockTimeout(f"could not lock {path} within {timeout}s") from exc
                time.sleep(poll)
        try:
            yield fh
            fh.flush()
            os.fsync(fh.fileno())
        finally:
            fcntl.flock(fh.fileno(), fcntl.LOCK_UN)
    finally:
        fh.close()


def append_summary_row(
    *, summary_path: Path, row: SummaryRow, timeout: float = LOCK_TIMEOUT_S
) -> None:
    """One row per lock hold; the header is written by whoever finds the file empty."""
    with locked_append(summary_path, timeout=timeout) as fh:
        fh.seek(0, os.SEEK_END)
        writer = csv.writer(fh, lineterminator="\n")
        if fh.tell() == 0:
            writer.writerow(SUMMARY_HEADER)
        writer.writerow(row.as_row())


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


@dataclass
class BatchResult:
    rows: list[SummaryRow] = field(default_factory=list)
    failed: list[TrialFailed] = field(default_factory=list)
    manifest_path: Path | None = None


def _code_version() -> str:
    try:
        return metadata.version("dacs-harness")
    except metadata.PackageNotFoundError:
        return "unknown"


def _write_manifest(
    cfg: RunConfig, *, started_at: datetime, result: BatchResult, aborted: str | None
) -> Path:
    manifest_dir = Path(cfg.output_dir) / "manifests"
    manifest_dir.mkdir(parents=True, exist_ok=True)
    stamp = started_at.strftime("%Y%m%dT%H%M%S%fZ")
    path = manifest_dir / f"{cfg.scenario_name}_{cfg.condition.value}_{stamp}_{os.getpid()}.json"
    manifest = {
        "config": cfg.as_record(),
        "code_version": _code_version(),
        "seed_mixer": SEED_MIXER,
        "trial_seeds": {str(i): derive_trial_seed(cfg.seed, i) for i in range(cfg.trials)},
        "started_at": started_at.isoformat(),
        "finished_at": datetime.now(UTC).isoformat(),
        "completed_trials": sorted(row.trial_id for row in result.rows),
        "failed_trials": [
            {"error": str(exc), "log_path": str(exc.log_path) if exc.log_path else None}
            for exc in result.failed
        ],
        "aborted": aborted,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


async def _run_batch_async(
    cfg: RunConfig,
    *,
    scenario: Scenario,
    backend: Backend,
    summary_path: Path,
    lock_timeout: float,
    sleep: Callable[[float], None],
    complete_fn: Callable | None,
) -> tuple[BatchResult, str | None]:
    result = BatchResult()
    semaphore = asyncio.Semaphore(cfg.workers)

    def one_trial(index: int) -> SummaryRow:
        trial = run_trial(
            cfg, index, scenario=scenario, backend=backend, complete_fn=complete_fn, sleep=sleep
        )
        append_summary_row(summary_path=summary_path, row=trial.summary, timeout=lock_timeout)
        return trial.summary

    async def guarded(index: int) -> SummaryRow:
        async with semaphore:
            return await asyncio.to_thread(one_trial, index)

    outcomes = await asyncio.gather(
        *(guarded(i) for i in range(cfg.trials)), return_exceptions=True
    )
    aborted: str | None = None
    for index, outcome in enumerate(outcomes):
        if isinstance(outcome, SummaryRow):
            result.rows.append(outcome)
        elif isinstance(outcome, TrialFailed):
            logger.warning("[BATCH] trial %d failed: %s", index, outcome)
            result.failed.append(outcome)
        elif isinstance(outcome, LockTimeout):
            aborted = str(outcome)
        else:
            raise outcome
    return result, aborted


def run_batch(
    *,
    cfg: RunConfig,
    scenario: Scenario | None = None,
    backend: Backend | None = None,
    summary_path: Path | None = None,
    lock_timeout: float = LOCK_TIMEOUT_S,
    sleep: Callable[[float], None] = time.sleep,
    complete_fn: Callable | None = None,
) -> BatchResult:
    """
    Run ``cfg.trials`` trials on up to ``cfg.workers`` threads and append one
    summary row per completed trial. Failed trials append nothing. A lock
    timeout raises ``BatchAborted`` after the manifest is written; rows
    appended before it stay in the file.
    """
    scenario = scenario or get_scenario(scenario_id=cfg.scenario_id, scenario_dir=cfg.scenario_dir)
    backend = backend or make_backend(cfg.backend, cfg.params)
    summary_path = summary_path or Path(cfg.output_dir) / SUMMARY_FILENAME
    started_at = datetime.now(UTC)

    logger.info(
        "[BATCH] %s %s: %d trial(s), %d worker(s), backend=%s",
        scenario.scenario_id, cfg.condition.value, cfg.trials, cfg.workers, cfg.backend.value,
    )
    result, aborted = asyncio.run(
        _run_batch_async(
            cfg,
            scenario=scenario,
            backend=backend,
            summary_path=summary_path,
            lock_timeout=lock_timeout,
            sleep=sleep,
            complete_fn=complete_fn,
        )
    )
    result.rows.sort(key=lambda row: row.trial_id)
    result.manifest_path = _write_manifest(cfg, started_at=started_at, result=result, aborted=aborted)

    if aborted:
        logger.error("[BATCH] aborted after %d trial(s): %s", len(result.rows), aborted)
        raise BatchAborted(aborted, completed=len(result.rows))
    logger.info(
        "[BATCH] %s %s done: %d appended, %d failed",
        scenario.scenario_id, cfg.condition.value, len(result.rows), len(result.failed),
    )
    return result


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

_METRICS = ("accuracy", "contamination", "avg_context_tokens")


class MeanSE(NamedTuple):
    mean: float
    se: float

    def __str__(self) -> str:
        return f"{self.mean:.3f} ± {self.se:.3f}"


@dataclass(frozen=True)
class ConditionStats:
    n: int
    accuracy: MeanSE
    contamination: MeanSE
    avg_context_tokens: MeanSE


@dataclass(frozen=True)
class ComparisonReport:
    scenario_id: str
    dacs: ConditionStats
    flat: ConditionStats
    delta_accuracy: float
    efficiency_ratio: float
    welch: WelchResult | None

    def as_row(self) -> dict[str, Any]:
        row: dict[str, Any] = {"scenario_id": self.scenario_id}
        for name, stats in (("dacs", self.dacs), ("flat", self.flat)):
            row[f"{name}_n"] = stats.n
            for metric in _METRICS:
                value: MeanSE = getattr(stats, metric)
                row[f"{name}_{metric}_mean"] = value.mean
                row[f"{name}_{metric}_se"] = value.se
        row["delta_accuracy"] = self.delta_accuracy
        row["efficiency_ratio"] = round(self.efficiency_ratio, 2)
        row["welch_t"] = self.welch.t if self.welch else None
        row["welch_df"] = self.welch.df if self.welch else None
        row["welch_p"] = self.welch.p_two_sided if self.welch else None
        return row

    def render(self) -> str:
        table = pd.DataFrame(
            [
                [name, stats.n, *(str(getattr(stats, m)) for m in _METRICS)]
                for name, stats in (("DACS", self.dacs), ("FLAT", self.flat))
            ],
            columns=["condition", "n", *_METRICS],
        )
        if self.welch is None:
            welch_line = "Welch t-test: n/a (both conditions have zero variance)"
        else:
            welch_line = (
                f"Welch t = {self.welch.t:.3f}, df = {self.welch.df:.1f}, "
                f"p = {self.welch.p_two_sided:.4g}"
            )
        return "\n".join(
            [
                f"Scenario {self.scenario_id}",
                table.to_string(index=False),
                f"Δ accuracy (DACS - FLAT): {self.delta_accuracy:+.3f}",
                f"Efficiency ratio (FLAT / DACS tokens): {self.efficiency_ratio:.2f}×",
                welch_line,
            ]
        )


def _condition_stats(frame: pd.DataFrame) -> ConditionStats:
    return ConditionStats(
        n=len(frame),
        **{metric: MeanSE(*mean_se(frame[metric].tolist())) for metric in _METRICS},
    )


def report(*, scenario_id: str, summary_path: Path | str | None = None) -> ComparisonReport:
    frame = summary_frame(summary_path=summary_path)
    frame = frame[frame["scenario_id"] == scenario_id]
    groups = {cond.value: frame[frame["condition"] == cond.value] for cond in Condition}
    for condition, rows in groups.items():
        if len(rows) < 2:
            raise ReportIncomplete(
                f"{scenario_id}: need >= 2 {condition} trials, found {len(rows)}"
            )

    dacs = _condition_stats(groups[Condition.DACS.value])
    flat = _condition_stats(groups[Condition.FLAT.value])
    try:
        welch = welch_t(
            groups[Condition.DACS.value]["accuracy"].tolist(),
            groups[Condition.FLAT.value]["accuracy"].tolist(),
        )
    except DegenerateVariance:
        welch = None

    result = ComparisonReport(
        scenario_id=scenario_id,
        dacs=dacs,
        flat=flat,
        delta_accuracy=dacs.accuracy.mean - flat.accuracy.mean,
        efficiency_ratio=efficiency_ratio(flat.avg_context_tokens.mean, dacs.avg_context_tokens.mean),
        welch=welch,
    )
    logger.info(
        "[REPORT] %s: Δacc=%+.3f ratio=%.2f", scenario_id, result.delta_accuracy,
        result.efficiency_ratio,
    )
    return result


FIGURE_COLUMNS: tuple[str, ...] = (
    "scenario_id",
    "condition",
    "n",
    *(f"{metric}_{stat}" for metric in _METRICS for stat in ("mean", "se")),
)


def _aggregate(frame: pd.DataFrame, keys: list[str]) -> pd.DataFrame:
    grouped = frame.groupby(keys, sort=True)[list(_METRICS)]
    means = grouped.mean().add_suffix("_mean")
    ses = grouped.sem(ddof=1).fillna(0.0).add_suffix("_se")
    counts = grouped.size().rename("n")
    return pd.concat([counts, means, ses], axis=1).reset_index()


def figure_data(
    *, summary_path: Path | str | None = None, output_path: Path | str | None = None
) -> pd.DataFrame:
    """
    Mean and standard error of each metric per (scenario, condition), plus a
    pooled ``ALL`` row per condition. Written as CSV when ``output_path`` is set.
    """
    frame = summary_frame(summary_path=summary_path)
    per_scenario = _aggregate(frame, ["scenario_id", "condition"])
    pooled = _aggregate(frame, ["condition"]).assign(scenario_id="ALL")
    data = pd.concat([per_scenario, pooled], ignore_index=True).loc[:, list(FIGURE_COLUMNS)]

    if output_path is not None:
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        data.to_csv(output_path, index=False)
        logger.info("[REPORT] figure data for %d scenario(s) -> %s", frame["scenario_id"].nunique(), output_path)
    return data


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------


def validate_scenario(*, scenario_id: str, scenario_dir: Path | str | None = None) -> ScenarioDiagnostics:
    diagnostics = diagnose_scenario(get_scenario(scenario_id=scenario_id, scenario_dir=scenario_dir))
    if diagnostics.registry_leaks:
        logger.warning(
            "[SCENARIO] %s: %d keyword(s) visible in registry text",
            scenario_id, len(diagnostics.registry_leaks),
        )
    return diagnostics
