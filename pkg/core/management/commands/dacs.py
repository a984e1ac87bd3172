"""
dacs: run trial batches, validate scenarios, print reports, emit figure data.

  python manage.py dacs run --scenario s1_n3 --condition dacs --backend mock-oracle --trials 10
  python manage.py dacs validate core/fixtures/scenarios/s5_n5_crossfire.json
  python manage.py dacs report --scenario s1_n3
  python manage.py dacs figure-data --out-file results/figure_data.csv
"""

from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from core.backend import BackendKind
from core.constants import (
    DEFAULT_SEED,
    DEFAULT_TRIALS,
    DEFAULT_WORKERS,
    EXIT_BATCH_ABORTED,
    EXIT_HARNESS_ERROR,
    EXIT_MISSING_API_KEY,
    EXIT_REPORT_INCOMPLETE,
    EXIT_SCENARIO_INVALID,
    EXIT_UNKNOWN_SCENARIO,
    EXIT_UNREADABLE_FILE,
)
from core.exceptions import (
    BatchAborted,
    DacsError,
    MissingApiKey,
    ReportIncomplete,
    ScenarioInvalid,
    UnknownScenario,
    UnreadableFile,
)
from core.experiment import AgentMode, Condition, RunConfig
from core.services import figure_data, report, run_batch, validate_scenario

# Most specific first.
_EXIT_CODES: tuple[tuple[type[DacsError], int], ...] = (
    (UnknownScenario, EXIT_UNKNOWN_SCENARIO),
    (UnreadableFile, EXIT_UNREADABLE_FILE),
    (ScenarioInvalid, EXIT_SCENARIO_INVALID),
    (MissingApiKey, EXIT_MISSING_API_KEY),
    (ReportIncomplete, EXIT_REPORT_INCOMPLETE),
    (BatchAborted, EXIT_BATCH_ABORTED),
    (DacsError, EXIT_HARNESS_ERROR),
)


def exit_code_for(exc: DacsError) -> int:
    for error_type, code in _EXIT_CODES:
        if isinstance(exc, error_type):
            return code
    return EXIT_HARNESS_ERROR


class Command(BaseCommand):
    help = "Run DACS / flat-baseline trials and summarize the results."

    def add_arguments(self, parser):
        sub = parser.add_subparsers(dest="subcommand", required=True)

        run = sub.add_parser("run", help="Run a batch of trials and append summary rows.")
        run.add_argument("--scenario", required=True, help="Fixture name or scenario file path.")
        run.add_argument("--condition", choices=[c.value for c in Condition], default="dacs")
        run.add_argument("--trials", type=int, default=DEFAULT_TRIALS)
        run.add_argument("--seed", type=int, default=DEFAULT_SEED)
        run.add_argument(
            "--backend", choices=[b.value for b in BackendKind], default=BackendKind.MOCK_ORACLE.value
        )
        run.add_argument("--budget", type=int, default=settings.DACS_DEFAULT_BUDGET)
        run.add_argument("--out", default=None, help="Output directory (summary, logs, manifests).")
        run.add_argument("--endpoint", default=None)
        run.add_argument("--model", default=None)
        run.add_argument("--workers", type=int, default=DEFAULT_WORKERS)
        run.add_argument("--agents", choices=[m.value for m in AgentMode], default="scripted")
        run.add_argument("--scenario-dir", default=None)

        validate = sub.add_parser("validate", help="Load a scenario and print diagnostics.")
        validate.add_argument("scenario", help="Fixture name or scenario file path.")
        validate.add_argument("--scenario-dir", default=None)

        rep = sub.add_parser("report", help="Print the DACS vs FLAT comparison table.")
        rep.add_argument("--scenario", required=True)
        rep.add_argument("--summary", default=None, help="Summary CSV (default: results dir).")

        fig = sub.add_parser("figure-data", help="Emit per-scenario aggregates for plotting.")
        fig.add_argument("--summary", default=None)
        fig.add_argument("--out-file", default=None, help="CSV path; stdout when omitted.")

    def handle(self, *args, **options):
        handler = {
            "run": self._run,
            "validate": self._validate,
            "report": self._report,
            "figure-data": self._figure_data,
        }[options["subcommand"]]
        try:
            handler(options)
        except DacsError as exc:
            raise CommandError(f"{type(exc).__name__}: {exc}", returncode=exit_code_for(exc)) from exc

    # -- subcommands -------------------------------------------------------

    def _run(self, options) -> None:
        backend = BackendKind(options["backend"])
        live = backend is BackendKind.HTTP
        if options["trials"] < 1 or options["workers"] < 1:
            raise CommandError("--trials and --workers must be >= 1", returncode=2)
        cfg = RunConfig(
            scenario_id=options["scenario"],
            condition=Condition(options["condition"]),
            output_dir=Path(options["out"] or settings.DACS_RESULTS_DIR),
            trials=options["trials"],
            seed=options["seed"],
            backend=backend,
            budget_T=options["budget"],
            model_name=options["model"] or (settings.DACS_MODEL if live else "mock"),
            endpoint=options["endpoint"] or (settings.DACS_ENDPOINT if live else ""),
            workers=options["workers"],
            agent_mode=AgentMode(options["agents"]),
            scenario_dir=Path(options["scenario_dir"]) if options["scenario_dir"] else None,
        )
        result = run_batch(cfg=cfg)

        self.stdout.write(
            self.style.SUCCESS(
                f"{cfg.scenario_name} {cfg.condition.value}: "
                f"{len(result.rows)} row(s) appended, {len(result.failed)} failed"
            )
        )
        for row in result.rows:
            self.stdout.write(
                f"  t{row.trial_id}: accuracy={row.accuracy:.3f} "
                f"contamination={row.contamination:.3f} tokens={row.avg_context_tokens:.1f}"
            )
        for failure in result.failed:
            self.stdout.write(self.style.WARNING(f"  failed: {failure}"))
        self.stdout.write(f"Manifest: {result.manifest_path}")

    def _validate(self, options) -> None:
        diagnostics = validate_scenario(
            scenario_id=options["scenario"], scenario_dir=options["scenario_dir"]
        )
        self.stdout.write(self.style.SUCCESS(f"Scenario {diagnostics.scenario_id} is valid."))
        self.stdout.write(
            f"  N={diagnostics.n_agents}  D={diagnostics.mean_decisions:.2f}  "
            f"interactions={diagnostics.n_interactions}"
        )
        for agent_id, count in diagnostics.decisions_per_agent.items():
            self.stdout.write(f"  {agent_id}: {count} decision(s)")

        if diagnostics.disjoint:
            self.stdout.write(self.style.SUCCESS("  Keyword sets: fully pairwise disjoint"))
        else:
            self.stdout.write(self.style.WARNING("  Keyword overlap:"))
            for pair, shared in diagnostics.keyword_overlap.items():
                self.stdout.write(f"    {pair}: {', '.join(shared)}")

        for title, leaks in (
            ("Registry leaks", diagnostics.registry_leaks),
            ("Cross-agent mentions", diagnostics.cross_mentions),
        ):
            if leaks:
                self.stdout.write(self.style.WARNING(f"  {title}:"))
                for leak in leaks:
                    self.stdout.write(f"    {leak.agent_id} {leak.field}: {leak.keyword}")

    def _report(self, options) -> None:
        result = report(scenario_id=options["scenario"], summary_path=options["summary"])
        self.stdout.write(result.render())

    def _figure_data(self, options) -> None:
        data = figure_data(summary_path=options["summary"], output_path=options["out_file"])
        if options["out_file"]:
            self.stdout.write(self.style.SUCCESS(f"Wrote {len(data)} row(s) to {options['out_file']}"))
        else:
            self.stdout.write(data.to_csv(index=False), ending="")
