# ---------------------------------------------------------------------------
# Registry entry budgets (tokens)
# ---------------------------------------------------------------------------
REGISTRY_ENTRY_CAP: int = 200
REGISTRY_TASK_CAP: int = 50
REGISTRY_SUMMARY_CAP: int = 100

# ---------------------------------------------------------------------------
# Context builder
# ---------------------------------------------------------------------------
DEFAULT_BUDGET_T: int = 16000
SECTION_SEPARATOR: str = "\n"

# ---------------------------------------------------------------------------
# LOW-urgency batching
# ---------------------------------------------------------------------------
LOW_BATCH_SIZE: int = 3
LOW_BATCH_MAX_AGE: int = 5  # ticks

# ---------------------------------------------------------------------------
# Live LLM agents
# ---------------------------------------------------------------------------
LLM_AGENT_MAX_REQUESTS: int = 3
LLM_AGENT_MAX_STEPS: int = 12

# ---------------------------------------------------------------------------
# Backend
# ---------------------------------------------------------------------------
BACKEND_MAX_ATTEMPTS: int = 3
BACKEND_BACKOFF_BASE_S: float = 1.0
BACKEND_TIMEOUT_S: int = 120
DEFAULT_MAX_OUTPUT_TOKENS: int = 512
DEFAULT_TEMPERATURE: float = 0.0
SYSTEM_PROMPT: str = (
    "You are the orchestrator of several concurrently running agents. "
    "Answer the steering question of the agent named in the STEER line "
    "with one concrete decision."
)

# ---------------------------------------------------------------------------
# Experiment
# ---------------------------------------------------------------------------
DEFAULT_TRIALS: int = 10
DEFAULT_SEED: int = 0
DEFAULT_WORKERS: int = 4
TRIAL_TICK_SLACK: int = 4  # max ticks = total_steps * slack
SUMMARY_FILENAME: str = "summary.csv"
SUMMARY_HEADER: tuple[str, ...] = (
    "scenario_id",
    "condition",
    "trial_id",
    "accuracy",
    "contamination",
    "avg_context_tokens",
    "n_interactions",
    "seed",
)
LOCK_TIMEOUT_S: float = 30.0
LOCK_POLL_S: float = 0.01
SEED_MIXER: str = "sha256-64"

# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------
BETA_CF_TOLERANCE: float = 1e-14
BETA_CF_MAX_ITER: int = 10_000

# ---------------------------------------------------------------------------
# CLI exit codes
# ---------------------------------------------------------------------------
EXIT_UNKNOWN_SCENARIO: int = 3
EXIT_SCENARIO_INVALID: int = 4
EXIT_MISSING_API_KEY: int = 5
EXIT_REPORT_INCOMPLETE: int = 6
EXIT_BATCH_ABORTED: int = 7
EXIT_HARNESS_ERROR: int = 8
EXIT_UNREADABLE_FILE: int = 9
