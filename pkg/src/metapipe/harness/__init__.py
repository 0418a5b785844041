from .config import ConfigError, ExperimentConfig, LearnerConfig, load_config, default_grid
from .runner import (
    BaselineResult,
    RunMetrics,
    SeedResult,
    action_count_report,
    aggregate,
    emit_curves,
    evaluate_baseline,
    grid_points,
    grid_search,
    heldout_losses,
    percent_improvement,
    run_experiment,
    run_seed,
)
