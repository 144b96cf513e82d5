"""Scenario runner, metrics, configuration and figures."""
from .scenarios import (Metrics, ReferenceConfig, ScenarioConfig, ScenarioResult, actuator_activity,
                        format_table, recompute_metrics, reference_signal, reference_trajectory,
                        run_scenario, synth_deltaP, tracking_error, write_outputs)

__all__ = [
    "Metrics", "ReferenceConfig", "ScenarioConfig", "ScenarioResult", "actuator_activity",
    "format_table", "recompute_metrics", "reference_signal", "reference_trajectory",
    "run_scenario", "synth_deltaP", "tracking_error", "write_outputs",
]
