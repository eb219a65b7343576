"""Desk-scale training on the simulated accelerator."""

from __future__ import annotations

from .harness import (
    SCHEDULES,
    RunRecord,
    TrainConfig,
    backward,
    forward,
    run_experiment,
    run_many,
    step,
    time_to_accuracy,
)

__all__ = [
    "SCHEDULES",
    "RunRecord",
    "TrainConfig",
    "backward",
    "forward",
    "run_experiment",
    "run_many",
    "step",
    "time_to_accuracy",
]
