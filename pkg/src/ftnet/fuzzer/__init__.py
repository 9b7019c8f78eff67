"""Queue, mutations, scheduling and crash triage for fault programs."""

from .campaign import (CampaignState, FaultCampaign, IterationReport, Job, Scheduler,
                       SchedulerConfig, WorkerPool)
from .mutators import extend, havoc, mutate_stream, splice
from .program import FaultProgram, Provenance, calibrated, load_program, save_program
from .triage import CrashReport, CrashTable, dedup_key

__all__ = [
    "CampaignState", "CrashReport", "CrashTable", "FaultCampaign", "FaultProgram", "IterationReport",
    "Job", "Provenance", "Scheduler", "SchedulerConfig", "WorkerPool", "calibrated", "dedup_key",
    "extend", "havoc", "load_program", "mutate_stream", "save_program", "splice",
]
