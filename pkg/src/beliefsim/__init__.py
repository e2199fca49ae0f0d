"""Belief-dynamics simulation harness and cohort comparison toolkit."""

from .beliefmetrics import (
    ComparisonOptions,
    MetricReport,
    NotComputable,
    baseline_half_split,
    belief_network_distance,
    belief_update,
    compare_cohorts,
    follow_signal,
    social_influence,
)
from .core import (
    Cohort,
    PeerObservation,
    Persona,
    RoundTrace,
    StageResponse,
    Status,
    align_cohorts,
    load_cohort,
    save_cohort,
)
from .engine import RunConfig, StimulusPlan, SynthConfig, run_cohort, run_round, synthesize_stimuli

__version__ = "0.1.0"
