"""Control-variable adjusted estimation of mean response at randomized doses."""

from .control import DEForm, DEModelSpec, balance_diagnostic, export_density_data, fit_de_model
from .data import DoseLevel, OutcomeKind, SubjectRecord, TrialDataset, arm_partition, validate
from .estimators import (
    DoseEstimates,
    Family,
    Structure,
    WorkingModelSpec,
    ancova_adjusted,
    composite_adjusted_means,
    composite_de_er,
    contrast,
    linear_dr_fit,
    residual_inclusion,
    unadjusted_means,
)
from .simulation import ScenarioConfig, generate_dataset, run_monte_carlo, true_means

__version__ = "0.1.0"
