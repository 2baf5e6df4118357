import numpy as np
import pytest

from cvdose.data import DoseLevel, OutcomeKind, TrialDataset


def make_dataset(arm, exposure, outcome, doses=None, covariates=None, kind=OutcomeKind.CONTINUOUS, ids=None):
    arm = np.asarray(arm)
    n = len(arm)
    k = int(arm.max()) + 1
    doses = doses if doses is not None else [float(j + 1) for j in range(k)]
    ids = ids if ids is not None else [f"s{i:04d}" for i in range(n)]
    return TrialDataset(
        dose_levels=tuple(DoseLevel(j, float(d)) for j, d in enumerate(doses)),
        subject_ids=ids,
        arm=arm,
        exposure=exposure,
        outcome=outcome,
        covariates=np.zeros((n, 0)) if covariates is None else covariates,
        outcome_kind=kind,
    )


def triangular(n_per_arm, seed, doses=(1.0, 2.0, 3.0), outcome=None, binary=False):
    """C = D + V, Y = outcome(D, V) + U with standard normal V, U."""
    rng = np.random.default_rng(seed)
    arm = np.repeat(np.arange(len(doses)), n_per_arm)
    d = np.asarray(doses)[arm]
    v = rng.standard_normal(len(arm))
    u = rng.standard_normal(len(arm))
    c = d + v
    if outcome is None:
        y = c + 0.5 * v + u
    else:
        y = outcome(d, v, u)
    if binary:
        y = (rng.random(len(arm)) < 1 / (1 + np.exp(-(y - 1.5)))).astype(float)
    return make_dataset(arm, c, y, doses=doses, kind=OutcomeKind.BINARY if binary else OutcomeKind.CONTINUOUS)


@pytest.fixture
def normal_trial():
    return triangular(20, seed=11)


# filled by test_acceptance.verdict, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
