"""Dose-exposure model fitting and control-variable diagnostics.

The control variable of subject ``i`` is the residual of a separable
dose-exposure model, ``V_i = C_i - h(D_i, X_i, gamma)``.  Every supported
form is linear in ``gamma``, so ``h = H_i @ gamma`` for a design row
``H_i`` and ``dV_i/dgamma = -H_i``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .data import TrialDataset, arm_partition
from .errors import ValidationError
from .regression import FitResult, ols_fit


class DEForm(str, enum.Enum):
    ANOVA = "anova"
    PROPORTIONAL = "proportional"
    PROPORTIONAL_WITH_COVARIATES = "proportional_with_covariates"
    LINEAR_IN_DOSE_AND_COVARIATES = "linear_in_dose_and_covariates"


@dataclass(frozen=True)
class DEModelSpec:
    form: DEForm = DEForm.PROPORTIONAL

    def __post_init__(self):
        object.__setattr__(self, "form", DEForm(self.form))

    @property
    def has_intercept(self) -> bool:
        return self.form in (DEForm.ANOVA, DEForm.LINEAR_IN_DOSE_AND_COVARIATES)


def de_design(dataset: TrialDataset, spec: DEModelSpec, at_arm: int | None = None) -> tuple[np.ndarray, tuple[str, ...]]:
    """Design ``H`` of the dose-exposure model and its column labels.

    With ``at_arm`` every subject is placed in that arm (counterfactual
    design used to predict exposure at another dose).
    """
    if at_arm is None:
        d = dataset.dose
        ind = dataset.arm_indicators
    else:
        d = np.full(dataset.n, dataset.dose_values[at_arm])
        ind = np.zeros((dataset.n, dataset.n_arms))
        ind[:, at_arm] = 1.0
    x = dataset.covariates
    xn = dataset.covariate_names
    form = spec.form
    if form is DEForm.ANOVA:
        return ind, tuple(f"arm{k}" for k in range(dataset.n_arms))
    if form is DEForm.PROPORTIONAL:
        return d[:, None], ("dose",)
    if form is DEForm.PROPORTIONAL_WITH_COVARIATES:
        if x.shape[1] == 0:
            raise ValidationError("proportional_with_covariates needs at least one covariate")
        return np.column_stack([d, x * d[:, None]]), ("dose",) + tuple(f"dose:{c}" for c in xn)
    return np.column_stack([np.ones(dataset.n), d, x]), ("intercept", "dose") + xn


@dataclass(frozen=True, eq=False)
class ControlVariableSet:
    spec: DEModelSpec
    gamma_hat: np.ndarray
    residuals: np.ndarray
    design: np.ndarray
    de_fit: FitResult
    scale: float = 1.0

    def predict(self) -> np.ndarray:
        """``h(D_i, X_i, gamma_hat)`` for every subject."""
        return self.design @ self.gamma_hat

    def residual_jacobian(self) -> np.ndarray:
        """``(n, p)`` derivative of each residual with respect to gamma."""
        return -self.scale * self.design

    def rescaled(self, factor: float) -> "ControlVariableSet":
        """Same fit with the control variable multiplied by ``factor``."""
        return ControlVariableSet(
            self.spec, self.gamma_hat, self.residuals * factor, self.design, self.de_fit, self.scale * factor
        )


def fit_de_model(dataset: TrialDataset, spec: DEModelSpec | str = DEModelSpec()) -> ControlVariableSet:
    if not isinstance(spec, DEModelSpec):
        spec = DEModelSpec(spec)
    h, labels = de_design(dataset, spec)
    fit = ols_fit(h, dataset.exposure, labels=labels)
    return ControlVariableSet(spec, fit.coefficients, fit.residuals, h, fit)


@dataclass(frozen=True, eq=False)
class BalanceReport:
    arm_residuals: tuple[np.ndarray, ...]
    means: np.ndarray
    sds: np.ndarray
    grid: np.ndarray
    ecdf: np.ndarray
    pairs: tuple[tuple[int, int], ...]
    ks: np.ndarray
    t: np.ndarray

    @property
    def n_arms(self) -> int:
        return len(self.arm_residuals)

    def ks_stat(self, j: int, k: int) -> float:
        return float(self.ks[self.pairs.index((min(j, k), max(j, k)))])


def _ecdf(sample: np.ndarray, grid: np.ndarray) -> np.ndarray:
    return np.searchsorted(np.sort(sample), grid, side="right") / len(sample)


def balance_diagnostic(cv: ControlVariableSet, dataset: TrialDataset) -> BalanceReport:
    """Per-arm residual summaries with pairwise KS and Welch t statistics."""
    parts = [cv.residuals[idx] for idx in arm_partition(dataset)]
    means = np.array([p.mean() if len(p) else np.nan for p in parts])
    sds = np.array([p.std(ddof=1) if len(p) > 1 else np.nan for p in parts])
    grid = np.unique(cv.residuals)
    ecdf = np.array([_ecdf(p, grid) if len(p) else np.full(len(grid), np.nan) for p in parts])
    pairs = tuple(combinations(range(len(parts)), 2))
    ks = np.array([np.max(np.abs(ecdf[j] - ecdf[k])) for j, k in pairs])
    t = []
    for j, k in pairs:
        se = np.sqrt(sds[j] ** 2 / len(parts[j]) + sds[k] ** 2 / len(parts[k]))
        diff = means[j] - means[k]
        t.append(diff / se if se > 0 else (0.0 if diff == 0 else np.sign(diff) * np.inf))
    return BalanceReport(tuple(parts), means, sds, grid, ecdf, pairs, ks, np.array(t))


def silverman_bandwidth(sample: np.ndarray) -> float:
    sample = np.asarray(sample, dtype=float)
    if len(sample) < 2:
        return 0.0
    sd = sample.std(ddof=1)
    q75, q25 = np.percentile(sample, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * len(sample) ** -0.2


@dataclass(frozen=True, eq=False)
class DensityTable:
    grid: np.ndarray
    density: np.ndarray  # (K, len(grid))
    bandwidth: float

    def rows(self):
        for k in range(self.density.shape[0]):
            for g, f in zip(self.grid, self.density[k]):
                yield k, float(g), float(f)


GRID_POINTS = 256


def export_density_data(report: BalanceReport, bandwidth: float | None = None) -> DensityTable:
    """Gaussian KDE of residuals per arm on one shared 256-point grid.

    The default bandwidth is the largest per-arm Silverman bandwidth so all
    arms are smoothed alike.
    """
    if not report.arm_residuals or all(len(p) == 0 for p in report.arm_residuals):
        raise ValueError("balance report has no residuals")
    if bandwidth is None:
        bandwidth = max(silverman_bandwidth(p) for p in report.arm_residuals)
    allres = np.concatenate(report.arm_residuals)
    if not bandwidth > 0:
        # all residuals coincide; any positive width keeps the curve a unit-mass bump
        bandwidth = 1e-3 * max(1.0, float(np.max(np.abs(allres))))
    grid = np.linspace(allres.min() - 3 * bandwidth, allres.max() + 3 * bandwidth, GRID_POINTS)
    dens = np.zeros((len(report.arm_residuals), GRID_POINTS))
    for k, p in enumerate(report.arm_residuals):
        if len(p):
            z = (grid[None, :] - p[:, None]) / bandwidth
            dens[k] = np.exp(-0.5 * z**2).sum(axis=0) / (len(p) * bandwidth * np.sqrt(2 * np.pi))
    return DensityTable(grid, dens, float(bandwidth))
