"""Dose-level mean estimators with control-variable adjustment.

The adjusted estimator for arm ``k`` is

    mu_k = ybar_k + mean_i g(Z_i^(k) beta) - mean_{i in S_k} g(Z_i^(k) beta)

where ``Z_i^(k)`` is subject ``i``'s working-model design row with the dose
set to ``d_k``.  Standard errors come from one stacked estimating-equation
sandwich over the dose-exposure fit (gamma), the working model (beta) and
the three averages, so uncertainty in the control variable is propagated.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .control import ControlVariableSet, DEForm, DEModelSpec, de_design, fit_de_model
from .data import OutcomeKind, TrialDataset, arm_partition
from .errors import DegenerateArm, NumericalError, ValidationError
from .regression import logistic_fit, ols_fit, stacked_influence

log = logging.getLogger(__name__)

CI_LEVEL = 0.95
Z_CRIT = float(norm.ppf(0.5 + CI_LEVEL / 2))
CANONICAL_TOL = 1e-6


class Family(str, enum.Enum):
    LINEAR = "linear"
    LOGISTIC = "logistic"


class Structure(str, enum.Enum):
    ANCOVA1 = "ancova1"
    ANCOVA2 = "ancova2"


class Method(str, enum.Enum):
    UNADJUSTED = "unadjusted"
    ANCOVA1 = "ancova1"
    ANCOVA2 = "ancova2"
    RESIDUAL_INCLUSION = "residual_inclusion"
    COMPOSITE_DE_ER = "composite_de_er"


@dataclass(frozen=True)
class WorkingModelSpec:
    family: Family = Family.LINEAR
    structure: Structure = Structure.ANCOVA2
    include_covariates: bool = False
    include_cv: bool = True

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "structure", Structure(self.structure))

    def check(self, dataset: TrialDataset) -> None:
        if self.family is Family.LOGISTIC and dataset.outcome_kind is not OutcomeKind.BINARY:
            raise ValidationError("logistic working model requires a binary outcome")


@dataclass(frozen=True)
class Contrast:
    j: int
    k: int
    estimate: float
    se: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True, eq=False)
class DoseEstimates:
    method: Method
    dose_values: np.ndarray
    n_per_arm: np.ndarray
    mu: np.ndarray
    covariance: np.ndarray
    plugin: np.ndarray | None = None
    bootstrap_se: np.ndarray | None = None

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def ci_low(self) -> np.ndarray:
        return self.mu - Z_CRIT * self.se

    @property
    def ci_high(self) -> np.ndarray:
        return self.mu + Z_CRIT * self.se

    @property
    def n_arms(self) -> int:
        return len(self.mu)

    @property
    def contrasts(self) -> list[Contrast]:
        return [contrast(self, j, k) for j in range(self.n_arms) for k in range(self.n_arms) if j != k]


def contrast(estimates: DoseEstimates, j: int, k: int) -> Contrast:
    """Difference ``mu_j - mu_k`` with SE from the joint covariance."""
    if not (0 <= j < estimates.n_arms and 0 <= k < estimates.n_arms):
        raise IndexError(f"arms {j}, {k} out of range")
    c = estimates.covariance
    delta = float(estimates.mu[j] - estimates.mu[k])
    se = float(np.sqrt(max(c[j, j] + c[k, k] - 2 * c[j, k], 0.0)))
    return Contrast(j, k, delta, se, delta - Z_CRIT * se, delta + Z_CRIT * se)


def unadjusted_means(dataset: TrialDataset) -> DoseEstimates:
    parts = arm_partition(dataset)
    sizes = np.array([len(p) for p in parts])
    if np.any(sizes < 2):
        raise DegenerateArm(f"arm {int(np.argmax(sizes < 2))} has fewer than 2 subjects")
    y = dataset.outcome
    mu = np.array([y[p].mean() for p in parts])
    var = np.array([y[p].var(ddof=1) / len(p) for p in parts])
    return DoseEstimates(Method.UNADJUSTED, dataset.dose_values, sizes, mu, np.diag(var))


def _mean_fn(family: Family, eta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if family is Family.LOGISTIC:
        p = expit(eta)
        return p, p * (1 - p)
    return eta, np.ones_like(eta)


def _fit(family: Family, x: np.ndarray, y: np.ndarray, labels):
    if family is Family.LOGISTIC:
        fit = logistic_fit(x, y, labels=labels)
        if not fit.converged:
            raise NumericalError(f"logistic working model did not converge in {fit.iterations} iterations")
        return fit
    return ols_fit(x, y, labels=labels)


@dataclass(frozen=True, eq=False)
class _WorkingDesign:
    """Counterfactual design rows ``Z^(k)`` and their gamma-derivatives.

    ``rows[k]`` is ``(n, P)``, ``jac[k]`` is ``(n, P, p_gamma)``.  ``blocks``
    lists ``(row_index, col_index)`` pairs fitted separately.
    """

    labels: tuple[str, ...]
    rows: list[np.ndarray]
    jac: list[np.ndarray]
    blocks: list[tuple[np.ndarray, np.ndarray]]
    arm: np.ndarray = field(repr=False)

    def observed(self) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.arm)
        idx = np.arange(n)
        z = np.stack(self.rows)[self.arm, idx]
        dz = np.stack(self.jac)[self.arm, idx]
        return z, dz


def _covariate_block(dataset: TrialDataset, cv: ControlVariableSet | None, spec: WorkingModelSpec):
    cols, jac, labels = [], [], []
    p1 = 0 if cv is None else len(cv.gamma_hat)
    if spec.include_cv:
        if cv is None:
            raise ValueError("include_cv requires a control variable set")
        cols.append(cv.residuals[:, None])
        jac.append(cv.residual_jacobian()[:, None, :])
        labels.append("cv")
    if spec.include_covariates and dataset.n_covariates:
        cols.append(dataset.covariates)
        jac.append(np.zeros((dataset.n, dataset.n_covariates, p1)))
        labels.extend(dataset.covariate_names)
    n = dataset.n
    block = np.hstack(cols) if cols else np.zeros((n, 0))
    block_jac = np.concatenate(jac, axis=1) if jac else np.zeros((n, 0, p1))
    return block, block_jac, labels


def _ancova_design(
    dataset: TrialDataset, cv: ControlVariableSet | None, spec: WorkingModelSpec, min_residual_df: int = 2
) -> _WorkingDesign:
    n, k_arms = dataset.n, dataset.n_arms
    block, block_jac, blabels = _covariate_block(dataset, cv, spec)
    q = block.shape[1]
    p1 = block_jac.shape[2]
    rows, jac = [], []
    if spec.structure is Structure.ANCOVA1:
        labels = ("intercept",) + tuple(f"arm{k}" for k in range(1, k_arms)) + tuple(blabels)
        P = len(labels)
        for k in range(k_arms):
            ind = np.zeros((n, k_arms - 1))
            if k:
                ind[:, k - 1] = 1.0
            rows.append(np.hstack([np.ones((n, 1)), ind, block]))
            jk = np.zeros((n, P, p1))
            jk[:, k_arms:, :] = block_jac
            jac.append(jk)
        blocks = [(np.arange(n), np.arange(P))]
    else:
        per = 1 + q
        P = k_arms * per
        labels = tuple(f"arm{k}:{name}" for k in range(k_arms) for name in ["intercept"] + blabels)
        blocks = []
        for k, idx in enumerate(arm_partition(dataset)):
            cols = np.arange(k * per, (k + 1) * per)
            z = np.zeros((n, P))
            z[:, cols] = np.hstack([np.ones((n, 1)), block])
            jk = np.zeros((n, P, p1))
            jk[:, cols[1:], :] = block_jac
            rows.append(z)
            jac.append(jk)
            if len(idx) < per + min_residual_df:
                raise DegenerateArm(f"arm {k} has {len(idx)} subjects; ancova2 needs at least {per + min_residual_df}")
            blocks.append((idx, cols))
    return _WorkingDesign(labels, rows, jac, blocks, dataset.arm)


def _composite_design(dataset: TrialDataset, cv: ControlVariableSet, spec: WorkingModelSpec) -> _WorkingDesign:
    """Design ``[1, C^(k), V, X]`` with ``C^(k) = h(d_k, X, gamma) + V``."""
    n = dataset.n
    block, block_jac, blabels = _covariate_block(dataset, cv, spec)
    p1 = len(cv.gamma_hat)
    labels = ("intercept", "exposure") + tuple(blabels)
    rows, jac = [], []
    for k in range(dataset.n_arms):
        hk, _ = de_design(dataset, cv.spec, at_arm=k)
        ck = hk @ cv.gamma_hat + cv.residuals
        rows.append(np.hstack([np.ones((n, 1)), ck[:, None], block]))
        jk = np.zeros((n, len(labels), p1))
        jk[:, 1, :] = hk + cv.residual_jacobian()
        jk[:, 2:, :] = block_jac
        jac.append(jk)
    return _WorkingDesign(labels, rows, jac, [(np.arange(n), np.arange(len(labels)))], dataset.arm)


def _stage1(cv: ControlVariableSet | None, n: int):
    if cv is None:
        return np.zeros((n, 0)), np.zeros((0, 0))
    h = cv.design
    return h * cv.de_fit.residuals[:, None], -(h.T @ h)


def _beta_equations(z, dz, y, beta, family):
    """Scores, Jacobian in beta and cross-Jacobian in gamma of the working EE."""
    mean, w = _mean_fn(family, z @ beta)
    r = y - mean
    scores = z * r[:, None]
    j_bb = -(z * w[:, None]).T @ z
    bdz = np.einsum("p,npg->ng", beta, dz)
    j_bg = np.einsum("npg,n->pg", dz, r) - np.einsum("n,np,ng->pg", w, z, bdz)
    return scores, j_bb, j_bg


def _fit_design(design: _WorkingDesign, y: np.ndarray, family: Family) -> np.ndarray:
    z, _ = design.observed()
    beta = np.zeros(z.shape[1])
    for rows, cols in design.blocks:
        fit = _fit(family, z[np.ix_(rows, cols)], y[rows], [design.labels[c] for c in cols])
        beta[cols] = fit.coefficients
    return beta


def _adjusted_means(
    dataset: TrialDataset,
    cv: ControlVariableSet | None,
    design: _WorkingDesign,
    family: Family,
    method: Method,
    canonical: bool = True,
) -> DoseEstimates:
    y = dataset.outcome
    n, K = dataset.n, dataset.n_arms
    parts = arm_partition(dataset)
    sizes = np.array([len(p) for p in parts])
    beta = _fit_design(design, y, family)
    z, dz = design.observed()
    P = len(beta)

    ybar = np.array([y[p].mean() for p in parts])
    preds, weights = zip(*(_mean_fn(family, zk @ beta) for zk in design.rows))
    full = np.array([g.mean() for g in preds])
    within = np.array([preds[k][parts[k]].mean() for k in range(K)])
    mu = ybar + full - within

    # stacked system: gamma | beta, m (arm means), a (full averages), b (within-arm averages)
    s1, j1 = _stage1(cv, n)
    p1 = s1.shape[1]
    s_beta, j_bb, j_bg = _beta_equations(z, dz, y, beta, family)
    ind = dataset.arm_indicators
    s_m = ind * (y[:, None] - ybar[None, :])
    gk = np.column_stack(preds)
    wk = np.column_stack(weights)
    s_a = gk - full[None, :]
    s_b = ind * (gk - within[None, :])

    m = P + 3 * K
    j2 = np.zeros((m, m))
    j2[:P, :P] = j_bb
    ia, ib, im = slice(P + K, P + 2 * K), slice(P + 2 * K, m), slice(P, P + K)
    j2[im, im] = -np.diag(sizes.astype(float))
    j2[ia, ia] = -n * np.eye(K)
    j2[ib, ib] = -np.diag(sizes.astype(float))
    j21 = np.zeros((m, p1))
    j21[:P] = j_bg
    for k in range(K):
        j2[P + K + k, :P] = wk[:, k] @ design.rows[k]
        j2[P + 2 * K + k, :P] = (wk[:, k] * ind[:, k]) @ design.rows[k]
        slope = np.einsum("p,npg->ng", beta, design.jac[k]) * wk[:, k][:, None]
        j21[P + K + k] = slope.sum(axis=0)
        j21[P + 2 * K + k] = (slope * ind[:, k][:, None]).sum(axis=0)

    phi = stacked_influence(s1, j1, np.hstack([s_beta, s_m, s_a, s_b]), j2, j21)
    off = p1 + P
    phi_mu = phi[:, off : off + K] + phi[:, off + K : off + 2 * K] - phi[:, off + 2 * K : off + 3 * K]
    cov = phi_mu.T @ phi_mu
    cov = 0.5 * (cov + cov.T)

    # per-arm intercepts + canonical link make the three-term form collapse to the plug-in average
    scale = max(1.0, float(np.max(np.abs(mu))))
    if canonical and np.max(np.abs(mu - full)) > CANONICAL_TOL * scale:
        log.warning("canonical-link identity off by %.3g for %s", float(np.max(np.abs(mu - full))), method.value)
    return DoseEstimates(method, dataset.dose_values, sizes, mu, cov, plugin=full)


def ancova_adjusted(
    dataset: TrialDataset, cv: ControlVariableSet | None, spec: WorkingModelSpec, *, min_residual_df: int = 2
) -> DoseEstimates:
    """ANCOVA I (shared slopes, arm indicators) or II (per-arm fits) adjusted means.

    ANCOVA II needs ``n_k >= p + min_residual_df`` in every arm, ``p`` being
    the per-arm parameter count; lowering it below 2 leaves the sandwich SE
    with almost no residual information.
    """
    spec.check(dataset)
    if cv is not None and len(cv.residuals) != dataset.n:
        raise ValueError("control variable set is not aligned with the dataset")
    if min_residual_df < 0:
        raise ValueError("min_residual_df must be non-negative")
    design = _ancova_design(dataset, cv if spec.include_cv else None, spec, min_residual_df)
    method = Method.ANCOVA1 if spec.structure is Structure.ANCOVA1 else Method.ANCOVA2
    return _adjusted_means(dataset, cv if spec.include_cv else None, design, spec.family, method)


def composite_adjusted_means(
    dataset: TrialDataset, cv: ControlVariableSet, spec: WorkingModelSpec = WorkingModelSpec()
) -> DoseEstimates:
    """Adjusted means with the composite dose-exposure/exposure-response working model."""
    spec.check(dataset)
    spec = WorkingModelSpec(spec.family, spec.structure, spec.include_covariates, include_cv=True)
    design = _composite_design(dataset, cv, spec)
    return _adjusted_means(dataset, cv, design, spec.family, Method.COMPOSITE_DE_ER, canonical=False)


@dataclass(frozen=True, eq=False)
class RegressionFit:
    """Working-model coefficients with two-stage robust covariance."""

    labels: tuple[str, ...]
    coefficients: np.ndarray
    covariance: np.ndarray

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def coef(self, label: str) -> float:
        return float(self.coefficients[self.labels.index(label)])

    def se_of(self, label: str) -> float:
        return float(self.se[self.labels.index(label)])


def _two_stage_regression(cv, z, dz, y, family, labels) -> tuple[np.ndarray, np.ndarray]:
    fit = _fit(family, z, y, labels)
    beta = fit.coefficients
    s1, j1 = _stage1(cv, len(y))
    s_b, j_bb, j_bg = _beta_equations(z, dz, y, beta, family)
    phi = stacked_influence(s1, j1, s_b, j_bb, j_bg)
    return beta, phi


def residual_inclusion(dataset: TrialDataset, cv: ControlVariableSet, family: Family | str | None = None) -> RegressionFit:
    """Outcome regressed on exposure and the control variable.

    A parametric baseline: the exposure coefficient is only meaningful if
    the outcome model is correct.
    """
    if family is None:
        family = Family.LOGISTIC if dataset.outcome_kind is OutcomeKind.BINARY else Family.LINEAR
    family = Family(family)
    n = dataset.n
    z = np.column_stack([np.ones(n), dataset.exposure, cv.residuals])
    dz = np.zeros((n, 3, len(cv.gamma_hat)))
    dz[:, 2, :] = cv.residual_jacobian()
    labels = ("intercept", "exposure", "cv")
    beta, phi = _two_stage_regression(cv, z, dz, dataset.outcome, family, labels)
    p1 = len(cv.gamma_hat)
    cov = phi[:, p1:].T @ phi[:, p1:]
    return RegressionFit(labels, beta, 0.5 * (cov + cov.T))


@dataclass(frozen=True, eq=False)
class LinearDRFit(RegressionFit):
    """Linear dose-response fit ``Y = b0 + b_d D + b_v V``."""

    @property
    def intercept(self) -> float:
        return self.coef("intercept")

    @property
    def beta_d(self) -> float:
        return self.coef("dose")

    @property
    def beta_v(self) -> float:
        return self.coef("cv")

    @property
    def se_d(self) -> float:
        return self.se_of("dose")

    @property
    def se_v(self) -> float:
        return self.se_of("cv")


def linear_dr_fit(dataset: TrialDataset, cv: ControlVariableSet) -> LinearDRFit:
    n = dataset.n
    z = np.column_stack([np.ones(n), dataset.dose, cv.residuals])
    dz = np.zeros((n, 3, len(cv.gamma_hat)))
    dz[:, 2, :] = cv.residual_jacobian()
    labels = ("intercept", "dose", "cv")
    beta, phi = _two_stage_regression(cv, z, dz, dataset.outcome, Family.LINEAR, labels)
    p1 = len(cv.gamma_hat)
    cov = phi[:, p1:].T @ phi[:, p1:]
    return LinearDRFit(labels, beta, 0.5 * (cov + cov.T))


def composite_de_er(dataset: TrialDataset, cv: ControlVariableSet) -> LinearDRFit:
    """Exposure-response fit combined with a proportional dose-exposure fit.

    ``Y = b0 + b_c C + b_v V`` and ``C = gamma D + V`` compose to a linear
    dose-response model with slope ``b_c * gamma`` and control-variable
    coefficient ``b_c + b_v``; SEs by the delta method on the joint
    (gamma, b) sandwich.
    """
    if cv.spec.form is not DEForm.PROPORTIONAL or cv.scale != 1.0:
        raise ValidationError("composite DE-ER model requires a proportional dose-exposure fit")
    n = dataset.n
    z = np.column_stack([np.ones(n), dataset.exposure, cv.residuals])
    dz = np.zeros((n, 3, 1))
    dz[:, 2, :] = cv.residual_jacobian()
    beta, phi = _two_stage_regression(cv, z, dz, dataset.outcome, Family.LINEAR, ("intercept", "exposure", "cv"))
    gamma = float(cv.gamma_hat[0])
    b0, bc, bv = beta
    # parameter order (gamma, b0, b_c, b_v)
    grad = np.array(
        [
            [0.0, 1.0, 0.0, 0.0],
            [bc, 0.0, gamma, 0.0],
            [0.0, 0.0, 1.0, 1.0],
        ]
    )
    joint = phi.T @ phi
    cov = grad @ joint @ grad.T
    return LinearDRFit(("intercept", "dose", "cv"), np.array([b0, bc * gamma, bc + bv]), 0.5 * (cov + cov.T))


Estimator = Callable[[TrialDataset, ControlVariableSet], DoseEstimates]


def bootstrap_se(
    dataset: TrialDataset,
    de_spec: DEModelSpec,
    estimator: Estimator,
    draws: int = 2000,
    seed: int = 0,
) -> np.ndarray:
    """Subject-level bootstrap SD of per-arm estimates, resampling within arm.

    Both the dose-exposure fit and the estimator are refit on each draw.
    Draws that raise a numerical error are skipped.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xB007])))
    parts = arm_partition(dataset)
    out = []
    for _ in range(draws):
        idx = np.concatenate([rng.choice(p, size=len(p), replace=True) for p in parts])
        boot = dataset.subset(idx)
        try:
            out.append(estimator(boot, fit_de_model(boot, de_spec)).mu)
        except NumericalError:
            continue
    if len(out) < 2:
        raise NumericalError("too few successful bootstrap draws")
    return np.asarray(out).std(axis=0, ddof=1)
