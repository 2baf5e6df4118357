"""Least squares, logistic maximum likelihood and sandwich covariances.

All functions are pure.  Breads passed to the sandwich helpers are the
Jacobians of the *summed* estimating equations with respect to the
parameters; any consistent sign convention works.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.special import expit

from .errors import RankDeficient, Separation, SingularBread

RANK_TOL = 1e-10
SCORE_TOL = 1e-8
STEP_TOL = 1e-6
MAX_NEWTON = 50
MAX_HALVINGS = 10
SEPARATION_COEF = 30.0
SEPARATION_PROB = 1e-10
_COND_LIMIT = 1e13


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    values: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("design must be two-dimensional")
        if len(self.labels) != values.shape[1]:
            raise ValueError("one label per design column is required")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class FitResult:
    coefficients: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray
    model_covariance: np.ndarray
    robust_covariance: np.ndarray
    converged: bool
    iterations: int
    labels: tuple[str, ...] = ()

    @property
    def robust_se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.robust_covariance), 0.0, None))

    def coef(self, label: str) -> float:
        return float(self.coefficients[self.labels.index(label)])


def _as_design(design, labels: Sequence[str] | None) -> tuple[np.ndarray, tuple[str, ...]]:
    if isinstance(design, DesignMatrix):
        return design.values, design.labels
    x = np.asarray(design, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if labels is None:
        labels = tuple(f"col{j}" for j in range(x.shape[1]))
    return x, tuple(labels)


def _pivoted_qr(x: np.ndarray, labels: tuple[str, ...]):
    n, p = x.shape
    if n < p:
        raise RankDeficient(labels[p - 1] if p else None, f"{n} rows cannot identify {p} columns")
    if not np.all(np.isfinite(x)):
        raise ValueError("design contains non-finite entries")
    q, r, piv = scipy.linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if p and (diag[0] == 0 or np.any(diag < RANK_TOL * diag[0])):
        bad = int(np.argmax(diag < RANK_TOL * diag[0])) if diag[0] else 0
        raise RankDeficient(labels[piv[bad]])
    return q, r, piv


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _inverse(bread: np.ndarray) -> np.ndarray:
    bread = np.atleast_2d(np.asarray(bread, dtype=float))
    if bread.shape[0] != bread.shape[1]:
        raise ValueError("bread must be square")
    if bread.size == 0:
        return bread.copy()
    if not np.all(np.isfinite(bread)) or np.linalg.cond(bread) > _COND_LIMIT:
        raise SingularBread("bread matrix is singular or ill-conditioned")
    return np.linalg.inv(bread)


def sandwich_covariance(score_contributions, bread, hc1: bool = False) -> np.ndarray:
    """``bread⁻¹ (Σ sᵢsᵢᵀ) bread⁻ᵀ``; HC1 multiplies by ``n/(n-p)``."""
    s = np.asarray(score_contributions, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    inv = _inverse(bread)
    cov = inv @ (s.T @ s) @ inv.T
    if hc1:
        n, p = s.shape
        cov = cov * (n / (n - p))
    return _symmetrize(cov)


def stacked_influence(stage1_scores, stage1_bread, stage2_scores, stage2_bread, cross_derivative) -> np.ndarray:
    """Per-subject influence contributions ``(n, p1 + p2)`` of a two-stage system.

    ``cross_derivative`` is the ``(p2, p1)`` Jacobian of the summed stage-2
    equations with respect to the stage-1 parameters.
    """
    s1 = np.atleast_2d(np.asarray(stage1_scores, dtype=float))
    s2 = np.atleast_2d(np.asarray(stage2_scores, dtype=float))
    if s1.shape[0] == 1 and s2.shape[0] != 1:
        s1 = s1.T
    if s2.shape[0] == 1 and s1.shape[0] != 1:
        s2 = s2.T
    j21 = np.asarray(cross_derivative, dtype=float).reshape(s2.shape[1], s1.shape[1])
    phi1 = -s1 @ _inverse(stage1_bread).T
    phi2 = -(s2 + phi1 @ j21.T) @ _inverse(stage2_bread).T
    return np.hstack([phi1, phi2])


def stacked_ee_covariance(stage1_scores, stage1_bread, stage2_scores, stage2_bread, cross_derivative) -> np.ndarray:
    """Joint sandwich covariance of (stage-1, stage-2) parameters.

    The stage-2 block accounts for stage-1 estimation through the cross
    derivative; with a zero cross derivative it reduces to the stage-2
    sandwich.
    """
    phi = stacked_influence(stage1_scores, stage1_bread, stage2_scores, stage2_bread, cross_derivative)
    return _symmetrize(phi.T @ phi)


def ols_fit(design, response, labels: Sequence[str] | None = None, hc1: bool = False) -> FitResult:
    x, labels = _as_design(design, labels)
    y = np.asarray(response, dtype=float)
    n, p = x.shape
    q, r, piv = _pivoted_qr(x, labels)
    beta_p = scipy.linalg.solve_triangular(r, q.T @ y)
    beta = np.empty(p)
    beta[piv] = beta_p
    fitted = x @ beta
    resid = y - fitted
    rinv = scipy.linalg.solve_triangular(r, np.eye(p))
    xtx_inv_p = rinv @ rinv.T
    xtx_inv = np.empty((p, p))
    xtx_inv[np.ix_(piv, piv)] = xtx_inv_p
    sigma2 = float(resid @ resid) / max(n - p, 1)
    meat = (x * resid[:, None]).T @ (x * resid[:, None])
    robust = xtx_inv @ meat @ xtx_inv
    if hc1 and n > p:
        robust = robust * (n / (n - p))
    return FitResult(
        coefficients=beta,
        residuals=resid,
        fitted=fitted,
        model_covariance=_symmetrize(sigma2 * xtx_inv),
        robust_covariance=_symmetrize(robust),
        converged=True,
        iterations=1,
        labels=labels,
    )


def _loglik(eta: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def logistic_fit(design, response, labels: Sequence[str] | None = None, hc1: bool = False) -> FitResult:
    """Newton-Raphson with step halving for a logit-link Bernoulli model.

    Converged means max |score| <= 1e-8 together with a Newton step below
    1e-6; a diverging maximizer keeps taking unit-size steps instead, which
    is how separation shows up.
    """
    x, labels = _as_design(design, labels)
    y = np.asarray(response, dtype=float)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic response must be 0/1")
    n, p = x.shape
    _pivoted_qr(x, labels)

    beta = np.zeros(p)
    eta = x @ beta
    ll = _loglik(eta, y)
    converged = False
    it = 0
    for it in range(1, MAX_NEWTON + 1):
        prob = expit(eta)
        score = x.T @ (y - prob)
        hess = (x * (prob * (1 - prob))[:, None]).T @ x
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            raise Separation("information matrix became singular; outcomes are separated") from None
        if not np.all(np.isfinite(step)):
            raise Separation("non-finite Newton step; outcomes are separated")
        if np.max(np.abs(score), initial=0.0) <= SCORE_TOL and np.max(np.abs(step), initial=0.0) <= STEP_TOL:
            beta = beta + step
            eta = x @ beta
            converged = True
            break
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = beta + t * step
            cand_eta = x @ cand
            cand_ll = _loglik(cand_eta, y)
            if cand_ll >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        beta, eta, ll = cand, cand_eta, cand_ll

    prob = expit(eta)
    extreme = np.min(np.minimum(prob, 1 - prob), initial=1.0) <= SEPARATION_PROB
    if np.max(np.abs(beta), initial=0.0) > SEPARATION_COEF or (not converged and extreme):
        raise Separation(
            f"logistic fit diverged after {it} iterations (max |coef| {np.max(np.abs(beta)):.3g}); "
            "outcomes are quasi-completely separated"
        )
    w = prob * (1 - prob)
    info = (x * w[:, None]).T @ x
    resid = y - prob
    model_cov = _inverse(info)
    robust = sandwich_covariance(x * resid[:, None], info, hc1=hc1)
    return FitResult(
        coefficients=beta,
        residuals=resid,
        fitted=prob,
        model_covariance=_symmetrize(model_cov),
        robust_covariance=robust,
        converged=converged,
        iterations=it,
        labels=labels,
    )
