"""Monte Carlo study of unadjusted vs. control-variable adjusted estimators.

Data-generating process (doses 1, 2, 3 allocated 1:1:1)::

    C = D + V,                      V ~ N(0, 1)
    Y = C + b1 exp(C + b2 V) + 0.5 V + U,   U ~ N(0, 1)      (normal)
    Y ~ Bernoulli(expit(-(0.5 - C - b1 exp(C + b2 V) - 0.5 V + U)))   (binary)

Random numbers: every stream is a numpy ``Philox`` (4x64 counter-based)
generator keyed by ``SeedSequence([seed, purpose, index...])``, so run ``r``
depends only on ``(seed, r)`` and serial/parallel execution agree bitwise.
Normals come from numpy's ziggurat sampler (``Generator.standard_normal``).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import expit

from .control import DEModelSpec, fit_de_model
from .data import DoseLevel, OutcomeKind, TrialDataset
from .errors import NumericalError, TooManyFailures, ValidationError
from .estimators import Family, WorkingModelSpec, ancova_adjusted, composite_adjusted_means, unadjusted_means

log = logging.getLogger(__name__)

DOSES = (1.0, 2.0, 3.0)
_TRIAL, _TRUTH = 1, 2
STRUCTURES = ("ancova1", "ancova2", "composite_de_er")


@dataclass(frozen=True)
class ScenarioConfig:
    n: int = 60
    b1: float = 0.0
    b2: float = 0.0
    outcome_kind: str = "normal"
    working_family: str = "linear"
    structure: str = "ancova2"
    runs: int = 5000
    truth_sample: int = 100_000
    seed: int = 20240101
    include_cv: bool = True

    def __post_init__(self):
        problems = []
        if self.outcome_kind not in ("normal", "binary"):
            problems.append(f"outcome_kind must be normal or binary, got {self.outcome_kind!r}")
        if self.working_family not in ("linear", "logistic"):
            problems.append(f"working_family must be linear or logistic, got {self.working_family!r}")
        if self.working_family == "logistic" and self.outcome_kind != "binary":
            problems.append("logistic working model needs binary outcomes")
        if self.structure not in STRUCTURES:
            problems.append(f"structure must be one of {STRUCTURES}, got {self.structure!r}")
        if self.n < 3 * 2:
            problems.append("n must allow at least 2 subjects per dose")
        if self.runs < 1:
            problems.append("runs must be >= 1")
        if self.truth_sample < 10_000:
            problems.append("truth_sample must be >= 10000")
        if not 0 <= self.seed < 2**64:
            problems.append("seed must be a non-negative 64-bit integer")
        if problems:
            raise ValidationError("; ".join(problems), problems)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ValidationError(f"unknown scenario fields: {sorted(extra)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def working_spec(self) -> WorkingModelSpec:
        structure = "ancova1" if self.structure == "composite_de_er" else self.structure
        return WorkingModelSpec(self.working_family, structure, include_covariates=False, include_cv=self.include_cv)


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def _outcome(config: ScenarioConfig, c, v, u, rng) -> np.ndarray:
    signal = c + config.b1 * np.exp(c + config.b2 * v) + 0.5 * v
    if config.outcome_kind == "normal":
        return signal + u
    p = expit(-(0.5 - signal + u))
    return (rng.random(len(c)) < p).astype(float)


@dataclass(frozen=True, eq=False)
class HiddenTruth:
    v: np.ndarray
    u: np.ndarray


def generate_dataset(config: ScenarioConfig, run_index: int) -> tuple[TrialDataset, HiddenTruth]:
    """Trial ``run_index`` of the scenario; a pure function of ``(seed, run_index)``."""
    rng = _rng(config.seed, _TRIAL, run_index)
    n = config.n
    perm = rng.permutation(n)
    arm = np.empty(n, dtype=np.int64)
    arm[perm] = np.arange(n) % len(DOSES)
    dose = np.asarray(DOSES)[arm]
    v = rng.standard_normal(n)
    u = rng.standard_normal(n)
    c = dose + v
    y = _outcome(config, c, v, u, rng)
    ids = np.array([f"s{i:05d}" for i in range(n)], dtype=object)
    ds = TrialDataset(
        dose_levels=tuple(DoseLevel(k, d) for k, d in enumerate(DOSES)),
        subject_ids=ids,
        arm=arm,
        exposure=c,
        outcome=y,
        covariates=np.zeros((n, 0)),
        outcome_kind=OutcomeKind.BINARY if config.outcome_kind == "binary" else OutcomeKind.CONTINUOUS,
    )
    # dataset rows are sorted by (arm, id); ids are positional so the sort is arm-stable
    order = np.lexsort((np.arange(n), arm))
    return ds, HiddenTruth(v[order], u[order])


@dataclass(frozen=True, eq=False)
class TrueMeans:
    mu: np.ndarray
    mc_se: np.ndarray


def true_means(config: ScenarioConfig, sub_seed: int = 0) -> TrueMeans:
    """Monte Carlo mean response at each dose, independent draws per dose.

    Binary outcomes are averaged through their success probabilities
    (same expectation as averaging the 0/1 draws, lower noise).
    """
    mu, se = [], []
    for k, d in enumerate(DOSES):
        rng = _rng(config.seed, _TRUTH, sub_seed, k)
        v = rng.standard_normal(config.truth_sample)
        u = rng.standard_normal(config.truth_sample)
        c = d + v
        signal = c + config.b1 * np.exp(c + config.b2 * v) + 0.5 * v
        draws = signal + u if config.outcome_kind == "normal" else expit(signal - 0.5 - u)
        mu.append(draws.mean())
        se.append(draws.std(ddof=1) / math.sqrt(len(draws)))
    return TrueMeans(np.array(mu), np.array(se))


def _one_run(config: ScenarioConfig, run_index: int):
    ds, _ = generate_dataset(config, run_index)
    try:
        unadj = unadjusted_means(ds)
        cv = fit_de_model(ds, DEModelSpec("proportional"))
        if config.structure == "composite_de_er":
            adj = composite_adjusted_means(ds, cv, config.working_spec)
        else:
            adj = ancova_adjusted(ds, cv, config.working_spec)
    except NumericalError as exc:
        return run_index, None, f"{type(exc).__name__}: {exc}"
    return run_index, np.concatenate([unadj.mu, adj.mu, adj.se]), None


def _run_chunk(args):
    config, indices = args
    return [_one_run(config, r) for r in indices]


@dataclass(frozen=True, eq=False)
class SimulationReport:
    config: ScenarioConfig
    true_mu: np.ndarray
    true_mu_se: np.ndarray
    rel_bias_x10_unadjusted: np.ndarray
    rel_bias_x10_adjusted: np.ndarray
    abs_bias_x10_unadjusted: np.ndarray
    abs_bias_x10_adjusted: np.ndarray
    mc_se_rel_bias_x10_unadjusted: np.ndarray
    mc_se_rel_bias_x10_adjusted: np.ndarray
    var_ratio: np.ndarray
    mc_se_var_ratio: np.ndarray
    sd_unadjusted: np.ndarray
    sd_adjusted: np.ndarray
    rms_se_adjusted: np.ndarray
    runs_completed: int
    failures: tuple[tuple[int, str], ...] = field(default=())


def _ratio_mc_se(adj: np.ndarray, unadj: np.ndarray) -> np.ndarray:
    """Delta-method Monte Carlo SE of Var(adj)/Var(unadj), per column."""
    r = len(adj)
    if r < 3:
        return np.full(adj.shape[1], np.nan)
    a = (adj - adj.mean(0)) ** 2
    u = (unadj - unadj.mean(0)) ** 2
    va, vu = a.mean(0), u.mean(0)
    infl = a / vu - va * u / vu**2
    return infl.std(axis=0, ddof=1) / math.sqrt(r)


def run_monte_carlo(
    config: ScenarioConfig,
    threads: int = 1,
    max_failure_fraction: float = 0.05,
    truth: TrueMeans | None = None,
) -> SimulationReport:
    """Repeat generate/fit/estimate ``config.runs`` times and summarise.

    Runs whose fits fail (e.g. separation in a logistic arm fit) are
    dropped from both estimators and listed in ``failures``.
    """
    indices = list(range(config.runs))
    if threads > 1 and config.runs > 1:
        size = math.ceil(config.runs / (4 * threads))
        chunks = [(config, indices[i : i + size]) for i in range(0, config.runs, size)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = [res for chunk in pool.map(_run_chunk, chunks) for res in chunk]
    else:
        results = _run_chunk((config, indices))
    results.sort(key=lambda t: t[0])

    failures = tuple((r, msg) for r, vals, msg in results if vals is None)
    if len(failures) > max_failure_fraction * config.runs:
        raise TooManyFailures(
            f"{len(failures)} of {config.runs} runs failed (limit {max_failure_fraction:.0%}); first: {failures[0][1]}"
        )
    for r, msg in failures:
        log.info("run %d dropped: %s", r, msg)
    vals = np.array([v for _, v, _ in results if v is not None])
    if len(vals) == 0:
        raise TooManyFailures("every run failed")
    k = len(DOSES)
    unadj, adj, se = vals[:, :k], vals[:, k : 2 * k], vals[:, 2 * k :]
    runs = len(vals)

    truth = truth if truth is not None else true_means(config)
    mu = truth.mu
    denom = np.abs(mu)
    ddof = 1 if runs > 1 else 0
    var_u = unadj.var(axis=0, ddof=ddof) if runs > 1 else np.full(k, np.nan)
    var_a = adj.var(axis=0, ddof=ddof) if runs > 1 else np.full(k, np.nan)
    with np.errstate(invalid="ignore", divide="ignore"):
        mcse_u = 10 * np.sqrt(var_u / runs + truth.mc_se**2) / denom
        mcse_a = 10 * np.sqrt(var_a / runs + truth.mc_se**2) / denom
        ratio = var_a / var_u
    return SimulationReport(
        config=config,
        true_mu=mu,
        true_mu_se=truth.mc_se,
        rel_bias_x10_unadjusted=10 * (unadj.mean(0) - mu) / denom,
        rel_bias_x10_adjusted=10 * (adj.mean(0) - mu) / denom,
        abs_bias_x10_unadjusted=10 * (unadj.mean(0) - mu),
        abs_bias_x10_adjusted=10 * (adj.mean(0) - mu),
        mc_se_rel_bias_x10_unadjusted=mcse_u,
        mc_se_rel_bias_x10_adjusted=mcse_a,
        var_ratio=ratio,
        mc_se_var_ratio=_ratio_mc_se(adj, unadj),
        sd_unadjusted=np.sqrt(var_u),
        sd_adjusted=np.sqrt(var_a),
        rms_se_adjusted=np.sqrt(np.mean(se**2, axis=0)),
        runs_completed=runs,
        failures=failures,
    )


TABLE_COLUMNS = (
    ["n", "b1", "b2"]
    + [f"bias_x10_unadj_mu{k}" for k in (1, 2, 3)]
    + [f"bias_x10_adj_mu{k}" for k in (1, 2, 3)]
    + [f"var_ratio_mu{k}" for k in (1, 2, 3)]
)


def report_table(reports, bias: str = "relative") -> list[dict]:
    """One row per report in the order given, 12 columns (see ``TABLE_COLUMNS``)."""
    reports = list(reports)
    if not reports:
        raise ValueError("report_table needs at least one report")
    if bias not in ("relative", "absolute"):
        raise ValueError("bias must be 'relative' or 'absolute'")
    rows = []
    for rep in reports:
        bu = rep.rel_bias_x10_unadjusted if bias == "relative" else rep.abs_bias_x10_unadjusted
        ba = rep.rel_bias_x10_adjusted if bias == "relative" else rep.abs_bias_x10_adjusted
        values = [rep.config.n, rep.config.b1, rep.config.b2, *bu, *ba, *rep.var_ratio]
        rows.append(dict(zip(TABLE_COLUMNS, values)))
    return rows


DETAIL_COLUMNS = (
    ["n", "b1", "b2", "outcome_kind", "working_family", "structure", "runs_completed", "runs_failed"]
    + [f"true_mu{k}" for k in (1, 2, 3)]
    + [f"mc_se_bias_x10_unadj_mu{k}" for k in (1, 2, 3)]
    + [f"mc_se_bias_x10_adj_mu{k}" for k in (1, 2, 3)]
    + [f"mc_se_var_ratio_mu{k}" for k in (1, 2, 3)]
    + [f"rms_se_adj_mu{k}" for k in (1, 2, 3)]
    + [f"sd_adj_mu{k}" for k in (1, 2, 3)]
)


def detail_table(reports) -> list[dict]:
    """Monte Carlo SEs and truth values accompanying ``report_table``."""
    rows = []
    for rep in reports:
        c = rep.config
        values = [
            c.n, c.b1, c.b2, c.outcome_kind, c.working_family, c.structure,
            rep.runs_completed, len(rep.failures),
            *rep.true_mu, *rep.mc_se_rel_bias_x10_unadjusted, *rep.mc_se_rel_bias_x10_adjusted,
            *rep.mc_se_var_ratio, *rep.rms_se_adjusted, *rep.sd_adjusted,
        ]  # fmt: skip
        rows.append(dict(zip(DETAIL_COLUMNS, values)))
    return rows
